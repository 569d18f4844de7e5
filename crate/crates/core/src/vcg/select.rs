//! Which encoder taps of which source image feed the fused feature map.
//! Every mode keeps the 4:2:1:1 ratio across (distorted, restored, t1, t2).

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Number of encoder taps per image.
pub const NUM_TAPS: usize = 9;
/// Taps drawn from (distorted, restored, noisy t1, noisy t2).
pub const RATIO: [usize; 4] = [4, 2, 1, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Dis,
    Y0,
    T1,
    T2,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Dis, Source::Y0, Source::T1, Source::T2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Dis => "dis",
            Source::Y0 => "y0",
            Source::T1 => "t1",
            Source::T2 => "t2",
        }
    }
}

/// One selected map: source image and 1-based tap index.
pub type Tap = (Source, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SelectionMode {
    /// Four consecutive distorted taps from `start`; restored taps reuse the same positions.
    ContinuityOverlap { start: usize },
    ContinuityNonOverlap,
    DiscontinuityOverlap,
    DiscontinuityNonOverlap,
    PureRandom { seed: u64 },
}

impl Default for SelectionMode {
    fn default() -> Self {
        SelectionMode::ContinuityOverlap { start: 6 }
    }
}

impl SelectionMode {
    /// The seven selection rows compared in the ablation study.
    pub fn ablation_rows() -> Vec<SelectionMode> {
        vec![
            SelectionMode::ContinuityOverlap { start: 6 },
            SelectionMode::ContinuityOverlap { start: 1 },
            SelectionMode::ContinuityOverlap { start: 3 },
            SelectionMode::ContinuityNonOverlap,
            SelectionMode::DiscontinuityOverlap,
            SelectionMode::DiscontinuityNonOverlap,
            SelectionMode::PureRandom { seed: 0 },
        ]
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "4211:")?;
        match self {
            SelectionMode::ContinuityOverlap { start } => write!(f, "continuity-overlap:start={start}"),
            SelectionMode::ContinuityNonOverlap => write!(f, "continuity-non-overlap"),
            SelectionMode::DiscontinuityOverlap => write!(f, "discontinuity-overlap"),
            SelectionMode::DiscontinuityNonOverlap => write!(f, "discontinuity-non-overlap"),
            SelectionMode::PureRandom { seed } => write!(f, "pure-random:seed={seed}"),
        }
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognised selection mode `{s}`"));
        let mut parts = s.trim().split(':');
        if parts.next() != Some("4211") {
            return Err(bad());
        }
        let name = parts.next().ok_or_else(bad)?;
        let arg = parts.next();
        if parts.next().is_some() {
            return Err(bad());
        }
        let value = |key: &str| -> Result<u64> {
            arg.and_then(|a| a.strip_prefix(key))
                .and_then(|a| a.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(bad)
        };
        let mode = match name {
            "continuity-overlap" => SelectionMode::ContinuityOverlap {
                start: if arg.is_none() { 6 } else { value("start")? as usize },
            },
            "pure-random" => SelectionMode::PureRandom {
                seed: if arg.is_none() { 0 } else { value("seed")? },
            },
            _ if arg.is_some() => return Err(bad()),
            "continuity-non-overlap" => SelectionMode::ContinuityNonOverlap,
            "discontinuity-overlap" => SelectionMode::DiscontinuityOverlap,
            "discontinuity-non-overlap" => SelectionMode::DiscontinuityNonOverlap,
            _ => return Err(bad()),
        };
        select_taps(mode)?;
        Ok(mode)
    }
}

impl TryFrom<String> for SelectionMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SelectionMode> for String {
    fn from(m: SelectionMode) -> String {
        m.to_string()
    }
}

fn assemble(dis: &[usize], y0: &[usize], t1: usize, t2: usize) -> Vec<Tap> {
    dis.iter()
        .map(|&i| (Source::Dis, i))
        .chain(y0.iter().map(|&i| (Source::Y0, i)))
        .chain([(Source::T1, t1), (Source::T2, t2)])
        .collect()
}

/// Eight `(source, tap)` pairs in fusion order: four distorted, two restored,
/// then one each from the two noisy intermediates.
pub fn select_taps(mode: SelectionMode) -> Result<Vec<Tap>> {
    Ok(match mode {
        SelectionMode::ContinuityOverlap { start } => {
            if !(1..=NUM_TAPS - 3).contains(&start) {
                return Err(Error::Config(format!(
                    "continuity-overlap start must lie in 1..={}, got {start}",
                    NUM_TAPS - 3
                )));
            }
            let s = start;
            assemble(&[s, s + 1, s + 2, s + 3], &[s, s + 1], s + 2, s + 3)
        }
        SelectionMode::ContinuityNonOverlap => assemble(&[1, 2, 3, 4], &[6, 7], 8, 9),
        SelectionMode::DiscontinuityOverlap => assemble(&[2, 4, 6, 8], &[2, 4], 6, 8),
        SelectionMode::DiscontinuityNonOverlap => assemble(&[2, 4, 6, 8], &[1, 3], 5, 7),
        SelectionMode::PureRandom { seed } => {
            let mut rng = seed::rng(seed, &[stream::SELECTION]);
            let mut draw = |k: usize| {
                let mut v: Vec<usize> = sample(&mut rng, NUM_TAPS, k).into_iter().map(|i| i + 1).collect();
                v.sort_unstable();
                v
            };
            let (dis, y0, t1, t2) = (draw(4), draw(2), draw(1)[0], draw(1)[0]);
            assemble(&dis, &y0, t1, t2)
        }
    })
}

/// Canonical text form of a selection, e.g. `dis6 dis7 dis8 dis9 y0_6 y0_7 t1_8 t2_9`.
pub fn format_taps(taps: &[Tap]) -> String {
    taps.iter()
        .map(|(s, i)| match s {
            Source::Dis => format!("dis{i}"),
            _ => format!("{}_{i}", s.as_str()),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_modes_round_trip_through_strings() {
        for m in SelectionMode::ablation_rows() {
            let s = m.to_string();
            assert_eq!(s.parse::<SelectionMode>().unwrap(), m, "{s}");
        }
        assert_eq!(
            "4211:continuity-overlap:start=6".parse::<SelectionMode>().unwrap(),
            SelectionMode::default()
        );
        for bad in [
            "",
            "4211",
            "3311:continuity-overlap",
            "4211:continuity-overlap:start=7",
            "4211:continuity-overlap:begin=2",
            "4211:discontinuity-overlap:start=2",
            "4211:sideways",
        ] {
            assert!(bad.parse::<SelectionMode>().is_err(), "{bad}");
        }
    }

    #[test]
    fn ratio_holds_for_every_mode() {
        let mut modes = SelectionMode::ablation_rows();
        modes.extend((0..20).map(|seed| SelectionMode::PureRandom { seed }));
        for m in modes {
            let taps = select_taps(m).unwrap();
            assert_eq!(taps.len(), 8);
            for (src, want) in Source::ALL.iter().zip(RATIO) {
                assert_eq!(taps.iter().filter(|(s, _)| s == src).count(), want, "{m}");
            }
            assert!(taps.iter().all(|(_, i)| (1..=NUM_TAPS).contains(i)));
            assert!(taps.windows(2).all(|w| w[0].0 <= w[1].0));
        }
    }

    #[test]
    fn pure_random_is_seeded() {
        let a = select_taps(SelectionMode::PureRandom { seed: 3 }).unwrap();
        assert_eq!(a, select_taps(SelectionMode::PureRandom { seed: 3 }).unwrap());
        let differs = (4..30).any(|s| select_taps(SelectionMode::PureRandom { seed: s }).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn serde_uses_the_string_form() {
        let m = SelectionMode::ContinuityOverlap { start: 3 };
        let j = serde_json::to_string(&m).unwrap();
        assert_eq!(j, "\"4211:continuity-overlap:start=3\"");
        assert_eq!(serde_json::from_str::<SelectionMode>(&j).unwrap(), m);
    }
}
