//! Rank and linear correlation between predicted scores and labels, the
//! evaluation report, and the reference-disjoint train/test split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::DistortionKind;
use crate::error::{Error, Result};
use crate::seed::{self, stream};

fn check_pair(pred: &[f64], label: &[f64]) -> Result<()> {
    if pred.len() != label.len() {
        return Err(Error::invalid(format!(
            "correlation inputs differ in length ({} vs {})",
            pred.len(),
            label.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::invalid("correlation needs at least two pairs"));
    }
    if let Some(v) = pred.iter().chain(label).find(|v| !v.is_finite()) {
        return Err(Error::non_finite(format!("correlation input {v}")));
    }
    Ok(())
}

/// 1-based ranks with ties sharing the mean of the positions they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the inputs is constant".into(),
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (Pearson correlation of average-tie ranks).
pub fn srcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label)?;
    pearson(&average_ranks(pred), &average_ranks(label))
}

/// Pearson linear correlation on the raw values.
pub fn plcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label)?;
    pearson(pred, label)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub id: String,
    pub predicted: f64,
    pub label: f64,
    pub kind: DistortionKind,
    pub level: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindCorrelation {
    /// `None` when the correlation is undefined for this subset.
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<ScoredPair>,
    pub srcc: f64,
    pub plcc: f64,
    pub per_kind: BTreeMap<DistortionKind, KindCorrelation>,
}

impl EvalReport {
    /// Overall correlations must be defined; per-kind ones may be undefined.
    pub fn from_pairs(pairs: Vec<ScoredPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("cannot evaluate an empty split"));
        }
        let p: Vec<f64> = pairs.iter().map(|x| x.predicted).collect();
        let l: Vec<f64> = pairs.iter().map(|x| x.label).collect();
        let srcc_all = srcc(&p, &l)?;
        let plcc_all = plcc(&p, &l)?;
        let mut groups: BTreeMap<DistortionKind, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for x in &pairs {
            let g = groups.entry(x.kind).or_default();
            g.0.push(x.predicted);
            g.1.push(x.label);
        }
        let per_kind = groups
            .into_iter()
            .map(|(k, (p, l))| {
                let c = KindCorrelation {
                    srcc: srcc(&p, &l).ok(),
                    plcc: plcc(&p, &l).ok(),
                    count: p.len(),
                };
                (k, c)
            })
            .collect();
        Ok(EvalReport {
            pairs,
            srcc: srcc_all,
            plcc: plcc_all,
            per_kind,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-kind table with columns `kind,level,srcc,plcc`; the overall row
    /// uses kind `all`. Undefined correlations are left empty.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("kind,level,srcc,plcc\r\n");
        let _ = write!(out, "all,all,{},{}\r\n", fmt(Some(self.srcc)), fmt(Some(self.plcc)));
        for (k, c) in &self.per_kind {
            let _ = write!(out, "{k},all,{},{}\r\n", fmt(c.srcc), fmt(c.plcc));
        }
        out
    }

    /// `id,kind,level,predicted,label` rows for every pair.
    pub fn pairs_csv(&self) -> String {
        let mut out = String::from("id,kind,level,predicted,label\r\n");
        for p in &self.pairs {
            let _ = write!(out, "{},{},{},{:.9},{:.9}\r\n", p.id, p.kind, p.level, p.predicted, p.label);
        }
        out
    }
}

/// Indices of a train/test partition whose reference images are disjoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub test_references: Vec<String>,
}

/// Shuffle the distinct reference ids with `seed`, send `round(test_fraction * refs)`
/// of them (at least one) to the test side, and partition samples accordingly.
pub fn split_by_reference(reference_ids: &[String], test_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut refs: Vec<&String> = reference_ids.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if refs.len() < 2 {
        return Err(Error::invalid("a split needs at least two reference images"));
    }
    refs.shuffle(&mut seed::rng(seed, &[stream::SPLIT]));
    let n_test = ((refs.len() as f64 * test_fraction).round() as usize).clamp(1, refs.len() - 1);
    let test_refs: BTreeSet<&String> = refs[..n_test].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, r) in reference_ids.iter().enumerate() {
        if test_refs.contains(r) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    let split = Split {
        train,
        test,
        test_references: test_refs.into_iter().cloned().collect(),
    };
    check_disjoint(&split, reference_ids)?;
    Ok(split)
}

/// Fails if any reference id has samples on both sides of the split.
pub fn check_disjoint(split: &Split, reference_ids: &[String]) -> Result<()> {
    let get = |i: usize| {
        reference_ids
            .get(i)
            .ok_or_else(|| Error::invalid(format!("split index {i} out of range")))
    };
    let train: BTreeSet<&String> = split.train.iter().map(|&i| get(i)).collect::<Result<_>>()?;
    for &i in &split.test {
        let r = get(i)?;
        if train.contains(r) {
            return Err(Error::SplitLeak(r.clone()));
        }
    }
    Ok(())
}
