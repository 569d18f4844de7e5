//! Difference-analysis branch: a residual CNN encodes all four images, the
//! absolute feature differences against the distorted image become Q, K and V
//! for a residual transposed-attention block, and a weighted head scores the
//! result. Also hosts the final two-branch score fusion.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Rtab, Tab};
use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::head::WeightedHead;
use crate::nn::{Conv2d, Ctx, ParamStore};
use crate::vcg::Source;

pub const PREFIX: &str = "vda";
pub const ENCODER_PREFIX: &str = "vda/encoder";

/// Which restoration output each of Q, K and V is differenced against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QkvAssignment {
    /// Q from the restored image, K from t1, V from t2.
    #[default]
    Y0T1T2,
    Y0T2T1,
    T2T1Y0,
}

impl QkvAssignment {
    pub const ALL: [QkvAssignment; 3] = [QkvAssignment::Y0T1T2, QkvAssignment::Y0T2T1, QkvAssignment::T2T1Y0];

    pub fn sources(self) -> [Source; 3] {
        match self {
            QkvAssignment::Y0T1T2 => [Source::Y0, Source::T1, Source::T2],
            QkvAssignment::Y0T2T1 => [Source::Y0, Source::T2, Source::T1],
            QkvAssignment::T2T1Y0 => [Source::T2, Source::T1, Source::Y0],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QkvAssignment::Y0T1T2 => "y0-t1-t2",
            QkvAssignment::Y0T2T1 => "y0-t2-t1",
            QkvAssignment::T2T1Y0 => "t2-t1-y0",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VdaConfig {
    pub image_size: (usize, usize),
    pub widths: [usize; 3],
    pub heads: usize,
    pub qkv: QkvAssignment,
    /// `false` replaces the difference attention by a plain transposed-attention block on `X`.
    pub rtab: bool,
}

impl Default for VdaConfig {
    fn default() -> Self {
        VdaConfig {
            image_size: (32, 32),
            widths: [16, 32, 64],
            heads: 4,
            qkv: QkvAssignment::default(),
            rtab: true,
        }
    }
}

impl VdaConfig {
    pub fn feature_size(&self) -> (usize, usize) {
        let down = |mut v: usize| {
            for _ in 0..3 {
                v = v.div_ceil(2);
            }
            v
        };
        (down(self.image_size.0), down(self.image_size.1))
    }

    pub fn channels(&self) -> usize {
        self.widths[2]
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Three stride-2 stages, each followed by a SiLU residual block.
#[derive(Clone, Debug)]
pub struct DiffEncoder {
    stages: Vec<Stage>,
}

impl DiffEncoder {
    pub fn new(widths: [usize; 3]) -> Self {
        let mut cin = 3;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let n = |s: &str| format!("{ENCODER_PREFIX}/stage{i}/{s}");
                let st = Stage {
                    down: Conv2d::new(n("down"), cin, w, 3).stride(2),
                    conv1: Conv2d::new(n("conv1"), w, w, 3),
                    conv2: Conv2d::new(n("conv2"), w, w, 3),
                };
                cin = w;
                st
            })
            .collect();
        DiffEncoder { stages }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for s in &self.stages {
            s.down.init(store, rng);
            s.conv1.init(store, rng);
            s.conv2.init_scaled(store, rng, 0.5);
        }
    }

    /// `(N, 3, H, W)` to `(N, C, h, w)`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let mut h = x;
        for s in &self.stages {
            h = s.down.forward(ctx, h);
            h = ctx.g.silu(h);
            let r = s.conv1.forward(ctx, h);
            let r = ctx.g.silu(r);
            let r = s.conv2.forward(ctx, r);
            h = ctx.g.add(h, r);
        }
        h
    }

    pub fn encode(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut ctx = Ctx::inference(store);
        let v = ctx.input(x.clone());
        let out = self.forward(&mut ctx, v);
        ctx.g.value(out).clone()
    }
}

/// `|E(dis) - E(a)|` for the three sources picked by `assignment`.
/// `feats` holds encodings ordered as [`Source::ALL`].
pub fn diff_qkv(ctx: &mut Ctx, feats: &[Var; 4], assignment: QkvAssignment) -> Result<(Var, Var, Var)> {
    let base = ctx.g.shape(feats[0]).to_vec();
    if let Some(f) = feats.iter().find(|f| ctx.g.shape(**f) != base) {
        return Err(Error::ShapeMismatch {
            expected: base,
            actual: ctx.g.shape(*f).to_vec(),
        });
    }
    let [q, k, v] = assignment.sources().map(|s| {
        let d = ctx.g.sub(feats[0], feats[s.index()]);
        ctx.g.abs(d)
    });
    Ok((q, k, v))
}

#[derive(Clone, Debug)]
pub struct Vda {
    pub config: VdaConfig,
    pub encoder: DiffEncoder,
    mix: Conv2d,
    rtab: Rtab,
    tab: Tab,
    head: WeightedHead,
}

impl Vda {
    pub fn new(config: VdaConfig) -> Result<Self> {
        let c = config.channels();
        if c % config.heads != 0 {
            return Err(Error::Config("vda channels must be divisible by heads".into()));
        }
        let (h, w) = config.feature_size();
        Ok(Vda {
            encoder: DiffEncoder::new(config.widths),
            mix: Conv2d::new(format!("{PREFIX}/mix"), 3 * c, c, 1),
            rtab: Rtab::new(&format!("{PREFIX}/rtab"), config.heads, h * w),
            tab: Tab::new(&format!("{PREFIX}/tab"), c, config.heads, h * w),
            head: WeightedHead::new(&format!("{PREFIX}/head"), c),
            config,
        })
    }

    /// The score layer starts at zero, so the branch begins as a null
    /// correction to the other score.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.encoder.init(store, rng);
        self.mix.init(store, rng);
        if self.config.rtab {
            self.rtab.init(store);
        } else {
            self.tab.init(store, rng);
        }
        self.head.init(store, rng);
        self.head.zero_score_output(store);
    }

    pub fn rtab(&self) -> &Rtab {
        &self.rtab
    }

    /// `X`-mixing, attention and scoring from the four encodings.
    pub fn forward_feats(&self, ctx: &mut Ctx, feats: &[Var; 4]) -> Result<Var> {
        let (q, k, v) = diff_qkv(ctx, feats, self.config.qkv)?;
        let cat = ctx.g.concat(&[q, k, v], 1);
        let x = self.mix.forward(ctx, cat);
        let s = ctx.g.shape(x).to_vec();
        let (n, c, l) = (s[0], s[1], s[2] * s[3]);
        let tokens = if self.config.rtab {
            let (xh, _) = self.rtab.forward(ctx, q, k, v, x);
            let t = ctx.g.reshape(xh, &[n, c, l]);
            ctx.g.permute(t, &[0, 2, 1])
        } else {
            let t = ctx.g.reshape(x, &[n, c, l]);
            let t = ctx.g.permute(t, &[0, 2, 1]);
            self.tab.forward(ctx, t)
        };
        Ok(self.head.forward(ctx, tokens))
    }

    /// Score from the four `(N, 3, H, W)` images in `[-1, 1]`, ordered as [`Source::ALL`].
    pub fn forward(&self, ctx: &mut Ctx, images: [Var; 4]) -> Result<Var> {
        let feats = images.map(|x| self.encoder.forward(ctx, x));
        self.forward_feats(ctx, &feats)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedScore {
    pub score1: f64,
    pub score2: f64,
    pub final_score: f64,
}

pub fn fuse_scores(score1: f64, score2: f64) -> Result<FusedScore> {
    if !score1.is_finite() || !score2.is_finite() {
        return Err(Error::non_finite(format!("branch scores ({score1}, {score2})")));
    }
    Ok(FusedScore {
        score1,
        score2,
        final_score: score1 + score2,
    })
}
