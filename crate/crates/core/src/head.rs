//! Patch-weighted score head: per-token scores `s_i` and positive weights
//! `w_i` reduced to `sum(w_i * s_i) / sum(w_i)`.

use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::nn::{Ctx, Mlp, ParamStore};

#[derive(Clone, Debug)]
pub struct WeightedHead {
    score: Mlp,
    weight: Mlp,
}

impl WeightedHead {
    pub fn new(name: &str, dim: usize) -> Self {
        let hidden = (dim / 2).max(1);
        WeightedHead {
            score: Mlp::new(&format!("{name}/score"), dim, hidden, 1),
            weight: Mlp::new(&format!("{name}/weight"), dim, hidden, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.score.init(store, rng);
        self.weight.init(store, rng);
    }

    /// Zero the last score layer so the head outputs 0 until trained.
    pub fn zero_score_output(&self, store: &mut ParamStore) {
        self.score.fc2.zero(store);
    }

    /// Per-token scores and softplus weights, each `(N, L, 1)`.
    pub fn maps(&self, ctx: &mut Ctx, tokens: Var) -> (Var, Var) {
        let s = self.score.forward(ctx, tokens);
        let w = self.weight.forward(ctx, tokens);
        let w = ctx.g.softplus(w);
        (s, w)
    }

    /// `(N, L, D)` tokens to `(N,)` scores.
    pub fn forward(&self, ctx: &mut Ctx, tokens: Var) -> Var {
        let (s, w) = self.maps(ctx, tokens);
        weighted_mean(ctx, s, w)
    }
}

/// `sum_i w_i s_i / sum_i w_i` over axis 1 of `(N, L, 1)` maps, giving `(N,)`.
pub fn weighted_mean(ctx: &mut Ctx, s: Var, w: Var) -> Var {
    let n = ctx.g.shape(s)[0];
    let ws = ctx.g.mul(w, s);
    let num = ctx.g.sum_axis(ws, 1);
    let den = ctx.g.sum_axis(w, 1);
    let q = ctx.g.div(num, den);
    ctx.g.reshape(q, &[n])
}
