//! Attention building blocks shared by both scoring branches: token
//! self-attention, windowed attention on a patch grid, and channel
//! ("transposed") attention with a learnable per-head temperature.

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tensor, Var};
use crate::nn::{Ctx, LayerNorm, Linear, Mlp, ParamStore};

/// Lower bound kept on every learnable attention temperature.
pub const MIN_TEMPERATURE: f64 = 1e-3;
const TEMPERATURE_SUFFIX: &str = "/alpha";

/// Clamp all temperatures in `store` to at least [`MIN_TEMPERATURE`].
pub fn clamp_temperatures(store: &mut ParamStore) {
    let names: Vec<String> = store.names().filter(|n| n.ends_with(TEMPERATURE_SUFFIX)).cloned().collect();
    for n in names {
        if let Some(t) = store.get_mut(&n) {
            t.mapv_inplace(|v| v.max(MIN_TEMPERATURE));
        }
    }
}

/// Multi-head scaled dot-product self-attention over `(N, L, D)` tokens.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub dim: usize,
    pub heads: usize,
    qkv: Linear,
    proj: Linear,
}

impl SelfAttention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "{name}: dim must divide into heads");
        SelfAttention {
            dim,
            heads,
            qkv: Linear::new(format!("{name}/qkv"), dim, 3 * dim),
            proj: Linear::new(format!("{name}/proj"), dim, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.qkv.init(store, rng);
        self.proj.init(store, rng);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let (n, l) = (ctx.g.shape(x)[0], ctx.g.shape(x)[1]);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let qkv = self.qkv.forward(ctx, x);
        let qkv = ctx.g.reshape(qkv, &[n, l, 3, h, dh]);
        let qkv = ctx.g.permute(qkv, &[2, 0, 3, 1, 4]);
        let qkv = ctx.g.reshape(qkv, &[3, n * h, l, dh]);
        let mut part = |i| {
            let p = ctx.g.slice(qkv, 0, i, 1);
            ctx.g.reshape(p, &[n * h, l, dh])
        };
        let (q, k, v) = (part(0), part(1), part(2));
        let kt = ctx.g.transpose_last(k);
        let logits = ctx.g.bmm(q, kt);
        let logits = ctx.g.scale(logits, 1.0 / (dh as f64).sqrt());
        let attn = ctx.g.softmax(logits);
        let out = ctx.g.bmm(attn, v);
        let out = ctx.g.reshape(out, &[n, h, l, dh]);
        let out = ctx.g.permute(out, &[0, 2, 1, 3]);
        let out = ctx.g.reshape(out, &[n, l, self.dim]);
        self.proj.forward(ctx, out)
    }
}

/// Pre-norm transformer block: attention then a GELU MLP, both residual.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(format!("{name}/ln1"), dim),
            attn: SelfAttention::new(&format!("{name}/attn"), dim, heads),
            ln2: LayerNorm::new(format!("{name}/ln2"), dim),
            mlp: Mlp::new(&format!("{name}/mlp"), dim, mlp_ratio * dim, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.ln1.init(store);
        self.attn.init(store, rng);
        self.ln2.init(store);
        self.mlp.init(store, rng);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.ln1.forward(ctx, x);
        let h = self.attn.forward(ctx, h);
        let x = ctx.g.add(x, h);
        let h = self.ln2.forward(ctx, x);
        let h = self.mlp.forward(ctx, h);
        ctx.g.add(x, h)
    }
}

/// Split `(N, gh*gw, D)` row-major grid tokens into `(N * windows, win*win, D)`.
pub fn window_partition(ctx: &mut Ctx, x: Var, grid: (usize, usize), win: usize) -> Var {
    let (n, d) = (ctx.g.shape(x)[0], ctx.g.shape(x)[2]);
    let (gh, gw) = grid;
    assert!(gh % win == 0 && gw % win == 0, "grid {grid:?} not divisible by window {win}");
    let x = ctx.g.reshape(x, &[n, gh / win, win, gw / win, win, d]);
    let x = ctx.g.permute(x, &[0, 1, 3, 2, 4, 5]);
    ctx.g.reshape(x, &[n * (gh / win) * (gw / win), win * win, d])
}

/// Inverse of [`window_partition`].
pub fn window_merge(ctx: &mut Ctx, x: Var, n: usize, grid: (usize, usize), win: usize) -> Var {
    let d = ctx.g.shape(x)[2];
    let (gh, gw) = grid;
    let x = ctx.g.reshape(x, &[n, gh / win, gw / win, win, win, d]);
    let x = ctx.g.permute(x, &[0, 1, 3, 2, 4, 5]);
    ctx.g.reshape(x, &[n, gh * gw, d])
}

/// Transformer block whose attention is restricted to non-overlapping windows.
#[derive(Clone, Debug)]
pub struct WindowBlock {
    block: TransformerBlock,
    grid: (usize, usize),
    win: usize,
}

impl WindowBlock {
    pub fn new(name: &str, dim: usize, heads: usize, grid: (usize, usize), win: usize) -> Self {
        WindowBlock {
            block: TransformerBlock::new(name, dim, heads, 2),
            grid,
            win: win.min(grid.0).min(grid.1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.block.init(store, rng);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let n = ctx.g.shape(x)[0];
        let w = window_partition(ctx, x, self.grid, self.win);
        let w = self.block.forward(ctx, w);
        window_merge(ctx, w, n, self.grid, self.win)
    }
}

/// Channel attention over `(N, C, L)` inputs split into `heads` groups of
/// channels. Per head, `A = softmax_rows(K Q^T / alpha)` is a channel-by-channel
/// matrix and output channel `c` is `sum_j A[c, j] V_j`. `alpha` has shape
/// `(heads,)`. Returns the output `(N, C, L)` and `A` as `(N, heads, dh, dh)`.
pub fn channel_attention(ctx: &mut Ctx, q: Var, k: Var, v: Var, alpha: Var, heads: usize) -> (Var, Var) {
    let shape = ctx.g.shape(q).to_vec();
    let (n, c, l) = (shape[0], shape[1], shape[2]);
    assert_eq!(c % heads, 0, "channels must divide into heads");
    let dh = c / heads;
    let mut split = |t| ctx.g.reshape(t, &[n * heads, dh, l]);
    let (q, k, v) = (split(q), split(k), split(v));
    let qt = ctx.g.transpose_last(q);
    let logits = ctx.g.bmm(k, qt);
    let logits = ctx.g.reshape(logits, &[n, heads, dh, dh]);
    let a = ctx.g.reshape(alpha, &[1, heads, 1, 1]);
    let logits = ctx.g.div(logits, a);
    let attn = ctx.g.softmax(logits);
    let a_flat = ctx.g.reshape(attn, &[n * heads, dh, dh]);
    let out = ctx.g.bmm(a_flat, v);
    (ctx.g.reshape(out, &[n, c, l]), attn)
}

fn temperature_init(heads: usize, tokens: usize) -> Tensor {
    Tensor::from_elem(IxDyn(&[heads]), (tokens as f64).sqrt())
}

/// Transposed attention block on `(N, L, D)` tokens: projected channel
/// attention added back to its input.
#[derive(Clone, Debug)]
pub struct Tab {
    name: String,
    pub heads: usize,
    tokens: usize,
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
}

impl Tab {
    pub fn new(name: &str, dim: usize, heads: usize, tokens: usize) -> Self {
        Tab {
            name: name.to_string(),
            heads,
            tokens,
            norm: LayerNorm::new(format!("{name}/norm"), dim),
            q: Linear::new(format!("{name}/q"), dim, dim),
            k: Linear::new(format!("{name}/k"), dim, dim),
            v: Linear::new(format!("{name}/v"), dim, dim),
            proj: Linear::new(format!("{name}/proj"), dim, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.norm.init(store);
        self.q.init(store, rng);
        self.k.init(store, rng);
        self.v.init(store, rng);
        self.proj.init(store, rng);
        store.insert(format!("{}{TEMPERATURE_SUFFIX}", self.name), temperature_init(self.heads, self.tokens), true);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.norm.forward(ctx, x);
        let mut to_channels = |lin: &Linear| {
            let t = lin.forward(ctx, h);
            ctx.g.permute(t, &[0, 2, 1])
        };
        let (q, k, v) = (to_channels(&self.q), to_channels(&self.k), to_channels(&self.v));
        let alpha = ctx.p(&format!("{}{TEMPERATURE_SUFFIX}", self.name));
        let (out, _) = channel_attention(ctx, q, k, v, alpha, self.heads);
        let out = ctx.g.permute(out, &[0, 2, 1]);
        let out = self.proj.forward(ctx, out);
        ctx.g.add(x, out)
    }
}

/// Residual transposed attention: parameter-free channel attention on
/// externally supplied `Q`, `K`, `V` maps, added to `X`. All maps are
/// `(N, C, H, W)`; only the per-head temperature is learned.
#[derive(Clone, Debug)]
pub struct Rtab {
    name: String,
    pub heads: usize,
    tokens: usize,
}

impl Rtab {
    pub fn new(name: &str, heads: usize, tokens: usize) -> Self {
        Rtab {
            name: name.to_string(),
            heads,
            tokens,
        }
    }

    pub fn alpha_name(&self) -> String {
        format!("{}{TEMPERATURE_SUFFIX}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(self.alpha_name(), temperature_init(self.heads, self.tokens), true);
    }

    /// Returns `X + Attn(Q, K, V)` and the attention weights.
    pub fn forward(&self, ctx: &mut Ctx, q: Var, k: Var, v: Var, x: Var) -> (Var, Var) {
        let shape = ctx.g.shape(x).to_vec();
        let flat = [shape[0], shape[1], shape[2] * shape[3]];
        let mut f = |t| ctx.g.reshape(t, &flat);
        let (q, k, v) = (f(q), f(k), f(v));
        let alpha = ctx.p(&self.alpha_name());
        let (out, attn) = channel_attention(ctx, q, k, v, alpha, self.heads);
        let out = ctx.g.reshape(out, &shape);
        (ctx.g.add(x, out), attn)
    }
}
