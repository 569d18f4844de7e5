//! Two-resolution conditional U-Net predicting the noise in `y_t` from the
//! channel concatenation `[y_t, condition]` and a sinusoidal step embedding.

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Linear, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub image_channels: usize,
    pub widths: (usize, usize),
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            image_channels: 3,
            widths: (16, 32),
            time_dim: 32,
        }
    }
}

/// Sinusoidal embedding of integer step indices, `(N, dim)`.
pub fn timestep_embedding(steps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_shape_fn(IxDyn(&[steps.len(), dim]), |d| {
        let (n, j) = (d[0], d[1]);
        let k = j % half;
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = steps[n] as f64 * freq;
        if j < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

#[derive(Clone, Debug)]
struct ResBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    temb: Linear,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, temb_dim: usize) -> Self {
        ResBlock {
            bn1: BatchNorm2d::new(format!("{name}/bn1"), cin),
            conv1: Conv2d::new(format!("{name}/conv1"), cin, cout, 3),
            temb: Linear::new(format!("{name}/temb"), temb_dim, cout),
            bn2: BatchNorm2d::new(format!("{name}/bn2"), cout),
            conv2: Conv2d::new(format!("{name}/conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| Conv2d::new(format!("{name}/skip"), cin, cout, 1)),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.bn1.init(store);
        self.conv1.init(store, rng);
        self.temb.init(store, rng);
        self.bn2.init(store);
        self.conv2.init_scaled(store, rng, 0.5);
        if let Some(s) = &self.skip {
            s.init(store, rng);
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var, emb: Var) -> Var {
        let h = self.bn1.forward(ctx, x);
        let h = ctx.g.silu(h);
        let h = self.conv1.forward(ctx, h);
        let e = ctx.g.silu(emb);
        let e = self.temb.forward(ctx, e);
        let n = ctx.g.shape(e)[0];
        let e = ctx.g.reshape(e, &[n, self.temb.dout, 1, 1]);
        let h = ctx.g.add(h, e);
        let h = self.bn2.forward(ctx, h);
        let h = ctx.g.silu(h);
        let h = self.conv2.forward(ctx, h);
        let skip = match &self.skip {
            Some(s) => s.forward(ctx, x),
            None => x,
        };
        ctx.g.add(h, skip)
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    down0: ResBlock,
    downsample: Conv2d,
    down1: ResBlock,
    mid: ResBlock,
    up0: ResBlock,
    bn_out: BatchNorm2d,
    conv_out: Conv2d,
}

pub const PREFIX: &str = "unet";

impl UNet {
    pub fn new(config: UNetConfig) -> Self {
        let (w0, w1) = config.widths;
        let c = config.image_channels;
        let td = config.time_dim;
        let hid = 2 * td;
        let n = |s: &str| format!("{PREFIX}/{s}");
        UNet {
            temb1: Linear::new(n("time/fc1"), td, hid),
            temb2: Linear::new(n("time/fc2"), hid, hid),
            conv_in: Conv2d::new(n("conv_in"), 2 * c, w0, 3),
            down0: ResBlock::new(&n("down0"), w0, w0, hid),
            downsample: Conv2d::new(n("downsample"), w0, w0, 3).stride(2),
            down1: ResBlock::new(&n("down1"), w0, w1, hid),
            mid: ResBlock::new(&n("mid"), w1, w1, hid),
            up0: ResBlock::new(&n("up0"), w1 + w0, w0, hid),
            bn_out: BatchNorm2d::new(n("out/bn"), w0),
            conv_out: Conv2d::new(n("out/conv"), w0, c, 3),
            config,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.temb1.init(store, rng);
        self.temb2.init(store, rng);
        self.conv_in.init(store, rng);
        self.down0.init(store, rng);
        self.downsample.init(store, rng);
        self.down1.init(store, rng);
        self.mid.init(store, rng);
        self.up0.init(store, rng);
        self.bn_out.init(store);
        self.conv_out.init_scaled(store, rng, 0.1);
    }

    /// `y_t`, `cond`: `(N, C, H, W)` with even `H`, `W`; `steps`: one index per item.
    pub fn forward(&self, ctx: &mut Ctx, y_t: Var, cond: Var, steps: &[usize]) -> Var {
        let emb = ctx.input(timestep_embedding(steps, self.config.time_dim));
        let emb = self.temb1.forward(ctx, emb);
        let emb = ctx.g.silu(emb);
        let emb = self.temb2.forward(ctx, emb);

        let x = ctx.g.concat(&[y_t, cond], 1);
        let h0 = self.conv_in.forward(ctx, x);
        let s0 = self.down0.forward(ctx, h0, emb);
        let h1 = self.downsample.forward(ctx, s0);
        let h1 = self.down1.forward(ctx, h1, emb);
        let h1 = self.mid.forward(ctx, h1, emb);
        let up = ctx.g.upsample2x(h1);
        let cat = ctx.g.concat(&[up, s0], 1);
        let h = self.up0.forward(ctx, cat, emb);
        let h = self.bn_out.forward(ctx, h);
        let h = ctx.g.silu(h);
        self.conv_out.forward(ctx, h)
    }

    /// One-line summary with the parameter count.
    pub fn describe(&self, store: &ParamStore) -> String {
        let sub = store.subset(PREFIX);
        format!(
            "conditional U-Net: widths {:?}, time embedding {}, input {} channels, output {} channels, {} trainable parameters ({} incl. running stats)",
            self.config.widths,
            self.config.time_dim,
            2 * self.config.image_channels,
            self.config.image_channels,
            sub.num_trainable(),
            sub.num_scalars()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn output_matches_image_shape() {
        let unet = UNet::new(UNetConfig::default());
        let mut store = ParamStore::new();
        unet.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut ctx = Ctx::new(&store, true);
        let y = ctx.input(Tensor::zeros(IxDyn(&[2, 3, 8, 12])));
        let c = ctx.input(Tensor::ones(IxDyn(&[2, 3, 8, 12])));
        let out = unet.forward(&mut ctx, y, c, &[0, 49]);
        assert_eq!(ctx.g.shape(out), &[2, 3, 8, 12]);
        assert!(unet.describe(&store).contains("trainable parameters"));
    }

    #[test]
    fn embedding_distinguishes_steps() {
        let e = timestep_embedding(&[0, 1, 49], 32);
        assert_eq!(e.shape(), &[3, 32]);
        assert_eq!(e[[0, 0]], 0.0);
        assert_eq!(e[[0, 16]], 1.0);
        assert_ne!(e.index_axis(ndarray::Axis(0), 1), e.index_axis(ndarray::Axis(0), 2));
    }
}
