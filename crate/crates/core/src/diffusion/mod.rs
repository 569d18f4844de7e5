//! Conditional denoising diffusion used to restore distorted images.

pub mod sample;
pub mod schedule;
pub mod train;
pub mod unet;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use sample::{restore, restore_batch, reverse_step, ClampedX0, RestorationTriple, Snapshots};
pub use schedule::{make_cosine_schedule, predict_x0, q_sample, NoiseSchedule};
pub use train::{denoising_loss, train_denoiser, TrainHyper, TrainOutcome};
pub use unet::{UNet, UNetConfig};

use crate::autograd::Tensor;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::seed::{self, stream};

pub const CHECKPOINT_KIND: &str = "diffusion";

pub fn to_model_range(v: f64) -> f64 {
    2.0 * v - 1.0
}

pub fn from_model_range(v: f64) -> f64 {
    (v + 1.0) / 2.0
}

/// Anything that predicts the noise in `y_t` given a condition image and
/// 0-based schedule indices (one per batch item). Tensors are `(N, C, H, W)`
/// in `[-1, 1]`.
pub trait Denoiser {
    fn predict_eps(&self, y_t: &Tensor, cond: &Tensor, steps: &[usize]) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionInfo {
    pub unet: UNetConfig,
    pub steps: usize,
    pub seed: u64,
    pub train_steps: usize,
}

/// U-Net weights together with the architecture they belong to.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub unet: UNet,
    pub store: ParamStore,
}

impl DenoiserModel {
    pub fn init(config: UNetConfig, seed: u64) -> Self {
        let unet = UNet::new(config);
        let mut store = ParamStore::new();
        unet.init(&mut store, &mut seed::rng(seed, &[stream::DIFFUSION_INIT]));
        DenoiserModel { unet, store }
    }

    pub fn describe(&self) -> String {
        self.unet.describe(&self.store)
    }

    pub fn save(&self, dir: &Path, info: &DiffusionInfo) -> Result<()> {
        checkpoint::save(dir, CHECKPOINT_KIND, &self.store, serde_json::to_value(info)?)
    }

    pub fn load(dir: &Path) -> Result<(Self, DiffusionInfo)> {
        let (store, meta) = checkpoint::load(dir)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Config(format!(
                "{} holds a `{}` checkpoint, expected `{CHECKPOINT_KIND}`",
                dir.display(),
                meta.kind
            )));
        }
        let info: DiffusionInfo = serde_json::from_value(meta.info)?;
        let model = DenoiserModel {
            unet: UNet::new(info.unet.clone()),
            store,
        };
        Ok((model, info))
    }
}

impl Denoiser for DenoiserModel {
    fn predict_eps(&self, y_t: &Tensor, cond: &Tensor, steps: &[usize]) -> Result<Tensor> {
        if y_t.shape() != cond.shape() {
            return Err(Error::ShapeMismatch {
                expected: y_t.shape().to_vec(),
                actual: cond.shape().to_vec(),
            });
        }
        let mut ctx = Ctx::inference(&self.store);
        let y = ctx.input(y_t.clone());
        let c = ctx.input(cond.clone());
        let out = self.unet.forward(&mut ctx, y, c, steps);
        Ok(ctx.g.value(out).clone())
    }
}
