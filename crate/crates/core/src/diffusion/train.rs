//! Denoiser training: noise the distorted image, condition on the reference,
//! regress the injected noise.

use ndarray::IxDyn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::{q_sample, NoiseSchedule};
use super::unet::UNet;
use super::{to_model_range, DenoiserModel};
use crate::autograd::{Tensor, Var};
use crate::corpus::ImageSample;
use crate::error::{Error, Result};
use crate::image::to_nchw;
use crate::nn::{apply_bn_stats, Ctx};
use crate::optim::Adam;
use crate::seed::{self, stream};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-3,
            batch: 8,
            steps: 600,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    /// Mean-squared noise error of every optimisation step.
    pub losses: Vec<f64>,
}

/// `mean((eps - eps_theta(sqrt(abar) x_dis + sqrt(1 - abar) eps, t, x_ref))^2)`
/// for a batch of `(N, C, H, W)` tensors in `[-1, 1]`.
pub fn denoising_loss(
    ctx: &mut Ctx,
    unet: &UNet,
    sched: &NoiseSchedule,
    x_dis: &Tensor,
    x_ref: &Tensor,
    steps: &[usize],
    eps: &Tensor,
) -> Result<Var> {
    let n = x_dis.shape()[0];
    if steps.len() != n || x_ref.shape() != x_dis.shape() || eps.shape() != x_dis.shape() {
        return Err(Error::invalid("denoising loss inputs disagree in shape"));
    }
    let mut x_t = Tensor::zeros(x_dis.raw_dim());
    for (i, &t) in steps.iter().enumerate() {
        let noised = q_sample(
            &x_dis.index_axis(ndarray::Axis(0), i).to_owned(),
            t,
            &eps.index_axis(ndarray::Axis(0), i).to_owned(),
            sched,
        )?;
        x_t.index_axis_mut(ndarray::Axis(0), i).assign(&noised);
    }
    let y = ctx.input(x_t);
    let c = ctx.input(x_ref.clone());
    let target = ctx.input(eps.clone());
    let pred = unet.forward(ctx, y, c, steps);
    let diff = ctx.g.sub(pred, target);
    let sq = ctx.g.square(diff);
    Ok(ctx.g.mean(sq))
}

/// Adam on [`denoising_loss`]. Batches follow a per-epoch shuffle derived from
/// `hp.seed`; step indices and noise come from a per-step stream.
pub fn train_denoiser(
    samples: &[ImageSample],
    sched: &NoiseSchedule,
    init: DenoiserModel,
    hp: &TrainHyper,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot train the denoiser on an empty corpus"));
    }
    if hp.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut model = init;
    let mut opt = Adam::new(hp.lr);
    let mut losses = Vec::with_capacity(hp.steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;

    for step in 0..hp.steps {
        let mut picked = Vec::with_capacity(hp.batch);
        while picked.len() < hp.batch.min(samples.len()) {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut seed::rng(hp.seed, &[stream::DIFFUSION_TRAIN, 0, epoch]));
                epoch += 1;
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let dis: Vec<_> = picked.iter().map(|&i| &samples[i].distorted).collect();
        let refs: Vec<_> = picked.iter().map(|&i| &samples[i].reference).collect();
        let x_dis = to_nchw(&dis, to_model_range);
        let x_ref = to_nchw(&refs, to_model_range);

        let mut rng = seed::rng(hp.seed, &[stream::DIFFUSION_TRAIN, 1, step as u64]);
        let t_idx: Vec<usize> = (0..picked.len()).map(|_| rng.random_range(0..sched.steps)).collect();
        let eps = Tensor::from_shape_simple_fn(IxDyn(x_dis.shape()), || StandardNormal.sample(&mut rng));

        let (grads, stats, loss) = {
            let mut ctx = Ctx::new(&model.store, true);
            let loss = denoising_loss(&mut ctx, &model.unet, sched, &x_dis, &x_ref, &t_idx, &eps)?;
            let value = ctx.g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::non_finite(format!("denoiser loss at step {step}: {value}")));
            }
            let g = ctx.g.backward(loss);
            (ctx.param_grads(&g), std::mem::take(&mut ctx.bn_stats), value)
        };
        opt.step(&mut model.store, &grads);
        apply_bn_stats(&mut model.store, &stats, BN_MOMENTUM);
        if !model.store.all_finite() {
            return Err(Error::non_finite(format!("denoiser weights after step {step}")));
        }
        losses.push(loss);
        log::debug!("diffusion step {step}: loss {loss:.5}");
    }
    Ok(TrainOutcome { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusSpec, DistortionKind};
    use crate::diffusion::{make_cosine_schedule, UNetConfig};

    fn toy(n_refs: usize) -> Vec<ImageSample> {
        generate(&CorpusSpec {
            n_references: n_refs,
            image_size: (8, 8),
            kinds: vec![DistortionKind::WhiteNoise],
            levels: vec![3],
            seed: 5,
            mos_jitter: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let sched = make_cosine_schedule(10).unwrap();
        let init = DenoiserModel::init(UNetConfig::default(), 1);
        let hp = TrainHyper {
            steps: 0,
            ..Default::default()
        };
        let out = train_denoiser(&toy(2), &sched, init.clone(), &hp).unwrap();
        assert!(out.losses.is_empty());
        assert_eq!(
            out.model.store.iter().map(|(k, p)| (k.clone(), p.value.clone())).collect::<Vec<_>>(),
            init.store.iter().map(|(k, p)| (k.clone(), p.value.clone())).collect::<Vec<_>>()
        );
    }

    #[test]
    fn training_is_deterministic() {
        let sched = make_cosine_schedule(10).unwrap();
        let hp = TrainHyper {
            lr: 1e-3,
            batch: 2,
            steps: 3,
            seed: 4,
        };
        let run = || {
            let init = DenoiserModel::init(UNetConfig::default(), 1);
            train_denoiser(&toy(3), &sched, init, &hp).unwrap().losses
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 3);
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn empty_corpus_and_divergence_are_errors() {
        let sched = make_cosine_schedule(10).unwrap();
        let init = DenoiserModel::init(UNetConfig::default(), 1);
        assert!(train_denoiser(&[], &sched, init.clone(), &TrainHyper::default()).is_err());
        let hp = TrainHyper {
            lr: f64::INFINITY,
            batch: 2,
            steps: 3,
            seed: 0,
        };
        assert!(matches!(
            train_denoiser(&toy(2), &sched, init, &hp),
            Err(Error::NonFinite { .. })
        ));
    }
}
