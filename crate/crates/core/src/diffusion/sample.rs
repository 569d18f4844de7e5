//! Reverse-process sampling: single steps and the full restoration loop that
//! keeps two intermediate noisy images alongside the final estimate.

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::{from_model_range, to_model_range, Denoiser};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::image::{from_nchw, to_nchw, Image};
use crate::seed::{self, stream};

/// Internal clamp applied to everything a restoration reports.
pub const REPORT_RANGE: (f64, f64) = (-1.5, 1.5);

/// Outputs of one restoration run on the `[0, 1]` image scale. Raw sampler
/// output may leave that range slightly; the pipeline clamps and quantizes it.
#[derive(Clone, Debug, PartialEq)]
pub struct RestorationTriple {
    pub y0: Image,
    pub y_t1: Image,
    pub y_t2: Image,
    pub t1: usize,
    pub t2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshots {
    pub t1: usize,
    pub t2: usize,
}

impl Snapshots {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(1 < self.t1 && self.t1 < self.t2 && self.t2 < steps) {
            return Err(Error::invalid(format!(
                "snapshot steps must satisfy 1 < t1 < t2 < T, got t1={} t2={} T={steps}",
                self.t1, self.t2
            )));
        }
        Ok(())
    }
}

/// One ancestral step from `y_t` to `y_{t-1}` for the 1-based step `t`:
/// `(y_t - (1 - a_t) / sqrt(1 - abar_t) * eps) / sqrt(a_t) + sqrt(1 - a_t) * z`.
pub fn reverse_step(
    y_t: &Tensor,
    x_dis: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    z: &Tensor,
) -> Result<Tensor> {
    if t < 1 || t > sched.steps {
        return Err(Error::invalid(format!("reverse step {t} outside 1..={}", sched.steps)));
    }
    if z.shape() != y_t.shape() {
        return Err(Error::ShapeMismatch {
            expected: y_t.shape().to_vec(),
            actual: z.shape().to_vec(),
        });
    }
    if t == 1 && z.iter().any(|v| *v != 0.0) {
        return Err(Error::invalid("the final reverse step (t = 1) must use z = 0"));
    }
    let i = t - 1;
    let eps = denoiser.predict_eps(y_t, x_dis, &vec![i; y_t.shape()[0]])?;
    let (a, ab) = (sched.alpha[i], sched.alpha_bar[i]);
    let mut out = y_t.clone();
    out.scaled_add(-(1.0 - a) / (1.0 - ab).sqrt(), &eps);
    out /= a.sqrt();
    out.scaled_add((1.0 - a).sqrt(), z);
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::non_finite(format!("reverse step t={t}")));
    }
    Ok(out)
}

/// Wraps a denoiser so that its implied `x0` estimate is clamped to the model
/// range `[-1, 1]`; the returned noise is the one consistent with the clamped
/// estimate. Feeding it to [`reverse_step`] gives the usual clipped ancestral
/// sampler.
pub struct ClampedX0<'a> {
    pub inner: &'a dyn Denoiser,
    pub sched: &'a NoiseSchedule,
}

impl Denoiser for ClampedX0<'_> {
    fn predict_eps(&self, y_t: &Tensor, cond: &Tensor, steps: &[usize]) -> Result<Tensor> {
        let mut eps = self.inner.predict_eps(y_t, cond, steps)?;
        let per_item: usize = y_t.shape()[1..].iter().product();
        let ys = y_t.as_standard_layout();
        let (ys, es) = (ys.as_slice().unwrap(), eps.as_slice_mut().unwrap());
        for (n, &i) in steps.iter().enumerate() {
            let ab = self.sched.alpha_bar[i];
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            for k in n * per_item..(n + 1) * per_item {
                let x0 = ((ys[k] - sb * es[k]) / sa).clamp(-1.0, 1.0);
                es[k] = (ys[k] - sa * x0) / sb;
            }
        }
        Ok(eps)
    }
}

/// Run the full reverse chain from pure noise, conditioned on `x_dis` only.
pub fn restore(
    x_dis: &Image,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    snaps: Snapshots,
    seed: u64,
) -> Result<RestorationTriple> {
    Ok(restore_batch(&[x_dis], denoiser, sched, snaps, &[seed])?.remove(0))
}

/// Restore several images at once; image `i` draws all of its noise from
/// `seeds[i]`, so results do not depend on how images are batched.
pub fn restore_batch(
    x_dis: &[&Image],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    snaps: Snapshots,
    seeds: &[u64],
) -> Result<Vec<RestorationTriple>> {
    snaps.validate(sched.steps)?;
    if x_dis.len() != seeds.len() {
        return Err(Error::invalid("one seed per image is required"));
    }
    if x_dis.is_empty() {
        return Ok(Vec::new());
    }
    let cond = to_nchw(x_dis, to_model_range);
    let per_item: usize = cond.shape()[1..].iter().product();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|s| seed::rng(*s, &[stream::RESTORE])).collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Tensor {
        let mut data = Vec::with_capacity(per_item * rngs.len());
        for r in rngs.iter_mut() {
            data.extend((0..per_item).map(|_| {
                let v: f64 = StandardNormal.sample(r);
                v
            }));
        }
        Tensor::from_shape_vec(IxDyn(cond.shape()), data).unwrap()
    };

    let mut y = draw(&mut rngs);
    let mut snap_t1 = None;
    let mut snap_t2 = None;
    for t in (1..=sched.steps).rev() {
        if t == snaps.t2 {
            snap_t2 = Some(y.clone());
        }
        if t == snaps.t1 {
            snap_t1 = Some(y.clone());
        }
        let z = if t > 1 {
            draw(&mut rngs)
        } else {
            Tensor::zeros(y.raw_dim())
        };
        y = reverse_step(&y, &cond, t, sched, denoiser, &z)?;
    }
    let report = |t: &Tensor| from_nchw(&t.mapv(|v| v.clamp(REPORT_RANGE.0, REPORT_RANGE.1)), from_model_range);
    let y0 = report(&y);
    let y1 = report(&snap_t1.expect("t1 visited"));
    let y2 = report(&snap_t2.expect("t2 visited"));
    Ok(y0
        .into_iter()
        .zip(y1)
        .zip(y2)
        .map(|((y0, y_t1), y_t2)| RestorationTriple {
            y0,
            y_t1,
            y_t2,
            t1: snaps.t1,
            t2: snaps.t2,
        })
        .collect())
}
