use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

/// Per-step variances for `steps` diffusion steps. Index `i` holds the
/// values of step `t = i + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Cosine schedule: `alpha_bar(t) = f(t) / f(0)` with
/// `f(t) = cos^2(((t / T) + s) / (1 + s) * pi / 2)`, betas clipped at 0.999.
pub fn make_cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::invalid(format!("schedule needs at least 2 steps, got {steps}")));
    }
    let f = |t: f64| {
        let u = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let beta: Vec<f64> = (0..steps)
        .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(1e-8, MAX_BETA))
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    fn check_index(&self, t: usize) -> Result<()> {
        if t >= self.steps {
            return Err(Error::invalid(format!("schedule index {t} outside 0..{}", self.steps)));
        }
        Ok(())
    }

    /// Default snapshot steps `(floor(T/3), floor(2T/3))`.
    pub fn default_snapshots(&self) -> (usize, usize) {
        (self.steps / 3, 2 * self.steps / 3)
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_index(t)?;
    check_same_shape(x0, eps)?;
    let ab = sched.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x0 * a;
    out.scaled_add(b, eps);
    Ok(out)
}

/// Algebraic inverse of [`q_sample`].
pub fn predict_x0(x_t: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_index(t)?;
    check_same_shape(x_t, eps)?;
    let ab = sched.alpha_bar[t];
    if ab < 1e-8 {
        return Err(Error::invalid(format!(
            "alpha_bar[{t}] = {ab:e} is too small to invert"
        )));
    }
    let mut out = x_t.clone();
    out.scaled_add(-(1.0 - ab).sqrt(), eps);
    Ok(out / ab.sqrt())
}
