//! Central finite-difference checks of tape gradients with respect to named
//! parameters.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Compare the gradient of the scalar built by `loss` against central
/// differences with step `h`, on up to `per_param` evenly spaced entries of
/// each parameter in `params`.
pub fn check_params(
    store: &ParamStore,
    params: &[String],
    per_param: usize,
    h: f64,
    train: bool,
    loss: impl Fn(&mut Ctx) -> Result<Var>,
) -> Result<Vec<GradCheck>> {
    let analytic = {
        let mut ctx = Ctx::new(store, train);
        let l = loss(&mut ctx)?;
        let grads = ctx.g.backward(l);
        ctx.param_grads(&grads)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut ctx = Ctx::new(s, train);
        let l = loss(&mut ctx)?;
        Ok(ctx.g.scalar(l))
    };
    let mut work = store.clone();
    let mut out = Vec::new();
    for name in params {
        let len = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter `{name}`")))?
            .len();
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::invalid(format!("`{name}` received no gradient")))?;
        let take = per_param.min(len).max(1);
        for k in 0..take {
            let idx = k * len / take;
            let orig = *work.get(name).unwrap().iter().nth(idx).unwrap();
            let set = |w: &mut ParamStore, v: f64| {
                *w.get_mut(name).unwrap().iter_mut().nth(idx).unwrap() = v;
            };
            set(&mut work, orig + h);
            let plus = eval(&work)?;
            set(&mut work, orig - h);
            let minus = eval(&work)?;
            set(&mut work, orig);
            out.push(GradCheck {
                param: name.clone(),
                index: idx,
                analytic: *grad.iter().nth(idx).unwrap(),
                numeric: (plus - minus) / (2.0 * h),
            });
        }
    }
    Ok(out)
}

/// Largest relative error in `checks`.
pub fn max_relative_error(checks: &[GradCheck], floor: f64) -> f64 {
    checks.iter().map(|c| c.relative_error(floor)).fold(0.0, f64::max)
}
