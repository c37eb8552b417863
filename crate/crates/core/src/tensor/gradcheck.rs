use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference step used when callers have no better choice.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Location and values of the worst coordinate seen by a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences and returns the worst relative error,
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`, over every
/// coordinate of every parameter.
///
/// `f` is evaluated once on differentiable copies of `params` and then twice
/// per coordinate on constant, perturbed copies. The tensors passed in are
/// never mutated.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    Ok(finite_difference_report(f, params, eps)?.max_relative_error)
}

/// [`finite_difference_check`] with the offending coordinate attached.
pub fn finite_difference_report<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }

    let leaves: Vec<Tensor> = params.iter().map(|p| p.with_requires_grad(true)).collect();
    let loss = f(&leaves)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("function value {value} at the base point")));
    }
    loss.backward()?;

    let base: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut args = base.clone();
        let mut data = base[which].data().to_vec();
        data[coord] += delta;
        args[which] = Tensor::new(data, base[which].shape())?;
        let v = f(&args)?.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value {v} with parameter {which}[{coord}] perturbed by {delta}"
            )));
        }
        Ok(v)
    };

    let mut worst = GradCheckReport {
        max_relative_error: 0.0,
        param: 0,
        coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.len()]);
        for (coord, &a) in analytic.iter().enumerate() {
            let numeric = (eval(which, coord, eps)? - eval(which, coord, -eps)?) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst.max_relative_error || rel.is_nan() {
                worst = GradCheckReport {
                    max_relative_error: rel,
                    param: which,
                    coord,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}
