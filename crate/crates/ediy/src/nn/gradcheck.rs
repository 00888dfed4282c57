//! Central finite-difference verification for analytic gradients.
//!
//! Lives in the library so both unit and acceptance tests can drive the
//! 64-bit verification mode. The numeric side only ever calls the loss
//! closure, so it stays independent of the backward implementation it checks.

use crate::error::Result;
use crate::nn::params::{GradSet, ParamSet};
use crate::nn::tensor::Tensor;

/// Central differences `(f(w+eps) - f(w-eps)) / (2 eps)` for every entry of
/// every parameter.
pub fn finite_difference_grads<F>(
    params: &ParamSet<f64>,
    eps: f64,
    mut eval: F,
) -> Result<GradSet<f64>>
where
    F: FnMut(&ParamSet<f64>) -> Result<f64>,
{
    let mut numeric = GradSet::new();
    for (name, tensor) in params.iter() {
        let mut grad = Tensor::zeros(tensor.shape());
        for i in 0..tensor.len() {
            let mut plus = params.clone();
            plus.get_mut(name)?.data_mut()[i] += eps;
            let f_plus = eval(&plus)?;
            let mut minus = params.clone();
            minus.get_mut(name)?.data_mut()[i] -= eps;
            let f_minus = eval(&minus)?;
            grad.data_mut()[i] = (f_plus - f_minus) / (2.0 * eps);
        }
        numeric.insert(name.clone(), grad);
    }
    Ok(numeric)
}

/// Worst relative error between two gradient sets, using
/// `|a - n| / max(|a|, |n|, 1e-6)` per entry.
pub fn max_rel_error(analytic: &GradSet<f64>, numeric: &GradSet<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, a) in analytic.iter() {
        let n = numeric
            .get(name)
            .unwrap_or_else(|_| panic!("numeric grads missing {name}"));
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let denom = av.abs().max(nv.abs()).max(1e-6);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_differences_recover_quadratic_gradient() {
        // f(w) = sum(w^2) has gradient 2w.
        let mut p: ParamSet<f64> = ParamSet::new();
        p.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let numeric = finite_difference_grads(&p, 1e-5, |q| {
            Ok(q.get("w").unwrap().data().iter().map(|v| v * v).sum())
        })
        .unwrap();
        let mut analytic = GradSet::new();
        analytic.insert("w", Tensor::new(vec![3], vec![2.0, -4.0, 1.0]).unwrap());
        assert!(max_rel_error(&analytic, &numeric) < 1e-8);
    }
}
