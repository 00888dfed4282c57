//! Parameter update rules: SGD with momentum (desk-scale default) and the
//! layer-wise trust-ratio scaling variant, plus the EMA target update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{GradSet, ParamSet};
use crate::nn::tensor::{Scalar, Tensor};

const LARS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKind {
    Sgd,
    Lars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Trust coefficient; only read by the LARS kind.
    pub trust_coeff: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptKind::Sgd,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            trust_coeff: 1e-3,
        }
    }
}

/// Per-parameter velocity buffers, created lazily on first update.
#[derive(Debug, Clone, Default)]
pub struct OptState<T = f32> {
    pub velocity: ParamSet<T>,
}

impl<T: Scalar> OptState<T> {
    pub fn new() -> Self {
        OptState {
            velocity: ParamSet::new(),
        }
    }
}

fn check_grad_finite<T: Scalar>(name: &str, grad: &Tensor<T>) -> Result<()> {
    grad.check_finite(&format!("gradient of {name}"))
        .map_err(|e| match e {
            Error::Numeric { reason, .. } => Error::numeric(format!("parameter {name}"), reason),
            other => other,
        })
}

/// v <- momentum*v + g + weight_decay*w; w <- w - lr*v
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &GradSet<T>,
    state: &mut OptState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let (lr, mom, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for (name, grad) in grads.iter() {
        check_grad_finite(name, grad)?;
        let w = params.get_mut(name)?;
        if w.shape() != grad.shape() {
            return Err(Error::Structure(format!(
                "gradient shape {:?} != parameter shape {:?} for {name}",
                grad.shape(),
                w.shape()
            )));
        }
        if !state.velocity.contains(name) {
            state.velocity.insert(name.clone(), Tensor::zeros(w.shape()));
        }
        let v = state.velocity.get_mut(name)?;
        for ((vi, wi), &gi) in v.data_mut().iter_mut().zip(w.data_mut()).zip(grad.data()) {
            *vi = mom * *vi + gi + wd * *wi;
            *wi = *wi - lr * *vi;
        }
    }
    Ok(())
}

/// Layer-wise trust-ratio scaling: per tensor,
/// `local_lr = trust_coeff * |w| / (|g + wd*w| + eps)` (1 when `|w| = 0`),
/// then the same momentum recurrence with `lr = base_lr * local_lr`.
#[allow(clippy::too_many_arguments)]
pub fn lars_scale_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &GradSet<T>,
    state: &mut OptState<T>,
    base_lr: f64,
    momentum: f64,
    weight_decay: f64,
    trust_coeff: f64,
) -> Result<()> {
    let mom = T::from_f64(momentum);
    let wd = T::from_f64(weight_decay);
    for (name, grad) in grads.iter() {
        check_grad_finite(name, grad)?;
        let w = params.get_mut(name)?;
        if w.shape() != grad.shape() {
            return Err(Error::Structure(format!(
                "gradient shape {:?} != parameter shape {:?} for {name}",
                grad.shape(),
                w.shape()
            )));
        }
        let w_norm = w.l2_norm().to_f64_lossy();
        let update_norm = {
            let mut acc = T::zero();
            for (&gi, &wi) in grad.data().iter().zip(w.data()) {
                let u = gi + wd * wi;
                acc += u * u;
            }
            acc.sqrt().to_f64_lossy()
        };
        let local_lr = if w_norm == 0.0 {
            1.0
        } else {
            trust_coeff * w_norm / (update_norm + LARS_EPS)
        };
        let lr = T::from_f64(base_lr * local_lr);
        if !state.velocity.contains(name) {
            state.velocity.insert(name.clone(), Tensor::zeros(w.shape()));
        }
        let v = state.velocity.get_mut(name)?;
        for ((vi, wi), &gi) in v.data_mut().iter_mut().zip(w.data_mut()).zip(grad.data()) {
            *vi = mom * *vi + gi + wd * *wi;
            *wi = *wi - lr * *vi;
        }
    }
    Ok(())
}

/// Applies the configured rule.
pub fn optimizer_step<T: Scalar>(
    cfg: &OptimizerConfig,
    params: &mut ParamSet<T>,
    grads: &GradSet<T>,
    state: &mut OptState<T>,
) -> Result<()> {
    match cfg.kind {
        OptKind::Sgd => sgd_momentum_step(params, grads, state, cfg.lr, cfg.momentum, cfg.weight_decay),
        OptKind::Lars => lars_scale_step(
            params,
            grads,
            state,
            cfg.lr,
            cfg.momentum,
            cfg.weight_decay,
            cfg.trust_coeff,
        ),
    }
}

/// target <- tau*target + (1-tau)*online per parameter; batch-norm running
/// statistics are copied from the online branch instead of averaged.
pub fn ema_update<T: Scalar>(
    online: &ParamSet<T>,
    target: &mut ParamSet<T>,
    tau: f64,
) -> Result<()> {
    let tau_t = T::from_f64(tau);
    let one_m = T::one() - tau_t;
    for (name, t) in target.iter_mut() {
        let o = online.get(name).map_err(|_| {
            Error::Structure(format!("online parameters missing target key {name}"))
        })?;
        if o.shape() != t.shape() {
            return Err(Error::Structure(format!(
                "shape mismatch for {name}: online {:?} vs target {:?}",
                o.shape(),
                t.shape()
            )));
        }
        if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            t.data_mut().copy_from_slice(o.data());
        } else {
            for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
                *tv = tau_t * *tv + one_m * ov;
            }
        }
    }
    Ok(())
}
