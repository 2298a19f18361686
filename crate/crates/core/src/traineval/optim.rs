use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::transformer::ModelParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warm-up from 0 to `base_lr` over the first `warmup_fraction` of
/// training, then linear decay to 0 at `total_steps`. Fractional steps are
/// allowed so callers can evaluate at step midpoints.
pub fn lr_schedule(step: f64, total_steps: f64, base_lr: f64, warmup_fraction: f64) -> f64 {
    if total_steps <= 0.0 {
        return 0.0;
    }
    let step = step.clamp(0.0, total_steps);
    let warm = warmup_fraction * total_steps;
    if step < warm {
        base_lr * step / warm
    } else {
        base_lr * (total_steps - step) / (total_steps - warm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One Adam step with decoupled weight decay: parameters first shrink by
/// `1 - lr·weight_decay`, then move by `lr·m̂/(√v̂ + ε)`.
pub fn adam_update<T: Scalar>(
    params: &mut ModelParams<T>,
    grad: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let ids = params.ids();
    if grad.ids() != ids || state.m.ids() != ids {
        return Err(Error::Shape("parameter groups differ".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
    let (one, eps) = (T::one(), T::of(ADAM_EPS));
    let shrink = T::of(1.0 - lr * weight_decay);
    let lr_t = T::of(lr);
    let (c1, c2) = (T::of(c1), T::of(c2));
    for id in ids {
        let g = grad.get(id).expect("checked ids");
        let p = params.get_mut(id).expect("checked ids");
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("{id}: {:?} vs {:?}", g.shape(), p.shape())));
        }
        let m = state.m.get_mut(id).expect("checked ids").data_mut();
        let v = state.v.get_mut(id).expect("checked ids").data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p = *p * shrink - lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
