//! SGD with classical momentum: v <- momentum*v + grad, theta <- theta - lr*v.
//! Velocity buffers exist only when momentum > 0 and are keyed by parameter
//! id, so one optimizer can serve interleaved update phases that step
//! different parameter subsets.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar> {
    lr: T,
    momentum: T,
    velocity: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<OptimizerState<T>> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidConfig {
                detail: format!("learning rate must be positive and finite, got {lr}"),
            });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig {
                detail: format!("momentum must be in [0,1), got {momentum}"),
            });
        }
        Ok(OptimizerState {
            lr: T::from_f64(lr),
            momentum: T::from_f64(momentum),
            velocity: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr.to_f64()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum.to_f64()
    }

    pub fn has_velocity(&self, id: ParamId) -> bool {
        self.velocity.contains_key(&id.0)
    }
}

/// One optimizer step over exactly `ids`. Every listed parameter must carry a
/// gradient. Afterwards ALL gradients in the store are cleared, including
/// those of parameters that were not stepped (a frozen layer's gradients
/// from the same backward pass must not leak into the next batch).
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    ids: &[ParamId],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    for &id in ids {
        if params.get(id)?.grad().is_none() {
            return Err(Error::MissingGradient {
                name: params.name(id)?.to_string(),
            });
        }
    }
    for &id in ids {
        let lr = state.lr;
        let momentum = state.momentum;
        if momentum > T::zero() {
            let n = params.get(id)?.len();
            let vel = state
                .velocity
                .entry(id.0)
                .or_insert_with(|| vec![T::zero(); n]);
            let t = params.get_mut(id)?;
            let g = t.grad().unwrap().to_vec();
            for ((ti, vi), gi) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(&g) {
                *vi = momentum * *vi + *gi;
                *ti -= lr * *vi;
            }
        } else {
            let t = params.get_mut(id)?;
            let g = t.grad().unwrap().to_vec();
            for (ti, gi) in t.data_mut().iter_mut().zip(&g) {
                *ti -= lr * *gi;
            }
        }
    }
    params.clear_grads();
    Ok(())
}
