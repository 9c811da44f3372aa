//! Adam optimizer with the standard bias-corrected moment estimates
//! (β1 = 0.9, β2 = 0.999, ε = 1e-8).

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{Elem, Tensor};
use std::collections::BTreeMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First/second moment estimates per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T: Elem = f32> {
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    t: u64,
}

impl<T: Elem> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = |p: &ModelParams<T>| {
            p.iter()
                .map(|(id, t)| (id.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        AdamState {
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub(crate) fn moments(&self) -> (&BTreeMap<String, Tensor<T>>, &BTreeMap<String, Tensor<T>>) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(
        m: BTreeMap<String, Tensor<T>>,
        v: BTreeMap<String, Tensor<T>>,
        t: u64,
    ) -> Self {
        AdamState { m, v, t }
    }
}

/// One Adam update. The gradient map must cover exactly the parameter set.
pub fn adam_step<T: Elem>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    if lr <= T::zero() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    for id in params.ids() {
        if !grads.contains_key(id) {
            return Err(Error::GradientMismatch(format!(
                "missing gradient for parameter {id:?}"
            )));
        }
    }
    for id in grads.keys() {
        if params.get(id).is_none() {
            return Err(Error::GradientMismatch(format!(
                "gradient for unknown parameter {id:?}"
            )));
        }
    }

    state.t += 1;
    let beta1 = T::from_f64(ADAM_BETA1);
    let beta2 = T::from_f64(ADAM_BETA2);
    let eps = T::from_f64(ADAM_EPSILON);
    let bc1 = T::from_f64(1.0 - ADAM_BETA1.powi(state.t as i32));
    let bc2 = T::from_f64(1.0 - ADAM_BETA2.powi(state.t as i32));
    let one = T::one();

    for (id, w) in params.iter_mut() {
        let g = &grads[id];
        if g.shape() != w.shape() {
            return Err(Error::GradientMismatch(format!(
                "gradient shape {:?} for {id:?} does not match parameter {:?}",
                g.shape(),
                w.shape()
            )));
        }
        let m = state.m.get_mut(id).expect("state covers params");
        let v = state.v.get_mut(id).expect("state covers params");
        for i in 0..w.len() {
            let gi = g.data()[i];
            let mi = beta1 * m.data()[i] + (one - beta1) * gi;
            let vi = beta2 * v.data()[i] + (one - beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            w.data_mut()[i] = w.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
