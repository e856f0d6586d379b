//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Moment estimates aligned positionally with a fixed parameter order;
/// every [`adam_step`] call must present the same tensors in the same order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }
}

/// One optimizer step over all parameters.
///
/// `items` yields `(name, parameter, gradient)` in the canonical parameter
/// order. The step counter advances once per call. A non-finite gradient
/// aborts with a diagnostic naming the offending parameter, before any
/// tensor of that parameter is touched.
pub fn adam_step<'a, I>(state: &mut AdamState, lr: f64, items: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>,
{
    if lr <= 0.0 {
        return Err(Error::Contract(format!("adam_step: lr {lr} must be > 0")));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let mut slot = 0usize;
    for (name, param, grad) in items {
        if slot >= state.m.len() {
            return Err(Error::Contract(format!(
                "adam_step: more parameters than moment slots ({})",
                state.m.len()
            )));
        }
        if param.shape != grad.shape || state.m[slot].shape != param.shape {
            return Err(Error::Contract(format!(
                "adam_step: shape disagreement at '{name}': param {:?}, grad {:?}, moment {:?}",
                param.shape, grad.shape, state.m[slot].shape
            )));
        }
        grad.ensure_finite(&format!("gradient of '{name}'"))?;
        let m = &mut state.m[slot].data;
        let v = &mut state.v[slot].data;
        for i in 0..param.data.len() {
            let g = grad.data[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param.data[i] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
        slot += 1;
    }
    if slot != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} parameters presented, state holds {}",
            slot,
            state.m.len()
        )));
    }
    Ok(())
}
