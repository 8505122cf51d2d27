use crate::error::{Error, Result};
use crate::gradients::GradientSet;
use crate::model::ModelParams;
use crate::scalar::Scalar;

/// Bias-corrected Adam over the flat parameter view.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
        }
    }

    pub fn for_params(params: &ModelParams<T>, lr: f64) -> Self {
        Self::new(params.num_params(), lr)
    }
}

/// One Adam update of `params` in place. Nothing is modified when the
/// gradient contains a non-finite value.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &GradientSet<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    let mut flat = params.to_flat();
    adam_update(&mut flat, &grads.to_flat(), state)?;
    *params = params.with_flat(&flat)?;
    Ok(())
}

/// Adam on a raw parameter vector.
pub fn adam_update<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>) -> Result<()> {
    if grads.len() != state.m.len() || params.len() != grads.len() {
        return Err(crate::error::shape_err(
            "adam_update",
            state.m.len(),
            format!("{} params, {} grads", params.len(), grads.len()),
        ));
    }
    if let Some(i) = grads.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure {
            layer: "optimizer",
            detail: format!("non-finite gradient at flat index {i}"),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(state.beta1), T::c(state.beta2));
    let bc1 = T::one() - T::c(state.beta1.powi(t));
    let bc2 = T::one() - T::c(state.beta2.powi(t));
    let lr = T::c(state.lr);
    let eps = T::c(state.eps);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
