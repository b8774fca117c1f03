//! Bias-corrected Adam with per-parameter moment tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn init(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &[&Tensor]) -> Self {
        AdamState::init(
            &params
                .iter()
                .map(|p| p.shape().to_vec())
                .collect::<Vec<_>>(),
        )
    }
}

/// One elementwise update: moments decay toward the gradient and its
/// square, both bias-corrected by the advanced step counter.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.m.len()
        || params.len() != state.v.len()
    {
        return Err(Error::dim(format!(
            "{} parameters, {} gradients, {} moment pairs",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.numel() != grads[i].len() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(format!(
                "parameter {i}: {} values, gradient {}, moment shape {:?}",
                p.numel(),
                grads[i].len(),
                state.m[i].shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for k in 0..pd.len() {
            md[k] = hyper.beta1 * md[k] + (1.0 - hyper.beta1) * g[k];
            vd[k] = hyper.beta2 * vd[k] + (1.0 - hyper.beta2) * g[k] * g[k];
            let m_hat = md[k] / bc1;
            let v_hat = vd[k] / bc2;
            pd[k] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
