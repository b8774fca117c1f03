//! The controller ("puppeteer") that generates every kernel of the executed
//! network. A single state tensor of shape (C_max, C_in_max + 1, K_max^2)
//! evolves under Euler steps of a learned derivative function; each executed
//! layer's weights and bias are pooled out of the state after one step. The
//! derivative function's parameters are the only stored, trainable values.

use rand::Rng;

use crate::complexity::{adapt, AdaptationParams};
use crate::error::{Error, Result};
use crate::puppet::{plan_layers, PlannedNetwork, PuppetTemplate};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Geometry of one layer to generate or store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub role: LayerRole,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRole {
    Conv,
    Head,
}

/// Weights and bias produced for one [`LayerSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Extents of the evolving state, fixed by the template maxima.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateDims {
    pub c_out_max: usize,
    pub c_in_max: usize,
    pub k_max: usize,
}

impl StateDims {
    pub fn of(template: &PuppetTemplate) -> Self {
        StateDims {
            c_out_max: template.c_out_max(),
            c_in_max: template.c_out_max().max(template.in_channels),
            k_max: template.kernel,
        }
    }

    /// State shape: one extra input-channel row carries bias material.
    pub fn state_shape(&self) -> [usize; 3] {
        [self.c_out_max, self.c_in_max + 1, self.k_max * self.k_max]
    }
}

/// Trainable parameters of the derivative function: a depthwise 3x3
/// convolution over the state's channel planes, a pointwise 1x1 mix with
/// bias, and a per-channel normalization affine, squashed by tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeNet {
    pub depthwise: Tensor,
    pub pointwise: Tensor,
    pub bias: Tensor,
    pub norm_scale: Tensor,
    pub norm_shift: Tensor,
}

/// Tape handles for one staging of a [`DerivativeNet`].
#[derive(Clone, Copy, Debug)]
pub struct NetVars {
    pub depthwise: VarId,
    pub pointwise: VarId,
    pub bias: VarId,
    pub norm_scale: VarId,
    pub norm_shift: VarId,
}

impl DerivativeNet {
    /// Random initialization scaled to the fan-in of each piece.
    pub fn init(c_max: usize, rng: &mut impl Rng) -> Result<Self> {
        if c_max == 0 {
            return Err(Error::contract("channel maximum must be positive"));
        }
        Ok(DerivativeNet {
            depthwise: Tensor::randn(&[c_max, 1, 3, 3], 1.0 / 3.0, rng),
            pointwise: Tensor::randn(&[c_max, c_max, 1, 1], 1.0 / (c_max as f64).sqrt(), rng),
            bias: Tensor::zeros(&[c_max]),
            norm_scale: Tensor::filled(&[c_max], 1.0),
            norm_shift: Tensor::zeros(&[c_max]),
        })
    }

    pub fn c_max(&self) -> usize {
        self.depthwise.shape()[0]
    }

    /// Total trainable scalars; equals c^2 + 12c for channel maximum c.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameters in canonical (name, tensor) order.
    pub fn params(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("net/depthwise", &self.depthwise),
            ("net/pointwise", &self.pointwise),
            ("net/bias", &self.bias),
            ("net/norm_scale", &self.norm_scale),
            ("net/norm_shift", &self.norm_shift),
        ]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 5] {
        [
            ("net/depthwise", &mut self.depthwise),
            ("net/pointwise", &mut self.pointwise),
            ("net/bias", &mut self.bias),
            ("net/norm_scale", &mut self.norm_scale),
            ("net/norm_shift", &mut self.norm_shift),
        ]
    }

    /// Record the parameters as tape leaves, in canonical order.
    pub fn stage(&self, tape: &mut Tape) -> NetVars {
        NetVars {
            depthwise: tape.leaf(self.depthwise.clone()),
            pointwise: tape.leaf(self.pointwise.clone()),
            bias: tape.leaf(self.bias.clone()),
            norm_scale: tape.leaf(self.norm_scale.clone()),
            norm_shift: tape.leaf(self.norm_shift.clone()),
        }
    }
}

impl NetVars {
    pub fn ids(&self) -> [VarId; 5] {
        [
            self.depthwise,
            self.pointwise,
            self.bias,
            self.norm_scale,
            self.norm_shift,
        ]
    }
}

/// Initial state: every slot filled with the same seed value.
pub fn init_state(template: &PuppetTemplate, p0: f64) -> Tensor {
    Tensor::filled(&StateDims::of(template).state_shape(), p0)
}

/// Evaluate the derivative function on the state: depthwise 3x3 (padding 1)
/// -> pointwise 1x1 with bias -> per-channel normalization -> tanh.
/// Output has the state's shape and magnitude strictly below 1.
pub fn derivative(tape: &mut Tape, net: &NetVars, state: VarId) -> Result<VarId> {
    let shape = tape.value(state).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!(
            "state must be rank 3, got {shape:?}"
        )));
    }
    let (c, rows, cols) = (shape[0], shape[1], shape[2]);
    if tape.value(net.depthwise).shape()[0] != c {
        return Err(Error::dim(format!(
            "state has {c} channels but the derivative net was built for {}",
            tape.value(net.depthwise).shape()[0]
        )));
    }
    let x4 = tape.reshape(state, &[1, c, rows, cols])?;
    let dw = tape.depthwise_conv2d(x4, net.depthwise, 1)?;
    let pw = tape.conv2d(dw, net.pointwise, net.bias, 1, 0)?;
    let x3 = tape.reshape(pw, &[c, rows, cols])?;
    let normed = tape.instance_norm(x3, net.norm_scale, net.norm_shift, 1e-5)?;
    Ok(tape.tanh_act(normed))
}

/// One Euler step: state + derivative(state) * dl, with 0 < dl <= 1.
pub fn euler_step(tape: &mut Tape, net: &NetVars, state: VarId, dl: f64) -> Result<VarId> {
    if !(dl > 0.0 && dl <= 1.0) {
        return Err(Error::contract(format!(
            "integration step must lie in (0, 1], got {dl}"
        )));
    }
    let g = derivative(tape, net, state)?;
    let scaled = tape.scale(g, dl);
    tape.add(state, scaled)
}

/// Pool a layer's weights and bias out of the state. The weight comes from
/// the first c_in_max input-channel rows averaged down to
/// (c_out, c_in, k*k); the bias comes from the extra last row averaged down
/// to (c_out). Both paths stay differentiable.
pub fn extract_layer(
    tape: &mut Tape,
    state: VarId,
    spec: &LayerSpec,
    dims: &StateDims,
) -> Result<(VarId, VarId)> {
    if spec.c_out > dims.c_out_max || spec.c_in > dims.c_in_max || spec.k > dims.k_max {
        return Err(Error::dim(format!(
            "layer ({} <- {}, k={}) exceeds state extents ({}, {}, k={})",
            spec.c_out, spec.c_in, spec.k, dims.c_out_max, dims.c_in_max, dims.k_max
        )));
    }
    let body = tape.narrow(state, 1, 0, dims.c_in_max)?;
    let pooled = tape.adaptive_avg_pool(body, &[spec.c_out, spec.c_in, spec.k * spec.k])?;
    let weight = tape.reshape(pooled, &[spec.c_out, spec.c_in, spec.k, spec.k])?;

    let bias_row = tape.narrow(state, 1, dims.c_in_max, 1)?;
    let bias_flat = tape.reshape(bias_row, &[dims.c_out_max, dims.k_max * dims.k_max])?;
    let bias_pooled = tape.adaptive_avg_pool(bias_flat, &[spec.c_out, 1])?;
    let bias = tape.reshape(bias_pooled, &[spec.c_out])?;
    Ok((weight, bias))
}

/// A full set of generated layers recorded on a tape, plus the plan they
/// were generated for.
pub struct Generation {
    pub layers: Vec<(VarId, VarId)>,
    pub plan: PlannedNetwork,
    pub adaptation: AdaptationParams,
    pub final_state: VarId,
}

/// Generate kernels for every planned layer: one Euler step, then one
/// extraction, per layer (the head included).
pub fn generate_on_tape(
    tape: &mut Tape,
    net: &NetVars,
    template: &PuppetTemplate,
    adaptation: AdaptationParams,
) -> Result<Generation> {
    let dims = StateDims::of(template);
    let plan = plan_layers(template, adaptation.depth)?;
    let mut state = tape.leaf(Tensor::filled(&dims.state_shape(), adaptation.param_scale));
    let mut layers = Vec::with_capacity(plan.specs.len());
    for spec in &plan.specs {
        state = euler_step(tape, net, state, adaptation.depth_scale)?;
        layers.push(extract_layer(tape, state, spec, &dims)?);
    }
    Ok(Generation {
        layers,
        plan,
        adaptation,
        final_state: state,
    })
}

/// Convenience wrapper: score-driven generation on a private tape,
/// returning materialized layers.
pub fn generate_network(
    net: &DerivativeNet,
    template: &PuppetTemplate,
    h: f64,
) -> Result<(Vec<GeneratedLayer>, AdaptationParams)> {
    let adaptation = adapt(h)?;
    let mut tape = Tape::new();
    let vars = net.stage(&mut tape);
    let generation = generate_on_tape(&mut tape, &vars, template, adaptation)?;
    let layers = generation
        .layers
        .iter()
        .map(|(w, b)| GeneratedLayer {
            weight: tape.value(*w).clone(),
            bias: tape.value(*b).clone(),
        })
        .collect();
    Ok((layers, adaptation))
}
