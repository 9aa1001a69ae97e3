//! Angle-specific extractor: channel gating with a residual reweighting,
//! followed by a linear feature adapter.
//!
//! ```text
//! d = sigmoid(Q relu(W a))
//! o = a + a * d
//! out = A o + c
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::ops::{self, linear, linear_backward, relu_slice, sigmoid_scalar, LayerGrads};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AseParams {
    /// `[L/r, L]` reduction matrix `W`.
    pub reduce: Tensor,
    /// `[L, L/r]` expansion matrix `Q`.
    pub expand: Tensor,
    /// `[L, L]` adapter weight.
    pub adapter_weight: Tensor,
    pub adapter_bias: Vec<f64>,
}

/// Whether the gate is evaluated or bypassed (`o = a`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Gating {
    #[default]
    Enabled,
    Bypassed,
}

impl AseParams {
    pub fn width(&self) -> usize {
        self.adapter_bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        AseParams {
            reduce: self.reduce.zeros_like(),
            expand: self.expand.zeros_like(),
            adapter_weight: self.adapter_weight.zeros_like(),
            adapter_bias: vec![0.0; self.adapter_bias.len()],
        }
    }
}

/// Uniform `±sqrt(6 / (fan_in + fan_out))` matrix.
pub(crate) fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(&[rows, cols], data).expect("positive extents")
}

pub fn ase_init<R: Rng>(width: usize, reduction: usize, rng: &mut R) -> Result<AseParams> {
    ensure!(
        width >= 1 && reduction >= 1 && width % reduction == 0,
        Config,
        "ASE width {width} is not divisible by reduction ratio {reduction}"
    );
    let hidden = width / reduction;
    Ok(AseParams {
        reduce: glorot(hidden, width, rng),
        expand: glorot(width, hidden, rng),
        adapter_weight: glorot(width, width, rng),
        adapter_bias: vec![0.0; width],
    })
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
struct AseTrace {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    gate: Vec<f64>,
    reweighted: Vec<f64>,
}

fn trace(a: &[f64], p: &AseParams, gating: Gating) -> Result<AseTrace> {
    ensure!(
        a.len() == p.width(),
        Contract,
        "ASE input has length {} but parameters expect {}",
        a.len(),
        p.width()
    );
    if gating == Gating::Bypassed {
        return Ok(AseTrace {
            hidden_pre: Vec::new(),
            hidden: Vec::new(),
            gate: Vec::new(),
            reweighted: a.to_vec(),
        });
    }
    let hidden_pre = linear(a, &p.reduce, None)?;
    let hidden = relu_slice(&hidden_pre);
    let gate_pre = linear(&hidden, &p.expand, None)?;
    let gate: Vec<f64> = gate_pre.iter().map(|&v| sigmoid_scalar(v)).collect();
    let reweighted = a.iter().zip(&gate).map(|(x, d)| x + x * d).collect();
    Ok(AseTrace {
        hidden_pre,
        hidden,
        gate,
        reweighted,
    })
}

pub fn ase_forward(a: &[f64], params: &AseParams) -> Result<Vec<f64>> {
    ase_forward_with(a, params, Gating::Enabled)
}

pub fn ase_forward_with(a: &[f64], params: &AseParams, gating: Gating) -> Result<Vec<f64>> {
    let t = trace(a, params, gating)?;
    linear(&t.reweighted, &params.adapter_weight, Some(&params.adapter_bias))
}

/// Gate values `d` for input `a`.
pub fn ase_gate(a: &[f64], params: &AseParams) -> Result<Vec<f64>> {
    Ok(trace(a, params, Gating::Enabled)?.gate)
}

/// Gradients named `"reduce"`, `"expand"`, `"adapter_weight"`,
/// `"adapter_bias"`, plus the input gradient.
pub fn ase_backward(a: &[f64], params: &AseParams, upstream: &[f64]) -> Result<LayerGrads> {
    ase_backward_with(a, params, Gating::Enabled, upstream)
}

pub fn ase_backward_with(
    a: &[f64],
    params: &AseParams,
    gating: Gating,
    upstream: &[f64],
) -> Result<LayerGrads> {
    let t = trace(a, params, gating)?;
    let mut adapter = linear_backward(&t.reweighted, &params.adapter_weight, true, upstream)?;
    let d_o = adapter.input.data().to_vec();
    let hidden = params.reduce.shape()[0];
    let (d_reduce, d_expand, d_a) = if gating == Gating::Bypassed {
        (
            Tensor::zeros(&[hidden, a.len()]),
            Tensor::zeros(&[a.len(), hidden]),
            d_o,
        )
    } else {
        // o = a (1 + d): do/da = 1 + d (direct), do/dd = a
        let mut d_a: Vec<f64> = d_o.iter().zip(&t.gate).map(|(g, d)| g * (1.0 + d)).collect();
        let d_gate_pre: Vec<f64> = d_o
            .iter()
            .zip(a)
            .zip(&t.gate)
            .map(|((g, x), d)| g * x * d * (1.0 - d))
            .collect();
        let mut expand = linear_backward(&t.hidden, &params.expand, false, &d_gate_pre)?;
        let d_hidden_pre: Vec<f64> = expand
            .input
            .data()
            .iter()
            .zip(&t.hidden_pre)
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        let mut reduce = linear_backward(a, &params.reduce, false, &d_hidden_pre)?;
        for (da, g) in d_a.iter_mut().zip(reduce.input.data()) {
            *da += g;
        }
        (
            ops::take_param(&mut reduce, "weight"),
            ops::take_param(&mut expand, "weight"),
            d_a,
        )
    };
    Ok(LayerGrads {
        params: vec![
            ("reduce", d_reduce),
            ("expand", d_expand),
            ("adapter_weight", ops::take_param(&mut adapter, "weight")),
            ("adapter_bias", ops::take_param(&mut adapter, "bias")),
        ],
        input: Tensor::from_vec(&[a.len()], d_a)?,
    })
}
