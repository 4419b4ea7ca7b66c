//! Multilayer perceptron: width specs, parameter stores, and forward passes.
//!
//! A network is described by an `MlpSpec` (layer widths plus activations)
//! and owns its tensors in a `ParamStore`. Forward passes run on a `Tape`
//! under a caller-chosen store id, so the same spec/store pair can be used
//! by several graphs and shared across views.

use rand::Rng;

use crate::diffnet::matrix::Matrix;
use crate::diffnet::tape::{NodeId, ParamKey, Slot, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Softmax,
    Softplus,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    /// Layer widths from input to output; at least two entries.
    pub widths: Vec<usize>,
    pub hidden: HiddenActivation,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, output: OutputActivation) -> Result<Self> {
        let spec = MlpSpec { widths, hidden: HiddenActivation::Relu, output };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "network needs at least 2 widths (input and output), got {:?}",
                self.widths
            )));
        }
        if let Some(pos) = self.widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("layer width at position {pos} is zero")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// in_dim x out_dim weight matrix.
    pub w: Matrix,
    /// 1 x out_dim bias row.
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub layers: Vec<Layer>,
}

impl ParamStore {
    /// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
    pub fn init(spec: &MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layer_count());
        for l in 0..spec.layer_count() {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Matrix::zeros(fan_in, fan_out);
            for v in w.as_mut_slice() {
                *v = rng.random_range(-bound..bound);
            }
            layers.push(Layer { w, b: Matrix::zeros(1, fan_out) });
        }
        Ok(ParamStore { layers })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.layer_count())
            .map(|l| Layer {
                w: Matrix::zeros(spec.widths[l], spec.widths[l + 1]),
                b: Matrix::zeros(1, spec.widths[l + 1]),
            })
            .collect();
        Ok(ParamStore { layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.rows() * l.w.cols() + l.b.cols())
            .sum()
    }

    /// Checks that tensor shapes agree with the spec.
    pub fn matches(&self, spec: &MlpSpec) -> bool {
        self.layers.len() == spec.layer_count()
            && self.layers.iter().enumerate().all(|(l, layer)| {
                layer.w.shape() == (spec.widths[l], spec.widths[l + 1])
                    && layer.b.shape() == (1, spec.widths[l + 1])
            })
    }
}

/// Records the network's forward pass on the tape and returns the output
/// node. `input` must be n x input_dim; shape problems name the layer.
pub fn forward(
    tape: &mut Tape,
    spec: &MlpSpec,
    store: u32,
    params: &ParamStore,
    input: NodeId,
) -> Result<NodeId> {
    if params.layers.len() != spec.layer_count() {
        return Err(Error::Shape(format!(
            "store {store}: {} parameter layers for a {}-layer spec",
            params.layers.len(),
            spec.layer_count()
        )));
    }
    if tape.value(input).cols() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "store {store} layer 0: input has {} cols, spec expects {}",
            tape.value(input).cols(),
            spec.input_dim()
        )));
    }
    let mut x = input;
    for (l, layer) in params.layers.iter().enumerate() {
        let expect = (spec.widths[l], spec.widths[l + 1]);
        if layer.w.shape() != expect || layer.b.shape() != (1, expect.1) {
            return Err(Error::Shape(format!(
                "store {store} layer {l}: weight {}x{} does not match spec {}x{}",
                layer.w.rows(),
                layer.w.cols(),
                expect.0,
                expect.1
            )));
        }
        let w = tape.param(ParamKey { store, layer: l as u32, slot: Slot::Weight }, &layer.w);
        let b = tape.param(ParamKey { store, layer: l as u32, slot: Slot::Bias }, &layer.b);
        let prod = tape.matmul(x, w)?;
        let pre = tape.add_bias(prod, b)?;
        let last = l + 1 == spec.layer_count();
        x = if last {
            match spec.output {
                OutputActivation::Identity => pre,
                OutputActivation::Softmax => tape.softmax(pre),
                OutputActivation::Softplus => tape.softplus(pre),
            }
        } else {
            match spec.hidden {
                HiddenActivation::Relu => tape.relu(pre),
            }
        };
    }
    Ok(x)
}

/// Value-only forward pass (no gradient bookkeeping kept by the caller).
/// Runs on a throwaway tape so the arithmetic is identical to `forward`.
pub fn forward_value(spec: &MlpSpec, params: &ParamStore, input: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let out = forward(&mut tape, spec, 0, params, x)?;
    Ok(tape.value(out).clone())
}
