//! Fully-connected tanh networks mapping `(x, y)` to a scalar `u(x, y)`.
//!
//! Besides plain evaluation, every forward pass can carry the first input
//! derivatives and the *pure* second input derivatives `∂²u/∂x²`, `∂²u/∂y²`
//! through the layers. That is all the Laplacian needs, so mixed partials are
//! never formed. Parameter gradients of losses built on those quantities come
//! from a reverse sweep over the recorded forward pass (see [`tape`]).

pub mod checkpoint;
mod gradient;
mod math;
mod tape;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::distr::{Distribution, Uniform};
use rand::Rng;
use thiserror::Error;

pub use gradient::{evaluate_loss, loss_param_gradient, PreparedBatch};
pub(crate) use tape::Channels;

/// Number of network inputs (`x`, `y`).
pub const INPUT_DIM: usize = 2;
/// Number of network outputs (`u`).
pub const OUTPUT_DIM: usize = 1;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("layer width must be at least 1 (layer {layer} has width {width})")]
    ZeroWidth { layer: usize, width: usize },
    #[error("network must map {INPUT_DIM} inputs to {OUTPUT_DIM} output, got widths {0:?}")]
    BadEndpoints(Vec<usize>),
    #[error("network needs at least one hidden layer")]
    NoHiddenLayer,
    #[error("layer {layer}: {what} has shape {found:?}, expected {expected:?}")]
    Shape {
        layer: usize,
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("layer {layer}: non-finite parameter")]
    NonFiniteParameter { layer: usize },
    #[error("non-finite input point ({0}, {1})")]
    NonFiniteInput(f64, f64),
    #[error("activation `{0}` is piecewise linear; its second derivative vanishes almost everywhere")]
    PiecewiseLinear(String),
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error("hidden layer index {index} out of range 1..={depth}")]
    LayerIndex { index: usize, depth: usize },
    #[error("empty batch")]
    EmptyBatch,
}

/// Hidden-layer activation. The output layer is always the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, NetError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "relu" | "leaky_relu" | "leakyrelu" | "relu6" | "prelu" | "hard_tanh" | "hardtanh"
            | "linear" | "identity" => Err(NetError::PiecewiseLinear(s.to_string())),
            _ => Err(NetError::UnknownActivation(s.to_string())),
        }
    }
}

/// One affine layer, `z = W a + b` with `W` of shape `fan_out × fan_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weights: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }
}

/// The solution ansatz `u(x, y)`: `2 → h₁ → … → h_d → 1` with tanh hidden
/// layers and a linear readout.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
}

/// Value, input gradient and pure second input derivatives of `u` at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivativeBundle {
    pub value: f64,
    pub input_gradient: [f64; 2],
    pub input_pure_second: [f64; 2],
}

impl DerivativeBundle {
    pub fn laplacian(&self) -> f64 {
        self.input_pure_second[0] + self.input_pure_second[1]
    }
}

/// Gradient of a scalar with respect to every weight and bias of an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradient {
    pub layers: Vec<Dense>,
}

impl ParamGradient {
    pub fn zeros_like(net: &Mlp) -> Self {
        ParamGradient {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn is_congruent(&self, net: &Mlp) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.dim() == l.weights.dim() && g.bias.len() == l.bias.len())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    pub(crate) fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }
}

/// Validates a full width list `[2, h₁, …, h_d, 1]`.
pub fn validate_widths(widths: &[usize]) -> Result<(), NetError> {
    if let Some((layer, &width)) = widths.iter().enumerate().find(|(_, &w)| w == 0) {
        return Err(NetError::ZeroWidth { layer, width });
    }
    if widths.len() < 2 || widths[0] != INPUT_DIM || widths[widths.len() - 1] != OUTPUT_DIM {
        return Err(NetError::BadEndpoints(widths.to_vec()));
    }
    if widths.len() < 3 {
        return Err(NetError::NoHiddenLayer);
    }
    Ok(())
}

/// Full width list for `depth` hidden layers of equal `width`.
pub fn uniform_widths(width: usize, depth: usize) -> Vec<usize> {
    let mut widths = vec![INPUT_DIM];
    widths.extend(std::iter::repeat_n(width, depth));
    widths.push(OUTPUT_DIM);
    widths
}

/// Draws one Glorot-uniform layer: weights from `U[-L, L]` with
/// `L = sqrt(6 / (fan_in + fan_out))`, biases zero. Entries are drawn row-major.
pub fn glorot_layer<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Dense {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite Glorot bound");
    let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(rng));
    Dense {
        weights,
        bias: Array1::zeros(fan_out),
    }
}

impl Mlp {
    /// Glorot-uniform initialisation; deterministic for a given RNG state.
    pub fn glorot_init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self, NetError> {
        validate_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| glorot_layer(w[0], w[1], rng))
            .collect();
        Ok(Mlp {
            layers,
            activation: Activation::Tanh,
        })
    }

    /// All-zero network; `u ≡ 0`.
    pub fn zeros(widths: &[usize]) -> Result<Self, NetError> {
        validate_widths(widths)?;
        Ok(Mlp {
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            activation: Activation::Tanh,
        })
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self, NetError> {
        let mut widths = Vec::with_capacity(layers.len() + 1);
        if let Some(first) = layers.first() {
            widths.push(first.fan_in());
        }
        for (i, layer) in layers.iter().enumerate() {
            let expected_in = widths[i];
            if layer.fan_in() != expected_in {
                return Err(NetError::Shape {
                    layer: i + 1,
                    what: "weights",
                    expected: vec![layer.fan_out(), expected_in],
                    found: layer.weights.shape().to_vec(),
                });
            }
            if layer.bias.len() != layer.fan_out() {
                return Err(NetError::Shape {
                    layer: i + 1,
                    what: "bias",
                    expected: vec![layer.fan_out()],
                    found: vec![layer.bias.len()],
                });
            }
            if !(layer.weights.iter().all(|v| v.is_finite()) && layer.bias.iter().all(|v| v.is_finite()))
            {
                return Err(NetError::NonFiniteParameter { layer: i + 1 });
            }
            widths.push(layer.fan_out());
        }
        if widths.is_empty() {
            return Err(NetError::NoHiddenLayer);
        }
        validate_widths(&widths)?;
        Ok(Mlp { layers, activation })
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// `[2, h₁, …, h_d, 1]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in()];
        w.extend(self.layers.iter().map(Dense::fan_out));
        w
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Dense::fan_out)
            .collect()
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// Affine layers, hidden layers first and the readout last.
    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Replaces one layer, keeping the shape invariant.
    pub fn set_layer(&mut self, index: usize, layer: Dense) -> Result<(), NetError> {
        let old = &self.layers[index];
        if old.weights.dim() != layer.weights.dim() || old.bias.len() != layer.bias.len() {
            return Err(NetError::Shape {
                layer: index + 1,
                what: "weights",
                expected: old.weights.shape().to_vec(),
                found: layer.weights.shape().to_vec(),
            });
        }
        self.layers[index] = layer;
        Ok(())
    }

    /// Post-activation values of every hidden layer followed by the output,
    /// one row per point and one column per neuron.
    pub fn forward_activations(&self, points: &[[f64; 2]]) -> Result<Vec<Array2<f64>>, NetError> {
        check_points(points)?;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut current = Channels::values_of(points);
        for index in 0..self.layers.len() {
            current = tape::layer_forward(self, index, &current);
            outputs.push(current.val.t().to_owned());
        }
        Ok(outputs)
    }

    /// Activations of hidden layer `layer` (1-based), `points × neurons`.
    pub fn layer_activations(&self, layer: usize, points: &[[f64; 2]]) -> Result<Array2<f64>, NetError> {
        if layer == 0 || layer > self.depth() {
            return Err(NetError::LayerIndex {
                index: layer,
                depth: self.depth(),
            });
        }
        check_points(points)?;
        let mut current = Channels::values_of(points);
        for index in 0..layer {
            current = tape::layer_forward(self, index, &current);
        }
        Ok(current.val.t().to_owned())
    }

    /// `u` at each point.
    pub fn values(&self, points: &[[f64; 2]]) -> Result<Vec<f64>, NetError> {
        check_points(points)?;
        let out = self.forward_channels(Channels::values_of(points), 0);
        Ok(out.val.row(0).to_vec())
    }

    pub fn value(&self, point: [f64; 2]) -> Result<f64, NetError> {
        Ok(self.values(&[point])?[0])
    }

    pub fn forward_with_input_derivatives(&self, point: [f64; 2]) -> Result<DerivativeBundle, NetError> {
        Ok(self.derivatives(&[point])?[0])
    }

    /// Batched [`Mlp::forward_with_input_derivatives`].
    pub fn derivatives(&self, points: &[[f64; 2]]) -> Result<Vec<DerivativeBundle>, NetError> {
        check_points(points)?;
        let out = self.forward_channels(Channels::with_input_derivatives(points), 0);
        let d = out.deriv.as_ref().expect("derivative channels requested");
        Ok((0..points.len())
            .map(|j| DerivativeBundle {
                value: out.val[[0, j]],
                input_gradient: [d.grad[0][[0, j]], d.grad[1][[0, j]]],
                input_pure_second: [d.second[0][[0, j]], d.second[1][[0, j]]],
            })
            .collect())
    }

    /// Runs layers `from..` on already-propagated channels.
    pub(crate) fn forward_channels(&self, input: Channels, from: usize) -> Channels {
        let mut current = input;
        for index in from..self.layers.len() {
            current = tape::layer_forward(self, index, &current);
        }
        current
    }
}

fn check_points(points: &[[f64; 2]]) -> Result<(), NetError> {
    match points.iter().find(|p| !(p[0].is_finite() && p[1].is_finite())) {
        Some(p) => Err(NetError::NonFiniteInput(p[0], p[1])),
        None => Ok(()),
    }
}
