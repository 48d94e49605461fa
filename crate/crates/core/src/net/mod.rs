//! Feedforward classifier: sigmoid/linear hidden layers with a softmax output.
//!
//! Layers store row-major weights of shape `(out_dim, in_dim)`. All arithmetic
//! is `f64`.

mod data;
mod grad;
mod train;

pub use data::{LabeledFrameSet, TargetSet};
pub use grad::{
    backward, batch_gradient, cross_entropy, cross_entropy_with_diagnostics, CrossEntropy,
    Gradients, LayerGrads, ParamMask, LOG_FLOOR,
};
pub use train::{
    frame_error_rate, mean_cross_entropy, sgd_train, Objective, PenaltyScaling, Regularizer,
    TrainConfig, TrainOutcome,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::AdapterPlacement;
use crate::error::{Error, Result};
use crate::linalg::{affine_into, sigmoid, softmax_in_place, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Sigmoid,
    Softmax,
    Linear,
}

impl Activation {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Sigmoid => 0,
            Activation::Softmax => 1,
            Activation::Linear => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Sigmoid),
            1 => Some(Activation::Softmax),
            2 => Some(Activation::Linear),
            _ => None,
        }
    }
}

/// One dense layer: `y = activation(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    in_dim: usize,
    out_dim: usize,
    /// Row-major, shape `(out_dim, in_dim)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl LayerParams {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("layer dimensions must be positive"));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::Dimension {
                what: "layer weights",
                expected: in_dim * out_dim,
                got: weights.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::Dimension {
                what: "layer bias",
                expected: out_dim,
                got: bias.len(),
            });
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Glorot-uniform weights in `[-r, r]`, `r = sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let r = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-r..=r))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn weight_matrix(&self) -> Matrix {
        Matrix::from_vec(self.out_dim, self.in_dim, self.weights.clone())
            .expect("layer invariant: weights match dims")
    }

    /// Row-major weights followed by bias.
    pub fn flattened(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.param_count());
        w.extend_from_slice(&self.weights);
        w.extend_from_slice(&self.bias);
        w
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        affine_into(&self.weights, &self.bias, x, out);
        match self.activation {
            Activation::Sigmoid => out.iter_mut().for_each(|v| *v = sigmoid(*v)),
            Activation::Softmax => softmax_in_place(out),
            Activation::Linear => {}
        }
    }
}

/// Per-layer outputs from one forward pass. Index 0 holds the input frame.
#[derive(Debug, Clone)]
pub struct Activations {
    pub layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn posterior(&self) -> &[f64] {
        self.layers
            .last()
            .expect("activations always include the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    layers: Vec<LayerParams>,
    adapter: Option<AdapterPlacement>,
}

impl Network {
    /// Builds a network with Glorot-initialized weights.
    ///
    /// `hidden` lists the hidden layer widths (all sigmoid); the output layer
    /// is a softmax over `classes` units.
    pub fn new(input_dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &h in hidden {
            if h == 0 {
                return Err(Error::config("hidden widths must be positive"));
            }
            layers.push(LayerParams::glorot(prev, h, Activation::Sigmoid, &mut rng));
            prev = h;
        }
        if input_dim == 0 || classes == 0 {
            return Err(Error::config(
                "input and output dimensions must be positive",
            ));
        }
        layers.push(LayerParams::glorot(
            prev,
            classes,
            Activation::Softmax,
            &mut rng,
        ));
        Self::from_layers(input_dim, layers)
    }

    pub fn from_layers(input_dim: usize, layers: Vec<LayerParams>) -> Result<Self> {
        Self::with_adapter(input_dim, layers, None)
    }

    pub(crate) fn with_adapter(
        input_dim: usize,
        layers: Vec<LayerParams>,
        adapter: Option<AdapterPlacement>,
    ) -> Result<Self> {
        let net = Self {
            input_dim,
            layers,
            adapter,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        let Some(last) = self.layers.last() else {
            return Err(Error::config("network needs at least one layer"));
        };
        if last.activation != Activation::Softmax {
            return Err(Error::config("the last layer must be softmax"));
        }
        let mut prev = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_dim != prev {
                return Err(Error::Dimension {
                    what: "consecutive layer dimensions",
                    expected: prev,
                    got: layer.in_dim,
                });
            }
            if i + 1 < self.layers.len() && layer.activation == Activation::Softmax {
                return Err(Error::config("only the last layer may be softmax"));
            }
            prev = layer.out_dim;
        }
        if let Some(p) = self.adapter {
            if p.layer >= self.layers.len() || self.layers[p.layer].activation != Activation::Linear
            {
                return Err(Error::config(
                    "adapter placement does not name a linear layer",
                ));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.output_layer().out_dim
    }

    /// Number of layers, `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerParams {
        &self.layers[i]
    }

    /// Mutable access to parameter values. Shapes are fixed by construction.
    pub fn layer_mut(&mut self, i: usize) -> &mut LayerParams {
        &mut self.layers[i]
    }

    pub fn output_layer(&self) -> &LayerParams {
        self.layers.last().expect("network invariant: non-empty")
    }

    pub fn output_layer_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn adapter(&self) -> Option<AdapterPlacement> {
        self.adapter
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(LayerParams::is_finite)
    }

    pub(crate) fn into_parts(self) -> (usize, Vec<LayerParams>, Option<AdapterPlacement>) {
        (self.input_dim, self.layers, self.adapter)
    }

    /// Runs the network on one frame, keeping every layer's output.
    pub fn forward(&self, frame: &[f64]) -> Result<Activations> {
        if frame.len() != self.input_dim {
            return Err(Error::Dimension {
                what: "input frame",
                expected: self.input_dim,
                got: frame.len(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(frame.to_vec());
        self.forward_from(0, &mut acts);
        Ok(Activations { layers: acts })
    }

    /// Fills `acts[start + 1..]` given `acts[..=start]`. `acts` may hold
    /// stale buffers beyond `start`, which are reused.
    pub(crate) fn forward_from(&self, start: usize, acts: &mut Vec<Vec<f64>>) {
        acts.truncate(self.layers.len() + 1);
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            if acts.len() <= i + 1 {
                acts.push(vec![0.0; layer.out_dim]);
            }
            let (head, tail) = acts.split_at_mut(i + 1);
            let out = &mut tail[0];
            out.resize(layer.out_dim, 0.0);
            layer.apply(&head[i], out);
        }
    }

    /// Posterior vector for one frame.
    pub fn posterior(&self, frame: &[f64]) -> Result<Vec<f64>> {
        let mut acts = self.forward(frame)?;
        Ok(acts.layers.pop().expect("non-empty"))
    }

    /// Posteriors for every row of `frames`, shape `(T, J)`.
    pub fn posteriors(&self, frames: &Matrix) -> Result<Matrix> {
        if frames.cols() != self.input_dim {
            return Err(Error::Dimension {
                what: "input frames",
                expected: self.input_dim,
                got: frames.cols(),
            });
        }
        let j = self.class_count();
        let mut out = Matrix::zeros(frames.rows(), j);
        let mut acts: Vec<Vec<f64>> = Vec::new();
        for t in 0..frames.rows() {
            acts.clear();
            acts.push(frames.row(t).to_vec());
            self.forward_from(0, &mut acts);
            out.row_mut(t).copy_from_slice(&acts[self.layers.len()]);
        }
        Ok(out)
    }
}
