//! A small dense-tensor core with hand-written reverse-mode gradients.
//!
//! Every activation flowing between layers is a `[batch, time, channels]`
//! tensor. Each [`Layer`] caches what it needs during [`Layer::forward`] and
//! consumes that cache in [`Layer::backward`], accumulating parameter
//! gradients into [`Param::grad`]. [`gradcheck`] verifies every backward
//! pass against central finite differences.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;

use ndarray::{Array3, ArrayD};

pub use layers::{
    BatchNorm, DepthwiseConv, Dropout, Linear, MeanPool, MultiHeadSelfAttention,
    PositionalEmbedding, Relu, Sequential,
};
pub use loss::{softmax_cross_entropy, softmax_rows};
pub use optim::{Adam, SgdMomentum};

/// Activations are `[batch, time, channels]`.
pub type Tensor3 = Array3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {layer}: {detail}")]
    Shape { layer: String, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}: backward called without a cached forward pass")]
    NoCache(String),
    #[error("batch norm {0}: training mode needs at least two values per channel")]
    BatchTooSmall(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
}

impl NnError {
    pub(crate) fn shape(layer: &str, detail: impl Into<String>) -> Self {
        NnError::Shape {
            layer: layer.to_owned(),
            detail: detail.into(),
        }
    }
}

/// A named tensor with its gradient accumulator. Running statistics are
/// stored as non-trainable params so they travel with checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        Param {
            trainable: false,
            ..Param::new(name, value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub trait Layer: Send + Sync {
    /// Forward pass that caches intermediates for [`Layer::backward`].
    fn forward(&mut self, x: &Tensor3, mode: Mode) -> Result<Tensor3, NnError>;

    /// Consumes the cached forward pass, accumulates parameter gradients and
    /// returns the gradient with respect to the layer input.
    fn backward(&mut self, grad_out: &Tensor3) -> Result<Tensor3, NnError>;

    /// Eval-mode forward without caching.
    fn infer(&self, x: &Tensor3) -> Result<Tensor3, NnError>;

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    /// Re-seeds any stochastic state (dropout masks).
    fn reseed(&mut self, _seed: u64) {}

    fn clone_box(&self) -> Box<dyn Layer>;
}

impl Clone for Box<dyn Layer> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

pub fn zero_grads(layer: &mut dyn Layer) {
    for p in layer.params_mut() {
        p.zero_grad();
    }
}
