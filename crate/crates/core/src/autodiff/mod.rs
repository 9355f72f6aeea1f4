//! A small reverse-mode automatic differentiation engine with exactly the
//! layers the water-mask network needs: same-padded convolution, 2x2
//! average pooling, stride-2 transposed convolution, ReLU/sigmoid,
//! elementwise add, global sum pooling and a dense layer, plus the
//! reductions used by the correlation loss and its regularizers.
//!
//! Computation happens on a [`Tape`]: every op appends a node holding its
//! value, and [`Tape::backward`] walks the nodes in reverse. All arithmetic
//! is `f64`.

mod adam;
pub mod checkpoint;
pub(crate) mod kernels;
mod tape;

pub use adam::{adam_step, AdamState};
pub use tape::{conv_downsample, Gradients, PatchWindow, Tape, Var};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("{op}: expected shape {expected:?}, found {found:?}")]
    Shape { op: &'static str, expected: Vec<usize>, found: Vec<usize> },
    #[error("{op}: input has {found} channels, layer expects {expected}")]
    ChannelMismatch { op: &'static str, expected: usize, found: usize },
    #[error("avg_pool2: odd spatial size {height}x{width}")]
    OddSpatial { height: usize, width: usize },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("backward: loss must be a scalar, has shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("adam_step: parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// Dense row-major array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NnError::DataLength { len: data.len(), shape });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    /// Marks the tensor as trainable.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Weights `(out_ch, in_ch, k, k)`, odd `k`, same padding.
    Conv,
    /// Weights `(in_ch, out_ch, 4, 4)`, stride 2, output exactly twice the input.
    TransposedConv,
    /// Weights `(out, in)`.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Weights are projected onto `w >= 0` after every optimizer step.
    Nonnegative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weights: Tensor,
    pub bias: Tensor,
    pub constraint: Option<Constraint>,
}

impl LayerParams {
    pub fn new(kind: LayerKind, weights: Tensor, bias: Tensor, constraint: Option<Constraint>) -> Result<Self> {
        let ws = weights.shape().to_vec();
        let (rank_ok, out) = match kind {
            LayerKind::Conv => (ws.len() == 4 && ws[2] == ws[3] && ws[2] % 2 == 1, ws.first().copied()),
            LayerKind::TransposedConv => (ws.len() == 4 && ws[2] == 4 && ws[3] == 4, ws.get(1).copied()),
            LayerKind::Dense => (ws.len() == 2, ws.first().copied()),
        };
        if !rank_ok {
            return Err(NnError::Invalid { op: "layer", reason: format!("{kind:?} weights cannot have shape {ws:?}") });
        }
        let out = out.unwrap_or(0);
        if bias.shape() != [out] {
            return Err(NnError::Shape { op: "layer bias", expected: vec![out], found: bias.shape().to_vec() });
        }
        let mut layer = Self { kind, weights: weights.trainable(), bias: bias.trainable(), constraint };
        layer.project();
        Ok(layer)
    }

    /// 3x3 (or any odd size) convolution with He-uniform weights and zero bias.
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weights = he_uniform(vec![out_ch, in_ch, kernel, kernel], fan_in, rng);
        Self::new(LayerKind::Conv, weights, Tensor::zeros(vec![out_ch]), None).expect("valid conv shape")
    }

    /// 4x4 stride-2 transposed convolution with He-uniform weights.
    pub fn transposed_conv(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let weights = he_uniform(vec![in_ch, out_ch, 4, 4], in_ch * 16, rng);
        Self::new(LayerKind::TransposedConv, weights, Tensor::zeros(vec![out_ch]), None).expect("valid deconv shape")
    }

    /// Dense layer whose weights start in `(0, 0.1]` and stay nonnegative.
    pub fn nonnegative_dense(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let data = (0..inputs * outputs).map(|_| 0.1 - rng.random_range(0.0..0.1)).collect();
        let weights = Tensor::new(vec![outputs, inputs], data).expect("shape");
        Self::new(LayerKind::Dense, weights, Tensor::zeros(vec![outputs]), Some(Constraint::Nonnegative))
            .expect("valid dense shape")
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.numel() + self.bias.numel()
    }

    /// Applies the layer's constraint to its weights.
    pub fn project(&mut self) {
        if self.constraint == Some(Constraint::Nonnegative) {
            for w in self.weights.data_mut() {
                if *w < 0.0 {
                    *w = 0.0;
                }
            }
        }
    }
}

fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("shape")
}
