//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Model code is written once against [`Backend`]. [`Graph`] records every
//! operation for a later [`Graph::backward`]; [`Eval`] computes values only and
//! never allocates a node.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use kernels::{ClassTarget, ConvSpec, DiceCeSpec, Padding};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
}

/// The closed set of differentiable operations used by the model and losses.
pub trait Backend {
    type Value: Clone;

    /// A constant input that never receives a gradient.
    fn constant(&mut self, t: Tensor) -> Self::Value;
    /// A learnable leaf. Only recording backends track its gradient.
    fn param(&mut self, t: &Tensor) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn conv2d(
        &mut self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: Option<&Self::Value>,
        spec: ConvSpec,
    ) -> Result<Self::Value, TensorError>;
    fn maxpool2d(&mut self, x: &Self::Value, k: usize) -> Result<Self::Value, TensorError>;
    fn upsample_bilinear2d(
        &mut self,
        x: &Self::Value,
        out_h: usize,
        out_w: usize,
    ) -> Result<Self::Value, TensorError>;
    fn relu(&mut self, x: &Self::Value) -> Self::Value;
    fn sigmoid(&mut self, x: &Self::Value) -> Self::Value;
    fn log(&mut self, x: &Self::Value) -> Self::Value;
    fn softmax_channel(&mut self, x: &Self::Value) -> Result<Self::Value, TensorError>;
    fn concat_channel(&mut self, parts: &[&Self::Value]) -> Result<Self::Value, TensorError>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError>;
    fn scale(&mut self, x: &Self::Value, factor: f64) -> Self::Value;
    fn mul_channelwise(
        &mut self,
        scale: &Self::Value,
        x: &Self::Value,
    ) -> Result<Self::Value, TensorError>;
    fn global_avg_pool_spatial(&mut self, x: &Self::Value) -> Result<Self::Value, TensorError>;
    fn channel_mean_pool(&mut self, x: &Self::Value) -> Result<Self::Value, TensorError>;
    fn linear(
        &mut self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: Option<&Self::Value>,
    ) -> Result<Self::Value, TensorError>;
    fn mse_mean(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError>;
    fn dice_ce(
        &mut self,
        logits: &Self::Value,
        target: &ClassTarget,
        spec: DiceCeSpec,
    ) -> Result<Self::Value, TensorError>;
}

/// Graph-free evaluation: values only, nothing recorded.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Backend for Eval {
    type Value = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn conv2d(
        &mut self,
        x: &Tensor,
        weight: &Tensor,
        bias: Option<&Tensor>,
        spec: ConvSpec,
    ) -> Result<Tensor, TensorError> {
        kernels::conv2d(x, weight, bias, spec)
    }

    fn maxpool2d(&mut self, x: &Tensor, k: usize) -> Result<Tensor, TensorError> {
        Ok(kernels::maxpool2d(x, k)?.0)
    }

    fn upsample_bilinear2d(
        &mut self,
        x: &Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor, TensorError> {
        kernels::upsample_bilinear2d(x, out_h, out_w)
    }

    fn relu(&mut self, x: &Tensor) -> Tensor {
        kernels::map(x, |v| v.max(0.0))
    }

    fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        kernels::map(x, kernels::sigmoid)
    }

    fn log(&mut self, x: &Tensor) -> Tensor {
        kernels::map(x, f64::ln)
    }

    fn softmax_channel(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        kernels::softmax_channel(x)
    }

    fn concat_channel(&mut self, parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        kernels::concat_channel(parts)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        kernels::zip_map(a, b, |x, y| x + y)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        kernels::zip_map(a, b, |x, y| x * y)
    }

    fn scale(&mut self, x: &Tensor, factor: f64) -> Tensor {
        kernels::map(x, |v| v * factor)
    }

    fn mul_channelwise(&mut self, scale: &Tensor, x: &Tensor) -> Result<Tensor, TensorError> {
        kernels::mul_channelwise(scale, x)
    }

    fn global_avg_pool_spatial(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        kernels::global_avg_pool_spatial(x)
    }

    fn channel_mean_pool(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        kernels::channel_mean_pool(x)
    }

    fn linear(
        &mut self,
        x: &Tensor,
        weight: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor, TensorError> {
        kernels::linear(x, weight, bias)
    }

    fn mse_mean(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        Ok(Tensor::scalar(kernels::mse_mean(a, b)?))
    }

    fn dice_ce(
        &mut self,
        logits: &Tensor,
        target: &ClassTarget,
        spec: DiceCeSpec,
    ) -> Result<Tensor, TensorError> {
        Ok(Tensor::scalar(kernels::dice_ce(logits, target, spec)?))
    }
}
