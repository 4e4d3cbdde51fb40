//! Differentiable layers with analytic backward passes.
//!
//! Every layer works on batched tensors. Convolution and pooling take
//! `[N, C, H, W]`; dense layers take `[N, F]`. Backward functions return
//! gradients with exactly the shapes of their primals.

mod activation;
mod conv;
mod dense;
pub mod gradcheck;
mod init;
mod pool;

pub use activation::{
    relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar, softmax_rows, Activation,
};
pub use conv::{
    conv2d_backward, conv2d_backward_reference, conv2d_forward, conv2d_forward_reference, Conv2d,
};
pub use dense::{dense_backward, dense_forward, Dense};
pub use init::uniform_tensor;
pub use pool::{maxpool2d_backward, maxpool2d_forward, pool_output_dims, PoolIndices, POOL_WINDOW};

pub(crate) use conv::conv2d_backward_with;
pub(crate) use dense::dense_backward_with;

use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error("internal consistency error: {0}")]
    Internal(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// Gradients produced by one backward call.
#[derive(Debug, Clone)]
pub struct LayerGradients<T: Scalar = f32> {
    pub d_input: Tensor<T>,
    pub d_weights: Option<Tensor<T>>,
    pub d_bias: Option<Tensor<T>>,
}

/// Parameter gradients of a layer whose input gradient may have been skipped.
#[derive(Debug, Clone)]
pub(crate) struct PartialGradients<T: Scalar> {
    pub d_input: Option<Tensor<T>>,
    pub d_weights: Tensor<T>,
    pub d_bias: Tensor<T>,
}

pub(crate) fn dims4(t: &Tensor<impl Scalar>, op: &'static str) -> Result<[usize; 4]> {
    t.expect_rank(4, op)?;
    let d = t.dims();
    Ok([d[0], d[1], d[2], d[3]])
}
