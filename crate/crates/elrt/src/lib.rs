//! Training compact convolutional networks from scratch in Tucker-2
//! low-tensor-rank format, with orthogonality-aware regularization, plus the
//! FLOPs accounting and decomposition analyses that go with it.
//!
//! All numeric kernels are generic over the scalar type: training runs on
//! `f32`, while gradient and oracle checks run the identical code on `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod decomp;
pub mod error;
pub mod flops;
pub mod model;
pub mod ortho;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod tucker;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{set_parallel, ConvGeometry, Tensor};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
pub type Tucker2Conv32 = tucker::Tucker2Conv<f32>;
pub type Tucker2Conv64 = tucker::Tucker2Conv<f64>;
