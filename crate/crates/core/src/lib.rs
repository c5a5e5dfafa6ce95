//! Two-stream face recognition and reconstruction with saliency explanations.
//!
//! The encoder maps a face to a spatial feature map `C` and its channel-wise maximum `F`;
//! the reconstructor decodes `C` back into an image. Explanations zero one channel maximum
//! at a time, decode, and weight the resulting residual maps by how much that channel
//! contributes to the cosine similarity of a pair.
//!
//! Numerics are generic over [`Scalar`]; training runs at `f32`, gradient checks at `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod explain;
pub mod gemm;
pub mod gradcheck;
pub mod hiding;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod output;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type FaceModel32 = model::FaceModel<f32>;
pub type FaceModel64 = model::FaceModel<f64>;
pub type Explanation32 = explain::Explanation<f32>;
pub type Explanation64 = explain::Explanation<f64>;
