//! Dense tensors with a tape-based reverse-mode differentiation engine.
//!
//! Values live in [`Tensor`]; computations are recorded on a [`Graph`] and
//! differentiated with [`Graph::backward`]. The engine is generic over the
//! scalar type so the same model code can run in `f32` for training and in
//! `f64` for gradient checking.

mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod ops;
mod optim;
pub mod par;
mod param;
mod real;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, ManifestEntry};
pub use error::TensorError;
pub use gradcheck::{gradient_check, param_gradient_check, GradCheckOptions, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use ops::conv::ConvSpec;
pub use ops::elementwise::{BinaryKind, UnaryKind};
pub use ops::shape::ReduceKind;
pub use optim::{Adam, AdamConfig};
pub use param::{InitSpec, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
