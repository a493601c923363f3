//! Minimal differentiable building blocks: dense and convolutional layers with hand
//! written backward passes, softmax/squared-error losses, SGD and Adam, and a
//! finite-difference gradient checker.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`). Forward and backward passes
//! take `&self` and are safe to call from several threads; optimizer updates need
//! exclusive access to the parameters.

mod error;
pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod optim;
mod sequential;
mod tensor;

pub use error::{NnError, Result};
pub use gradcheck::{check_gradients, grad_check, GradCheckReport, OutputLoss};
pub use layer::{ConvSpec, Layer, LayerSpec};
pub use optim::{OptimizerKind, OptimizerState};
pub use sequential::{Sequential, Trace};
pub use tensor::{DType, Real, Tensor};
