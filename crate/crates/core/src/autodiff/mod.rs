//! Minimal reverse-mode automatic differentiation over `f64` tensors.

mod conv;
mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use gradcheck::{finite_difference_check, input_gradcheck, param_gradcheck, relative_error};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{Activation, BinaryOp, Gradients, Tape, Var};
pub use tensor::Tensor;
