//! Minimal dense tensor engine with reverse-mode differentiation.

mod adam;
pub mod checkpoint;
pub(crate) mod conv;
pub mod gradcheck;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use adam::Adam;
pub use param::{AdamState, ParamId, ParamKind, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{BnParams, Gradients, Mode, OpKind, Reduction, Tape, Var};
pub use tensor::Tensor;
