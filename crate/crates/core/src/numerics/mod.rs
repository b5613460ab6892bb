//! Dense tensors and a tape-based reverse-mode differentiation engine, sized
//! for a small decoder-only transformer.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{central_differences, gradcheck, max_relative_error};
pub use tape::{Graph, Var, CAUSAL_FILL};
pub use tensor::{Element, Real, Tensor};
