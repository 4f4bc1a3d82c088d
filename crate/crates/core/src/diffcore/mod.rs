//! Reverse-mode differentiation over dense 2-D tensors.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{Gradients, ParamId, Parameter, ParameterStore};
pub use tape::{Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;
