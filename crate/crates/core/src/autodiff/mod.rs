//! Minimal reverse-mode differentiation, Adam, and gradient checking.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamHyper, LrSchedule, OptimState};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use tape::{Grads, ParamId, ParamSet, Tape, Var};
pub use tensor::{Real, Tensor};
