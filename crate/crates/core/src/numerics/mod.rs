//! Tensors, reverse-mode differentiation and the primitives the model is
//! built from.

mod element;
pub mod gradcheck;
pub mod ops;
mod params;
mod tape;
mod tensor;
mod window;

pub use element::{DType, Element};
pub use gradcheck::{grad_check, grad_check_inputs, grad_check_steps, GradCheckReport, ProbeResult, Probes, Step};
pub use ops::{concat, stack_rows, weighted_sum, LN_EPS};
pub use params::{Bound, Init, InitMode, ParamBuilder, ParamId, ParamStore, Parameter};
pub use tape::{GradSink, Gradients, Tape, Var};
pub use tensor::Tensor;
pub use window::{window_merge, window_partition};
