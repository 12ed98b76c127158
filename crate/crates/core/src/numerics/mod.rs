//! Dense tensors, a reverse-mode tape and the Adam optimizer.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

mod adam;
mod gradcheck;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState, WarmupSchedule};
pub use gradcheck::{check_parameters, finite_difference_check, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use params::{init_normal, Param, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{SeqLayout, Tape, Var};
pub use tensor::Tensor;
