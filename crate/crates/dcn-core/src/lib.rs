//! Deformable convolution v4 core: reference and optimized kernels, the
//! surrounding module layer, comparison baselines, an analytic roofline
//! model and the verification suites behind the bench CLI.

pub mod baselines;
pub mod error;
pub mod module;
pub mod optimized;
pub mod reference;
pub mod roofline;
pub mod tensor;
pub mod timing;
pub mod verify;

pub use error::{DcnError, Result};
pub use optimized::{dcn_forward_opt, KernelPlan, StageTag};
pub use reference::{
    bilinear_sample, dcn_backward_ref, dcn_forward_ref, finite_diff_grad, softmax_k, DcnConfig,
    OffsetField, WeightField,
};
pub use tensor::{ElementType, FillSpec, SeededStream, Shape, TensorNHWC};
pub use timing::BenchRecord;
