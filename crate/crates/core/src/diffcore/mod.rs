//! Minimal reverse-mode differentiation over dense tensors.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

#[cfg(test)]
mod tests;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{check_params, operator_suite, relative_error, GradCheckConfig, GradCheckResult, OperatorCheck};
pub use graph::{BnBatchStats, BnMode, Gradients, Graph, Var, BN_EPS};
pub use kernels::{AnisoPad, AnisoSpec, AxisPad, Conv2dSpec, PadMode, PadSpec};
pub use params::{ParamEntry, ParamId, ParamSet};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
}
