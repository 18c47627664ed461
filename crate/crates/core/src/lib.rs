//! Selective resampling state space networks.
//!
//! Plain numerics (`ssm`, `selective`, `resample`, `prop`, `matrix`) are
//! generic over [`Scalar`]; the reverse-mode tape, the network and the
//! training harness work in `f64`.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod net;
pub mod prop;
pub mod resample;
pub mod scalar;
pub mod scan_op;
pub mod selective;
pub mod ssm;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type MatrixF32 = matrix::Matrix<f32>;
pub type MatrixF64 = matrix::Matrix<f64>;
pub type SsmParamsF32 = ssm::SsmParams<f32>;
pub type SsmParamsF64 = ssm::SsmParams<f64>;
pub type SelectiveHeadF32 = selective::SelectiveHead<f32>;
pub type SelectiveHeadF64 = selective::SelectiveHead<f64>;
pub type ResampleConfigF32 = resample::ResampleConfig<f32>;
pub type ResampleConfigF64 = resample::ResampleConfig<f64>;
pub type PropInstanceF32 = prop::PropInstance<f32>;
pub type PropInstanceF64 = prop::PropInstance<f64>;
