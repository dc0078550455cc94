//! Bidirectional temporal diffusion for pose-conditioned frame sequences.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the `f32` production types.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod model;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod sample;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, Checkpoint32};
pub use error::{Error, Result};
pub use model::{Condition, DenoiserConfig, DenoiserModel, Direction, Model32, Model64};
pub use scalar::{DType, Scalar};
pub use schedule::{NoiseSchedule, SamplingSchedule, ScheduleParams};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
