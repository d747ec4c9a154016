//! Instruction-guided virtual try-on on a procedural paper-doll world: query
//! aggregation with semantic alignment, a flow-matching transformer with pose
//! injection, attention focusing, and two-stage training with self-synthesis.

pub mod autodiff;
pub mod scalar;
pub mod tensor;
pub mod image;
pub mod nn;
pub mod params;
pub mod toyworld;
pub mod dit;
pub mod error;
pub mod focus;
pub mod gradcheck;
pub mod mgsa;
pub mod model;
pub mod pipeline;
pub mod checkpoint;
pub mod config;
pub mod metrics;

pub use error::{ModelError, Result};
pub use scalar::Scalar;

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type TryOnModel32 = model::TryOnModel<f32>;
pub type TryOnModel64 = model::TryOnModel<f64>;
pub type AdamW32 = params::AdamW<f32>;
