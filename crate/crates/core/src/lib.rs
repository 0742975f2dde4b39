//! Graph-based forecasting of conversation derailment.
//!
//! Given the first N-1 turns of a multi-party conversation, the pipeline
//! predicts whether turn N will be a personal attack. Turn text, user
//! identity, public-perception scores, and commonsense knowledge are encoded
//! sequentially, mixed over a typed conversation graph by a two-step
//! relational convolution, packed into per-turn capsules, and classified by
//! one of three heads.
//!
//! The numeric core is generic over the scalar type (f32 or f64) via
//! [`scalar::Scalar`]; concrete aliases are exported below. All gradients
//! come from one reverse-mode tape ([`tape::Tape`]), which keeps the
//! finite-difference verification story in one place.

pub mod corpus;
pub mod error;
pub mod features;
pub mod gcn;
pub mod graph;
pub mod hashing;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod tape;

pub use error::{Error, ErrorCategory, Result};
pub use scalar::Scalar;

/// Matrix type used throughout the numeric core.
pub type Mat<T> = ndarray::Array2<T>;

// Concrete aliases for the two supported precisions. The CLI and the
// reproducibility guarantees use the f64 variants.
pub type Mat32 = Mat<f32>;
pub type Mat64 = Mat<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Tape64 = tape::Tape<f64>;
pub type Model32 = pipeline::ForecastModel<f32>;
pub type Model64 = pipeline::ForecastModel<f64>;
