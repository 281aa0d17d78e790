//! Online test-time adaptation by aligning the visual principal subspace with
//! the text-anchor subspace and projecting embeddings onto it.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

// `!(x >= y)` is how NaN is rejected throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapt;
pub mod checks;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod io;
pub mod linalg;
pub mod objective;
pub mod optim;
pub mod predictor;
pub mod scalar;
pub mod subspace;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type SymMatrix64 = linalg::SymMatrix<f64>;
pub type SymMatrix32 = linalg::SymMatrix<f32>;
pub type EigenPairs64 = linalg::EigenPairs<f64>;
pub type EigenPairs32 = linalg::EigenPairs<f32>;
pub type Subspace64 = subspace::Subspace<f64>;
pub type Subspace32 = subspace::Subspace<f32>;
pub type CovarianceTracker64 = subspace::CovarianceTracker<f64>;
pub type CovarianceTracker32 = subspace::CovarianceTracker<f32>;
pub type ToyEncoder64 = encoder::ToyEncoder<f64>;
pub type ToyEncoder32 = encoder::ToyEncoder<f32>;
pub type TextAnchorSet64 = predictor::TextAnchorSet<f64>;
pub type TextAnchorSet32 = predictor::TextAnchorSet<f32>;
pub type TtaConfig64 = adapt::TtaConfig<f64>;
pub type TtaConfig32 = adapt::TtaConfig<f32>;
pub type StepReport64 = adapt::StepReport<f64>;
pub type StepReport32 = adapt::StepReport<f32>;
pub type TextPrior64 = adapt::TextPrior<f64>;
pub type TextPrior32 = adapt::TextPrior<f32>;
