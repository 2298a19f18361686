//! Differentially private training of a small Transformer for next-token
//! prediction.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: dense arrays, seeded random streams, stable softmax.
//! - [`seqdata`]: interaction-log ingestion, long-tailed sequence datasets, minibatches.
//! - [`transformer`]: the encoder with a shared token embedding, explicit
//!   forward/backward and the gradient tape used for clipping.
//! - [`clipping`]: per-sample gradient norms without per-sample gradients
//!   (ghost norms for linear layers, the shared-embedding identity), plus the
//!   instantiating oracle and the two-pass clipped gradient.
//! - [`privacy`]: Gaussian noise injection and the Rényi accountant.
//! - [`reattention`]: effective errors, Gaussian moment propagation and the
//!   attention-score correction.
//! - [`traineval`]: schedules, Adam, the training loop, ranking metrics and grids.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). Training
//! and all oracle comparisons use `f64`; the aliases below name the common
//! instantiations.

pub mod clipping;
pub mod error;
pub mod memtrack;
pub mod numkit;
pub mod privacy;
pub mod reattention;
pub mod scalar;
pub mod seqdata;
pub mod traineval;
pub mod transformer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense array of 64-bit floats.
pub type Array64 = numkit::Array<f64>;
/// Dense array of 32-bit floats.
pub type Array32 = numkit::Array<f32>;
/// Model parameters in double precision.
pub type ModelParams64 = transformer::ModelParams<f64>;
/// Model parameters in single precision.
pub type ModelParams32 = transformer::ModelParams<f32>;
/// Gradient tape in double precision.
pub type GradTape64 = transformer::GradTape<f64>;

/// Gaussian moments in double precision.
pub type GaussianMoments64 = reattention::GaussianMoments<f64>;
