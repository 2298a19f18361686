//! Minimal dense-array numerics, seeded random streams and numerically
//! stable primitives shared by the rest of the crate.

mod array;
pub mod kernels;
mod rng;
mod stable;

pub use array::Array;
pub use rng::{Rng, Stream};
pub use stable::{
    gaussian_sample, gumbel_max_expectation, logsumexp, stable_softmax, MonteCarloEstimate,
    EULER_MASCHERONI,
};
