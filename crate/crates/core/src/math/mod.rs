//! Numerical foundations: tensors, seeded randomness, mergeable streaming
//! statistics, SPD solves and damped-Fisher inverse products.

pub mod fisher;
pub mod linalg;
mod rng;
mod stats;
mod tensor;

pub use fisher::{fisher_inverse_vector, FisherBlock};
pub use linalg::{spd_solve, SpdFactor};
pub use rng::RngState;
pub use stats::{stats_accumulate, stats_merge, StreamingStats};
pub use tensor::TensorF;
