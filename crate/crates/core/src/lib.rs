//! Pruning laboratory for batch-normalized dense networks.
//!
//! The crate trains small `[Linear -> BatchNorm -> ReLU] x L` classifiers,
//! prunes them one-shot with magnitude, OBD and OBS criteria (optionally
//! followed by a Fisher-based joint weight update), measures how the
//! post-BN signal variance decays through the pruned network, and restores
//! it by re-estimating the BatchNorm running statistics on a small
//! calibration set.
//!
//! Everything runs in `f64` and is a deterministic function of its inputs
//! and seeds.

pub mod checkpoint;
pub mod datasets;
pub mod diagnostics;
mod error;
pub mod math;
pub mod model;
pub mod pruning;
pub mod reflow;
pub mod training;

pub use error::{LabError, Result};
pub use math::{RngState, StreamingStats, TensorF};
pub use model::{BnMode, Model, ModelConfig};
