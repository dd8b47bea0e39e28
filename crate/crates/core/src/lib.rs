//! Desk-scale toolkit for weight-space policy merging, stage-conditioned
//! advantage weighting and latency-aware action-chunk execution on a
//! point-mass waypoint task.

pub mod advantage;
pub mod chunk;
pub mod control;
pub mod env;
pub mod episode;
pub mod error;
pub mod harness;
pub mod merge;
pub mod params;
pub mod policy;
pub mod rng;

pub use chunk::ActionChunk;
pub use episode::{Episode, Provenance};
pub use error::{Error, Result};
pub use params::ParameterVector;
pub use rng::Rng;
