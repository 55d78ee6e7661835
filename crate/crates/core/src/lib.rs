//! Joint head detection and gaze following as set prediction.
//!
//! The pieces: [`geometry`] primitives, the synthetic [`data`] harness,
//! the [`model`], bipartite [`matching`], the training [`objective`] and the
//! evaluation [`metrics`]. The `gtr` binary in [`cli`] ties them together.

pub mod cli;
pub mod data;
mod error;
pub mod geometry;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod seed;

pub use error::{Error, Result};
