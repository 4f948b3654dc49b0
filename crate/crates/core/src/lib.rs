//! Incremental SE(2) smoothing and learning of factor-graph noise models
//! with the smoother in the loop.

pub mod datagen;
pub mod error;
pub mod graph;
pub mod harness;
pub mod learner;
pub mod leo;
pub mod liegroup;
pub mod metrics;
pub mod smoother;

pub use error::{Error, Result};
