//! File formats, run configuration, checkpoints, the training and timed
//! inference pipeline, reference oracles and the self-check suite for
//! [`voxelflow_core`].

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flops;
pub mod oracle;
pub mod pcio;
pub mod pipeline;
pub mod selfcheck;

pub use error::{Error, Result};
