//! Synthetic cross-view data, training, evaluation, persistence and the
//! `cvgl` command line.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod descriptors;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod manifest;
pub mod optim;
pub mod raster;
pub mod report;
pub mod synth;
pub mod train;

pub use config::TrainConfig;
pub use error::{HarnessError, Result};
