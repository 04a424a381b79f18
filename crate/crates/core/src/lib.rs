//! Cross-view geo-localisation model: a frozen ViT with parallel
//! convolutional adapters, multi-scale channel reallocation and a
//! bag-of-queries aggregator whose keys and values are produced by top-1
//! routed experts. Includes the contrastive objective and retrieval metrics.

pub mod adapter;
pub mod aggregator;
pub mod attention;
pub mod backbone;
pub mod error;
pub mod grid;
pub mod init;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod mscr;

pub use error::{ModelError, Result};
pub use model::{describe, init_model, ModelConfig};
