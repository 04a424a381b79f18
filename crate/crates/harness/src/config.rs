use serde::{Deserialize, Serialize};

use cvgl_core::adapter::AdapterConfig;
use cvgl_core::aggregator::{AggregatorConfig, KvMode};
use cvgl_core::backbone::BackboneConfig;
use cvgl_core::loss::DEFAULT_TAU;
use cvgl_core::mscr::MscrConfig;
use cvgl_core::ModelConfig;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub image_size: usize,
    pub experts: usize,
    pub num_queries: usize,
    pub use_adapter: bool,
    pub use_mscr: bool,
    /// Routed experts when set, a single dense key/value projection otherwise.
    pub use_moe: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            epochs: 40,
            batch_size: 24,
            seed: 0,
            image_size: 64,
            experts: 3,
            num_queries: 32,
            use_adapter: true,
            use_mscr: true,
            use_moe: true,
        }
    }
}

impl TrainConfig {
    /// The 20-epoch preset used with the standard synthetic dataset.
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 20,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(HarnessError::Config("batch size must be at least 2 so each batch has negatives".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HarnessError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.use_moe && self.experts == 0 {
            return Err(HarnessError::Config("expert count must be at least 1".into()));
        }
        self.model_config().validate()?;
        Ok(())
    }

    pub fn kv_mode(&self) -> KvMode {
        if self.use_moe {
            KvMode::Routed { experts: self.experts }
        } else {
            KvMode::Dense
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let backbone = BackboneConfig {
            image_size: self.image_size,
            seed: self.seed,
            ..BackboneConfig::default()
        };
        let aggregator = AggregatorConfig {
            num_queries: self.num_queries,
            dim: backbone.dim,
            kv: self.kv_mode(),
            ..AggregatorConfig::default()
        };
        ModelConfig {
            backbone,
            adapter: self.use_adapter.then(AdapterConfig::default),
            mscr: self.use_mscr.then(MscrConfig::default),
            aggregator,
            seed: self.seed,
            initial_tau: DEFAULT_TAU,
        }
    }

    /// Short label for tables and logs.
    pub fn label(&self) -> String {
        let kv = if self.use_moe { format!("moe-e{}", self.experts) } else { "dense".into() };
        format!(
            "{kv}{}{}",
            if self.use_adapter { "+adapter" } else { "" },
            if self.use_mscr { "+mscr" } else { "" }
        )
    }
}
