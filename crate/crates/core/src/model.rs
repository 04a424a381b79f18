//! The full descriptor pipeline: adapted backbone → MSCR → aggregator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use cvgl_numerics::{Bindings, ParameterStore, Tape, Tensor};

use crate::adapter::{init_adapters, AdapterConfig};
use crate::aggregator::{aggregate, init_aggregator, AggregateOutput, AggregatorConfig, KvMode};
use crate::backbone::{encode, init_backbone, BackboneConfig};
use crate::error::{ModelError, Result};
use crate::grid::{grid_to_tokens, tokens_to_grid};
use crate::loss::{init_loss, Temperature, DEFAULT_TAU};
use crate::mscr::{init_mscr, mscr_forward, MscrConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `None` runs the frozen backbone without adapters.
    pub adapter: Option<AdapterConfig>,
    /// `None` feeds backbone tokens straight to the aggregator.
    pub mscr: Option<MscrConfig>,
    pub aggregator: AggregatorConfig,
    /// Seed for every trainable parameter.
    pub seed: u64,
    pub initial_tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            adapter: Some(AdapterConfig::default()),
            mscr: Some(MscrConfig::default()),
            aggregator: AggregatorConfig::default(),
            seed: 0,
            initial_tau: DEFAULT_TAU,
        }
    }
}

impl ModelConfig {
    /// Toggles mirroring the ablation axes.
    pub fn with_components(mut self, use_adapter: bool, use_mscr: bool, kv: KvMode) -> Self {
        self.adapter = use_adapter.then(AdapterConfig::default);
        self.mscr = use_mscr.then(MscrConfig::default);
        self.aggregator.kv = kv;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.aggregator.validate()?;
        if self.aggregator.dim != self.backbone.dim {
            return Err(ModelError::Config(format!(
                "aggregator width {} differs from backbone width {}",
                self.aggregator.dim, self.backbone.dim
            )));
        }
        if let Some(a) = &self.adapter {
            a.bottleneck(self.backbone.dim)?;
        }
        if let Some(m) = &self.mscr {
            if !(0.0..1.0).contains(&m.dropout_p) {
                return Err(ModelError::Config(format!("dropout {} outside [0, 1)", m.dropout_p)));
            }
            if self.backbone.dim % 4 != 0 {
                return Err(ModelError::Config(format!(
                    "channel count {} is not divisible by 4",
                    self.backbone.dim
                )));
            }
        }
        Temperature::from_tau(self.initial_tau)?;
        Ok(())
    }
}

/// Frozen backbone plus every trainable component the config enables.
pub fn init_model(cfg: &ModelConfig) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = init_backbone(&cfg.backbone)?;
    if let Some(a) = &cfg.adapter {
        store.extend(init_adapters(&cfg.backbone, a, cfg.seed)?)?;
    }
    if cfg.mscr.is_some() {
        store.extend(init_mscr(cfg.backbone.dim, cfg.seed)?)?;
    }
    store.extend(init_aggregator(&cfg.aggregator, cfg.seed)?)?;
    store.extend(init_loss(Temperature::from_tau(cfg.initial_tau)?)?)?;
    Ok(store)
}

/// Unit-norm descriptor of one `[3 × S × S]` image.
pub fn describe<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &Bindings,
    cfg: &ModelConfig,
    image: &Tensor,
    training: bool,
    rng: &mut R,
) -> Result<AggregateOutput> {
    let z = encode(tape, image, params, &cfg.backbone, cfg.adapter.as_ref())?;
    let tokens = match &cfg.mscr {
        Some(m) => {
            let grid = tokens_to_grid(tape, z)?;
            let y = mscr_forward(tape, grid, params, m, training, rng)?;
            grid_to_tokens(tape, y)?
        }
        None => tape.slice_rows(z.tokens, 1, z.grid_h * z.grid_w)?,
    };
    aggregate(tape, tokens, params, &cfg.aggregator)
}
