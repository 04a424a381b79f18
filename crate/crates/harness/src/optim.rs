//! Adam with a per-step cosine-annealed learning rate.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use cvgl_numerics::{ParameterStore, Tensor};

use crate::error::{HarnessError, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// `base · ½(1 + cos(π·step/total))`, reaching zero after `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update to every parameter that has a gradient. Only
    /// trainable parameters are accepted.
    pub fn update(&mut self, store: &mut ParameterStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (name, g) in grads {
            let param = store
                .get(name)
                .ok_or_else(|| HarnessError::Invariant(format!("gradient for unknown parameter {name}")))?;
            if !param.trainable {
                return Err(HarnessError::Invariant(format!("gradient for frozen parameter {name}")));
            }
            let n = g.numel();
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let values = store.data_mut(name)?;
            if values.len() != n {
                return Err(HarnessError::Invariant(format!("gradient shape mismatch for {name}")));
            }
            for (i, (p, &gi)) in values.iter_mut().zip(g.data()).enumerate() {
                st.m[i] = BETA1 * st.m[i] + (1.0 - BETA1) * gi;
                st.v[i] = BETA2 * st.v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = st.m[i] / c1;
                let v_hat = st.v[i] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}
