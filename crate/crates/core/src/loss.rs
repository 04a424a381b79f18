//! Symmetric InfoNCE over a batch of paired descriptors.
//!
//! For a similarity matrix `S` with positives on the diagonal, the
//! query→reference loss is the mean over rows of
//! `−log(exp(S_ii/τ) / Σ_j exp(S_ij/τ))`; reference→query applies the same
//! to `Sᵀ`, and the symmetric loss averages the two.

use cvgl_numerics::{ParameterStore, Tape, Tensor, Var};

use crate::error::{ModelError, Result};

pub const PREFIX: &str = "loss";
pub const LOG_INV_TAU: &str = "loss.log_inv_tau";
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    QueryToReference,
    ReferenceToQuery,
}

/// Temperature stored as `ln(1/τ)` so that `τ > 0` by construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    pub log_inv_tau: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Self {
            log_inv_tau: (1.0 / DEFAULT_TAU).ln(),
        }
    }
}

impl Temperature {
    pub fn from_tau(tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self {
            log_inv_tau: (1.0 / tau).ln(),
        })
    }

    pub fn tau(&self) -> f64 {
        (-self.log_inv_tau).exp()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(ModelError::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

pub fn init_loss(temperature: Temperature) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    store.insert(LOG_INV_TAU, Tensor::new(vec![1], vec![temperature.log_inv_tau])?, true)?;
    Ok(store)
}

/// `S = Q · Rᵀ` for descriptor rows `Q[B×D]`, `R[B×D]`.
pub fn similarity(tape: &mut Tape, queries: Var, references: Var) -> Result<Var> {
    let rt = tape.transpose(references)?;
    Ok(tape.matmul(queries, rt)?)
}

fn check_square(tape: &Tape, s: Var) -> Result<()> {
    let shape = tape.shape(s);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(ModelError::Shape(format!("expected a square similarity matrix, got {shape:?}")));
    }
    if shape[0] == 0 {
        return Err(ModelError::EmptyInput("similarity matrix has no rows".into()));
    }
    Ok(())
}

/// Directional loss with the temperature given as a `[1]` log-inverse var.
pub fn info_nce(tape: &mut Tape, s: Var, log_inv_tau: Var, direction: Direction) -> Result<Var> {
    check_square(tape, s)?;
    let oriented = match direction {
        Direction::QueryToReference => s,
        Direction::ReferenceToQuery => tape.transpose(s)?,
    };
    let inv_tau = tape.exp(log_inv_tau);
    let logits = tape.scale_by(oriented, inv_tau)?;
    Ok(tape.diag_cross_entropy(logits)?)
}

/// Average of both directional losses.
pub fn symmetric_info_nce(tape: &mut Tape, s: Var, log_inv_tau: Var) -> Result<Var> {
    let forward = info_nce(tape, s, log_inv_tau, Direction::QueryToReference)?;
    let backward = info_nce(tape, s, log_inv_tau, Direction::ReferenceToQuery)?;
    let total = tape.add(forward, backward)?;
    Ok(tape.scale(total, 0.5))
}

fn eval_loss(s: &Tensor, tau: f64, direction: Option<Direction>) -> Result<f64> {
    check_tau(tau)?;
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let t = tape.constant(Tensor::new(vec![1], vec![(1.0 / tau).ln()])?);
    let loss = match direction {
        Some(d) => info_nce(&mut tape, sv, t, d)?,
        None => symmetric_info_nce(&mut tape, sv, t)?,
    };
    Ok(tape.value(loss).item())
}

pub fn info_nce_value(s: &Tensor, tau: f64, direction: Direction) -> Result<f64> {
    eval_loss(s, tau, Some(direction))
}

pub fn symmetric_info_nce_value(s: &Tensor, tau: f64) -> Result<f64> {
    eval_loss(s, tau, None)
}
