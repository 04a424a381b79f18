//! Multi-scale channel reallocation.
//!
//! ```text
//! X_k   = PW_k(DW_kxk(X))          k ∈ {1, 3, 5}, each C → C/4
//! X_mp  = PW_mp(MaxPool3x3(X))     C → C/4
//! X_ms  = Concat(X_1, X_3, X_5, X_mp)
//! X_loc = Dropout(GELU(X_ms))
//! R     = Conv1x1(X_loc)           C → 1, no bias
//! X_res = X_loc − R                R broadcast over channels
//! X_adj = X_loc + σ ⊙ X_res        σ per channel
//! Y     = X + X_adj
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use cvgl_numerics::{Bindings, ConvMode, ParameterStore, Tape, Tensor, Var};

use crate::error::{ModelError, Result};
use crate::init;

pub const PREFIX: &str = "mscr";
pub const BRANCH_KERNELS: [usize; 3] = [1, 3, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MscrConfig {
    pub dropout_p: f64,
}

impl Default for MscrConfig {
    fn default() -> Self {
        Self { dropout_p: 0.1 }
    }
}

fn branch_width(channels: usize) -> Result<usize> {
    if channels == 0 || channels % 4 != 0 {
        return Err(ModelError::Config(format!(
            "channel count {channels} is not divisible by 4"
        )));
    }
    Ok(channels / 4)
}

pub fn init_mscr(channels: usize, seed: u64) -> Result<ParameterStore> {
    let q = branch_width(channels)?;
    let mut store = ParameterStore::new();
    for k in BRANCH_KERNELS {
        let p = format!("{PREFIX}.b{k}");
        store.insert(format!("{p}.dw"), init::fan_in(seed, &format!("{p}.dw"), &[channels, k, k], k * k), true)?;
        store.insert(format!("{p}.dw_b"), Tensor::zeros(&[channels]), true)?;
        store.insert(format!("{p}.pw"), init::fan_in(seed, &format!("{p}.pw"), &[q, channels], channels), true)?;
        store.insert(format!("{p}.pw_b"), Tensor::zeros(&[q]), true)?;
    }
    let p = format!("{PREFIX}.mp");
    store.insert(format!("{p}.pw"), init::fan_in(seed, &format!("{p}.pw"), &[q, channels], channels), true)?;
    store.insert(format!("{p}.pw_b"), Tensor::zeros(&[q]), true)?;
    let n = format!("{PREFIX}.res.w");
    store.insert(n.clone(), init::fan_in(seed, &n, &[1, channels], channels), true)?;
    store.insert(format!("{PREFIX}.sigma"), Tensor::zeros(&[channels]), true)?;
    Ok(store)
}

/// Intermediate maps of one forward pass, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct MscrTrace {
    pub local: Var,
    pub residual_signal: Var,
    pub residual: Var,
    pub adjusted: Var,
    pub output: Var,
}

pub fn mscr_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    params: &Bindings,
    cfg: &MscrConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    Ok(mscr_trace(tape, x, params, cfg, training, rng)?.output)
}

pub fn mscr_trace<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    params: &Bindings,
    cfg: &MscrConfig,
    training: bool,
    rng: &mut R,
) -> Result<MscrTrace> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(ModelError::Shape(format!("expected [B, C, H, W], got {shape:?}")));
    }
    branch_width(shape[1])?;
    let get = |n: &str| params.get(&format!("{PREFIX}.{n}"));

    let mut branches = Vec::with_capacity(4);
    for k in BRANCH_KERNELS {
        let mode = ConvMode::Separable {
            dw: get(&format!("b{k}.dw"))?,
            dw_b: Some(get(&format!("b{k}.dw_b"))?),
            pw: get(&format!("b{k}.pw"))?,
            pw_b: Some(get(&format!("b{k}.pw_b"))?),
        };
        branches.push(tape.conv2d(x, mode)?);
    }
    let pooled = tape.maxpool3x3(x)?;
    branches.push(tape.conv_pointwise(pooled, get("mp.pw")?, Some(get("mp.pw_b")?))?);

    let ms = tape.concat_channels(&branches)?;
    let act = tape.gelu(ms);
    let local = tape.dropout(act, cfg.dropout_p, training, rng)?;
    let residual_signal = tape.conv_pointwise(local, get("res.w")?, None)?;
    let residual = tape.sub_channel_broadcast(local, residual_signal)?;
    let modulated = tape.mul_channel(residual, get("sigma")?)?;
    let adjusted = tape.add(local, modulated)?;
    let output = tape.add(x, adjusted)?;
    Ok(MscrTrace {
        local,
        residual_signal,
        residual,
        adjusted,
        output,
    })
}
