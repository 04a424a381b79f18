//! Bottleneck convolutional adapter run in parallel with each frozen block.
//!
//! `A(z) = W3 · GELU(DW3x3(GELU(W1 · z)))` on the patch grid, and the
//! adapted block is `T(z) + A(z)`.

use serde::{Deserialize, Serialize};

use cvgl_numerics::{Bindings, ParameterStore, Scope, Tape, Tensor};

use crate::backbone::{block_forward, BackboneConfig, TokenGrid};
use crate::error::{ModelError, Result};
use crate::grid::{grid_to_tokens, tokens_to_grid};
use crate::init;

pub const PREFIX: &str = "adapter";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub reduction: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { reduction: 4 }
    }
}

impl AdapterConfig {
    pub fn bottleneck(&self, dim: usize) -> Result<usize> {
        if self.reduction == 0 || dim % self.reduction != 0 {
            return Err(ModelError::Config(format!(
                "adapter reduction {} does not divide width {dim}",
                self.reduction
            )));
        }
        Ok(dim / self.reduction)
    }
}

/// One trainable adapter per backbone block. `w3`/`b3` start at zero so the
/// adapted network initially equals the frozen one.
pub fn init_adapters(backbone: &BackboneConfig, cfg: &AdapterConfig, seed: u64) -> Result<ParameterStore> {
    let d = backbone.dim;
    let r = cfg.bottleneck(d)?;
    let mut store = ParameterStore::new();
    for l in 0..backbone.depth {
        let p = format!("{PREFIX}.{l}");
        store.insert(format!("{p}.w1"), init::fan_in(seed, &format!("{p}.w1"), &[r, d], d), true)?;
        store.insert(format!("{p}.b1"), Tensor::zeros(&[r]), true)?;
        store.insert(format!("{p}.dw"), init::fan_in(seed, &format!("{p}.dw"), &[r, 3, 3], 9), true)?;
        store.insert(format!("{p}.bdw"), Tensor::zeros(&[r]), true)?;
        store.insert(format!("{p}.w3"), Tensor::zeros(&[d, r]), true)?;
        store.insert(format!("{p}.b3"), Tensor::zeros(&[d]), true)?;
    }
    Ok(store)
}

/// Applies the adapter to the patch tokens. The CLS row, if present, is
/// carried through unchanged.
pub fn adapter_forward(tape: &mut Tape, z: TokenGrid, scope: Scope<'_>) -> Result<TokenGrid> {
    let grid = tokens_to_grid(tape, z)?;
    let h = tape.conv_pointwise(grid, scope.get("w1")?, Some(scope.get("b1")?))?;
    let h = tape.gelu(h);
    let h = tape.conv_depthwise(h, scope.get("dw")?, Some(scope.get("bdw")?))?;
    let h = tape.gelu(h);
    let h = tape.conv_pointwise(h, scope.get("w3")?, Some(scope.get("b3")?))?;
    let patches = grid_to_tokens(tape, h)?;
    let tokens = if z.has_cls {
        let cls = tape.slice_rows(z.tokens, 0, 1)?;
        tape.concat_rows(&[cls, patches])?
    } else {
        patches
    };
    TokenGrid::new(tape, tokens, z.grid_h, z.grid_w, z.has_cls)
}

/// `T_l(z) + A_l(z)`. The adapter contributes nothing to the CLS row, which
/// has no grid position.
pub fn adapted_block(
    tape: &mut Tape,
    z: TokenGrid,
    block_index: usize,
    params: &Bindings,
    backbone: &BackboneConfig,
    cfg: &AdapterConfig,
) -> Result<TokenGrid> {
    cfg.bottleneck(backbone.dim)?;
    let frozen = block_forward(tape, z, block_index, params, backbone)?;
    let prefix = format!("{PREFIX}.{block_index}");
    let adapted = adapter_forward(tape, z, Scope::new(params, &prefix))?;
    let delta = if z.has_cls {
        let patches = tape.slice_rows(adapted.tokens, 1, z.grid_h * z.grid_w)?;
        let zero = tape.constant(Tensor::zeros(&[1, backbone.dim]));
        tape.concat_rows(&[zero, patches])?
    } else {
        adapted.tokens
    };
    if tape.shape(delta) != tape.shape(frozen.tokens) {
        return Err(ModelError::Invariant(format!(
            "adapter branch shape {:?} differs from block shape {:?}",
            tape.shape(delta),
            tape.shape(frozen.tokens)
        )));
    }
    let out = tape.add(frozen.tokens, delta)?;
    Ok(frozen.with_tokens(out))
}
