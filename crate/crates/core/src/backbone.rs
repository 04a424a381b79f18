//! Small frozen ViT encoder standing in for a pretrained backbone.

use serde::{Deserialize, Serialize};

use cvgl_numerics::{Bindings, ParameterStore, Scope, Tape, Tensor, Var};

use crate::adapter::{self, AdapterConfig};
use crate::attention::{feed_forward, layer_norm, self_attention};
use crate::error::{ModelError, Result};
use crate::init;

pub const PREFIX: &str = "backbone";
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            depth: 4,
            dim: 64,
            heads: 4,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "{} heads do not divide width {}",
                self.heads, self.dim
            )));
        }
        if self.depth == 0 {
            return Err(ModelError::Config("backbone depth must be positive".into()));
        }
        Ok(())
    }

    /// Patch grid side length.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens plus the CLS token.
    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let hidden = MLP_RATIO * d;
        let embed = self.patch_len() * d + d + d + self.num_tokens() * d;
        let block = 4 * d + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
        embed + self.depth * block + 2 * d
    }
}

/// Token sequence of one image together with its patch-grid layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    /// `[N × D]`
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    pub has_cls: bool,
}

impl TokenGrid {
    pub fn new(tape: &Tape, tokens: Var, grid_h: usize, grid_w: usize, has_cls: bool) -> Result<Self> {
        let shape = tape.shape(tokens);
        let expected = grid_h * grid_w + usize::from(has_cls);
        if shape.len() != 2 || shape[0] != expected {
            return Err(ModelError::Shape(format!(
                "token shape {shape:?} does not match a {grid_h}x{grid_w} grid (cls: {has_cls})"
            )));
        }
        Ok(Self {
            tokens,
            grid_h,
            grid_w,
            has_cls,
        })
    }

    pub fn with_tokens(self, tokens: Var) -> Self {
        Self { tokens, ..self }
    }
}

fn name(parts: &[&str]) -> String {
    parts.join(".")
}

/// Deterministic random init; every parameter is frozen.
pub fn init_backbone(cfg: &BackboneConfig) -> Result<ParameterStore> {
    cfg.validate()?;
    let d = cfg.dim;
    let hidden = MLP_RATIO * d;
    let s = cfg.seed;
    let mut store = ParameterStore::new();
    let mut put = |n: String, t: Tensor| store.insert(n, t, false);

    put(name(&[PREFIX, "patch.w"]), init::fan_in(s, "backbone.patch.w", &[cfg.patch_len(), d], cfg.patch_len()))?;
    put(name(&[PREFIX, "patch.b"]), Tensor::zeros(&[d]))?;
    put(name(&[PREFIX, "cls"]), init::normal(s, "backbone.cls", &[1, d], 0.5))?;
    put(name(&[PREFIX, "pos"]), init::normal(s, "backbone.pos", &[cfg.num_tokens(), d], 0.1))?;
    for l in 0..cfg.depth {
        let p = format!("{PREFIX}.blocks.{l}");
        for ln in ["ln1", "ln2"] {
            put(format!("{p}.{ln}.g"), Tensor::full(&[d], 1.0))?;
            put(format!("{p}.{ln}.b"), Tensor::zeros(&[d]))?;
        }
        for w in ["wq", "wk", "wv", "wo"] {
            let n = format!("{p}.attn.{w}");
            put(n.clone(), init::fan_in(s, &n, &[d, d], d))?;
            put(format!("{p}.attn.b{}", &w[1..]), Tensor::zeros(&[d]))?;
        }
        let n = format!("{p}.ffn.w1");
        put(n.clone(), init::fan_in(s, &n, &[d, hidden], d))?;
        put(format!("{p}.ffn.b1"), Tensor::zeros(&[hidden]))?;
        let n = format!("{p}.ffn.w2");
        put(n.clone(), init::fan_in(s, &n, &[hidden, d], hidden))?;
        put(format!("{p}.ffn.b2"), Tensor::zeros(&[d]))?;
    }
    put(name(&[PREFIX, "norm.g"]), Tensor::full(&[d], 1.0))?;
    put(name(&[PREFIX, "norm.b"]), Tensor::zeros(&[d]))?;
    Ok(store)
}

/// Rearranges a `[3 × H × W]` image into `[P × 3·p·p]` patch rows in
/// row-major grid order.
pub fn patchify(image: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    let size = cfg.image_size;
    if image.shape() != [3, size, size] {
        return Err(ModelError::Shape(format!(
            "expected image of shape [3, {size}, {size}], got {:?}",
            image.shape()
        )));
    }
    let p = cfg.patch_size;
    let g = cfg.grid();
    let row_len = cfg.patch_len();
    let src = image.data();
    let mut out = vec![0.0; g * g * row_len];
    for gi in 0..g {
        for gj in 0..g {
            let row = &mut out[(gi * g + gj) * row_len..(gi * g + gj + 1) * row_len];
            for c in 0..3 {
                for u in 0..p {
                    let start = c * size * size + (gi * p + u) * size + gj * p;
                    row[c * p * p + u * p..c * p * p + (u + 1) * p].copy_from_slice(&src[start..start + p]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![g * g, row_len], out)?)
}

/// Pre-norm transformer block: `h = z + MHSA(LN(z))`, `out = h + FFN(LN(h))`.
pub fn block_forward(
    tape: &mut Tape,
    z: TokenGrid,
    block_index: usize,
    params: &Bindings,
    cfg: &BackboneConfig,
) -> Result<TokenGrid> {
    if block_index >= cfg.depth {
        return Err(ModelError::OutOfRange {
            what: "backbone blocks",
            index: block_index,
            len: cfg.depth,
        });
    }
    let p = format!("{PREFIX}.blocks.{block_index}");
    let x = z.tokens;
    let n1 = layer_norm(tape, x, Scope::new(params, &format!("{p}.ln1")))?;
    let a = self_attention(tape, n1, Scope::new(params, &format!("{p}.attn")), cfg.heads)?;
    let h = tape.add(x, a)?;
    let n2 = layer_norm(tape, h, Scope::new(params, &format!("{p}.ln2")))?;
    let f = feed_forward(tape, n2, Scope::new(params, &format!("{p}.ffn")))?;
    let out = tape.add(h, f)?;
    Ok(z.with_tokens(out))
}

/// Patchify, embed, add positions, run every block (each with an optional
/// parallel adapter) and apply the final layer norm.
pub fn encode(
    tape: &mut Tape,
    image: &Tensor,
    params: &Bindings,
    cfg: &BackboneConfig,
    adapters: Option<&AdapterConfig>,
) -> Result<TokenGrid> {
    let patches = tape.constant(patchify(image, cfg)?);
    let emb = tape.linear(
        patches,
        params.get("backbone.patch.w")?,
        params.get("backbone.patch.b")?,
    )?;
    let seq = tape.concat_rows(&[params.get("backbone.cls")?, emb])?;
    let seq = tape.add(seq, params.get("backbone.pos")?)?;
    let g = cfg.grid();
    let mut z = TokenGrid::new(tape, seq, g, g, true)?;
    for l in 0..cfg.depth {
        z = match adapters {
            Some(acfg) => adapter::adapted_block(tape, z, l, params, cfg, acfg)?,
            None => block_forward(tape, z, l, params, cfg)?,
        };
    }
    let out = layer_norm(tape, z.tokens, Scope::new(params, "backbone.norm"))?;
    Ok(z.with_tokens(out))
}
