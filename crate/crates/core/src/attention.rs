use cvgl_numerics::{Scope, Tape, Var};

use crate::error::{ModelError, Result};

/// Scaled dot-product attention over already-projected queries, keys and
/// values, split into `heads` column blocks. Returns the concatenated head
/// outputs and the per-head attention matrices.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let dim = tape.shape(q)[1];
    if heads == 0 || dim % heads != 0 {
        return Err(ModelError::Config(format!("{heads} heads do not divide width {dim}")));
    }
    let d = dim / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * d, d)?,
                tape.slice_cols(k, h * d, d)?,
                tape.slice_cols(v, h * d, d)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax(logits)?;
        outs.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, weights))
}

/// Multi-head attention with its own q/k/v/o projections under `scope`
/// (`wq bq wk bk wv bv wo bo`).
pub fn self_attention(tape: &mut Tape, x: Var, scope: Scope<'_>, heads: usize) -> Result<Var> {
    let q = tape.linear(x, scope.get("wq")?, scope.get("bq")?)?;
    let k = tape.linear(x, scope.get("wk")?, scope.get("bk")?)?;
    let v = tape.linear(x, scope.get("wv")?, scope.get("bv")?)?;
    let (o, _) = attend(tape, q, k, v, heads)?;
    Ok(tape.linear(o, scope.get("wo")?, scope.get("bo")?)?)
}

/// Two-layer GELU feed-forward (`w1 b1 w2 b2`).
pub fn feed_forward(tape: &mut Tape, x: Var, scope: Scope<'_>) -> Result<Var> {
    let h = tape.linear(x, scope.get("w1")?, scope.get("b1")?)?;
    let h = tape.gelu(h);
    Ok(tape.linear(h, scope.get("w2")?, scope.get("b2")?)?)
}

pub fn layer_norm(tape: &mut Tape, x: Var, scope: Scope<'_>) -> Result<Var> {
    Ok(tape.layer_norm(x, scope.get("g")?, scope.get("b")?)?)
}
