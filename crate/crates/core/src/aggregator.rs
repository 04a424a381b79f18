//! Bag-of-queries aggregation with top-1 routed key/value experts.
//!
//! A bank of learnable queries is refined by three stages of
//! self-attention, cross-attention against the routed keys/values and a
//! feed-forward layer (each followed by residual + layer norm). The stage
//! outputs are concatenated, projected and L2-normalized.

use serde::{Deserialize, Serialize};

use cvgl_numerics::{argmax_first, Bindings, ParameterStore, Scope, Tape, Tensor, Var};

use crate::attention::{attend, feed_forward, layer_norm};
use crate::error::{ModelError, Result};
use crate::init;

pub const PREFIX: &str = "aggregator";
pub const FFN_RATIO: usize = 4;

/// How keys and values are produced from the input tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KvMode {
    /// One shared projection, no gate.
    Dense,
    /// `experts` projections mixed by a sparse top-1 gate.
    Routed { experts: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub num_queries: usize,
    pub dim: usize,
    pub heads: usize,
    pub num_stages: usize,
    pub out_dim: usize,
    pub kv: KvMode,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            num_queries: 32,
            dim: 64,
            heads: 4,
            num_stages: 3,
            out_dim: 256,
            kv: KvMode::Routed { experts: 3 },
        }
    }
}

impl AggregatorConfig {
    pub fn experts(&self) -> usize {
        match self.kv {
            KvMode::Dense => 1,
            KvMode::Routed { experts } => experts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts() == 0 {
            return Err(ModelError::Config("expert count must be at least 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "{} heads do not divide width {}",
                self.heads, self.dim
            )));
        }
        if self.num_queries == 0 || self.num_stages == 0 || self.out_dim == 0 {
            return Err(ModelError::Config(
                "query count, stage count and output width must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn concat_dim(&self) -> usize {
        self.num_stages * self.num_queries * self.dim
    }
}

pub fn init_aggregator(cfg: &AggregatorConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let d = cfg.dim;
    let hidden = FFN_RATIO * d;
    let mut store = ParameterStore::new();
    let weight = |store: &mut ParameterStore, name: String, shape: &[usize], fan: usize| {
        let t = init::fan_in(seed, &name, shape, fan);
        store.insert(name, t, true)
    };

    let n = format!("{PREFIX}.queries");
    store.insert(n.clone(), init::normal(seed, &n, &[cfg.num_queries, d], 1.0), true)?;
    if let KvMode::Routed { experts } = cfg.kv {
        weight(&mut store, format!("{PREFIX}.gate.w"), &[d, experts], d)?;
        store.insert(format!("{PREFIX}.gate.b"), Tensor::zeros(&[experts]), true)?;
    }
    for e in 0..cfg.experts() {
        let p = format!("{PREFIX}.experts.{e}");
        weight(&mut store, format!("{p}.wk"), &[d, d], d)?;
        store.insert(format!("{p}.bk"), Tensor::zeros(&[d]), true)?;
        weight(&mut store, format!("{p}.wv"), &[d, d], d)?;
        store.insert(format!("{p}.bv"), Tensor::zeros(&[d]), true)?;
    }
    for s in 0..cfg.num_stages {
        let p = format!("{PREFIX}.stages.{s}");
        for w in ["wq", "wk", "wv", "wo"] {
            weight(&mut store, format!("{p}.self.{w}"), &[d, d], d)?;
            store.insert(format!("{p}.self.b{}", &w[1..]), Tensor::zeros(&[d]), true)?;
        }
        for w in ["wq", "wo"] {
            weight(&mut store, format!("{p}.cross.{w}"), &[d, d], d)?;
            store.insert(format!("{p}.cross.b{}", &w[1..]), Tensor::zeros(&[d]), true)?;
        }
        weight(&mut store, format!("{p}.ffn.w1"), &[d, hidden], d)?;
        store.insert(format!("{p}.ffn.b1"), Tensor::zeros(&[hidden]), true)?;
        weight(&mut store, format!("{p}.ffn.w2"), &[hidden, d], hidden)?;
        store.insert(format!("{p}.ffn.b2"), Tensor::zeros(&[d]), true)?;
        for norm in ["self_norm", "cross_norm", "ffn_norm"] {
            store.insert(format!("{p}.{norm}.g"), Tensor::full(&[d], 1.0), true)?;
            store.insert(format!("{p}.{norm}.b"), Tensor::zeros(&[d]), true)?;
        }
    }
    weight(&mut store, format!("{PREFIX}.head.w"), &[cfg.concat_dim(), cfg.out_dim], cfg.concat_dim())?;
    store.insert(format!("{PREFIX}.head.b"), Tensor::zeros(&[cfg.out_dim]), true)?;
    Ok(store)
}

fn check_tokens(tape: &Tape, x: Var, dim: usize) -> Result<usize> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != dim {
        return Err(ModelError::Shape(format!("expected [N, {dim}] tokens, got {shape:?}")));
    }
    if shape[0] == 0 {
        return Err(ModelError::EmptyInput("aggregation needs at least one token".into()));
    }
    Ok(shape[0])
}

/// Dense softmax routing distribution `[N × E]` before top-1 selection.
pub fn gate_probs(tape: &mut Tape, x: Var, params: &Bindings) -> Result<Var> {
    let logits = tape.linear(
        x,
        params.get(&format!("{PREFIX}.gate.w"))?,
        params.get(&format!("{PREFIX}.gate.b"))?,
    )?;
    Ok(tape.softmax(logits)?)
}

/// Sparse top-1 gate: the softmax value of each token's best expert is
/// kept as is and every other entry is zeroed. Ties go to the lowest index.
pub fn gate(tape: &mut Tape, x: Var, params: &Bindings) -> Result<Var> {
    let probs = gate_probs(tape, x, params)?;
    Ok(tape.top1_mask(probs)?)
}

/// `(K_e, V_e) = (X·Wk_e + bk_e, X·Wv_e + bv_e)`.
pub fn expert_kv(tape: &mut Tape, x: Var, params: &Bindings, expert: usize) -> Result<(Var, Var)> {
    let prefix = format!("{PREFIX}.experts.{expert}");
    let s = Scope::new(params, &prefix);
    let k = tape.linear(x, s.get("wk")?, s.get("bk")?)?;
    let v = tape.linear(x, s.get("wv")?, s.get("bv")?)?;
    Ok((k, v))
}

fn expert_vars(params: &Bindings, experts: usize, w: &str, b: &str) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut ws = Vec::with_capacity(experts);
    let mut bs = Vec::with_capacity(experts);
    for e in 0..experts {
        ws.push(params.get(&format!("{PREFIX}.experts.{e}.{w}"))?);
        bs.push(params.get(&format!("{PREFIX}.experts.{e}.{b}"))?);
    }
    Ok((ws, bs))
}

/// Sparse mixture `K = Σ_e g_e ⊙ K_e`, `V = Σ_e g_e ⊙ V_e`, evaluating only
/// the selected expert for each token.
pub fn route_kv(tape: &mut Tape, x: Var, gate: Var, params: &Bindings) -> Result<(Var, Var)> {
    let experts = tape.shape(gate)[1];
    let (wk, bk) = expert_vars(params, experts, "wk", "bk")?;
    let (wv, bv) = expert_vars(params, experts, "wv", "bv")?;
    let k = tape.route(x, gate, &wk, &bk)?;
    let v = tape.route(x, gate, &wv, &bv)?;
    Ok((k, v))
}

/// The same mixture evaluated densely over every expert.
pub fn route_kv_dense(tape: &mut Tape, x: Var, gate: Var, params: &Bindings) -> Result<(Var, Var)> {
    let [n, experts] = [tape.shape(gate)[0], tape.shape(gate)[1]];
    let dim = tape.shape(x)[1];
    let ones = tape.constant(Tensor::full(&[1, dim], 1.0));
    let mut k_acc: Option<Var> = None;
    let mut v_acc: Option<Var> = None;
    for e in 0..experts {
        let (ke, ve) = expert_kv(tape, x, params, e)?;
        let col = tape.slice_cols(gate, e, 1)?;
        let g = tape.matmul(col, ones)?;
        debug_assert_eq!(tape.shape(g), &[n, dim]);
        let gk = tape.mul(g, ke)?;
        let gv = tape.mul(g, ve)?;
        k_acc = Some(match k_acc {
            Some(acc) => tape.add(acc, gk)?,
            None => gk,
        });
        v_acc = Some(match v_acc {
            Some(acc) => tape.add(acc, gv)?,
            None => gv,
        });
    }
    Ok((k_acc.expect("experts ≥ 1"), v_acc.expect("experts ≥ 1")))
}

/// Keys/values for the configured mode, plus the per-token expert index.
pub fn keys_values(
    tape: &mut Tape,
    x: Var,
    params: &Bindings,
    cfg: &AggregatorConfig,
) -> Result<(Var, Var, Vec<usize>)> {
    let n = check_tokens(tape, x, cfg.dim)?;
    match cfg.kv {
        KvMode::Dense => {
            let (k, v) = expert_kv(tape, x, params, 0)?;
            Ok((k, v, vec![0; n]))
        }
        KvMode::Routed { .. } => {
            let g = gate(tape, x, params)?;
            let assignment = tape
                .value(g)
                .data()
                .chunks_exact(cfg.experts())
                .map(argmax_first)
                .collect();
            let (k, v) = route_kv(tape, x, g, params)?;
            Ok((k, v, assignment))
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub queries: Var,
    pub self_attn: Vec<Var>,
    pub cross_attn: Vec<Var>,
}

/// One refinement stage under `aggregator.stages.{index}`.
pub fn stage_forward(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    values: Var,
    index: usize,
    params: &Bindings,
    cfg: &AggregatorConfig,
) -> Result<StageOutput> {
    let p = format!("{PREFIX}.stages.{index}");
    let sc = |suffix: &str| format!("{p}.{suffix}");

    let self_prefix = sc("self");
    let self_scope = Scope::new(params, &self_prefix);
    let q = tape.linear(queries, self_scope.get("wq")?, self_scope.get("bq")?)?;
    let k = tape.linear(queries, self_scope.get("wk")?, self_scope.get("bk")?)?;
    let v = tape.linear(queries, self_scope.get("wv")?, self_scope.get("bv")?)?;
    let (o, self_attn) = attend(tape, q, k, v, cfg.heads)?;
    let o = tape.linear(o, self_scope.get("wo")?, self_scope.get("bo")?)?;
    let h = tape.add(queries, o)?;
    let h = layer_norm(tape, h, Scope::new(params, &sc("self_norm")))?;

    let cross_prefix = sc("cross");
    let cross = Scope::new(params, &cross_prefix);
    let q = tape.linear(h, cross.get("wq")?, cross.get("bq")?)?;
    let (o, cross_attn) = attend(tape, q, keys, values, cfg.heads)?;
    let o = tape.linear(o, cross.get("wo")?, cross.get("bo")?)?;
    let h2 = tape.add(h, o)?;
    let h2 = layer_norm(tape, h2, Scope::new(params, &sc("cross_norm")))?;

    let f = feed_forward(tape, h2, Scope::new(params, &sc("ffn")))?;
    let h3 = tape.add(h2, f)?;
    let out = layer_norm(tape, h3, Scope::new(params, &sc("ffn_norm")))?;
    Ok(StageOutput {
        queries: out,
        self_attn,
        cross_attn,
    })
}

#[derive(Clone, Debug)]
pub struct AggregateOutput {
    /// `[out_dim]`, unit norm.
    pub descriptor: Var,
    /// Expert chosen for each input token.
    pub assignment: Vec<usize>,
}

/// Routes keys/values once, refines the query bank through every stage and
/// projects the concatenated stage outputs to a unit-norm descriptor.
pub fn aggregate(tape: &mut Tape, x: Var, params: &Bindings, cfg: &AggregatorConfig) -> Result<AggregateOutput> {
    cfg.validate()?;
    let (keys, values, assignment) = keys_values(tape, x, params, cfg)?;
    let descriptor = aggregate_from_kv(tape, keys, values, params, cfg)?;
    Ok(AggregateOutput { descriptor, assignment })
}

/// Query refinement and descriptor head for precomputed keys and values.
pub fn aggregate_from_kv(
    tape: &mut Tape,
    keys: Var,
    values: Var,
    params: &Bindings,
    cfg: &AggregatorConfig,
) -> Result<Var> {
    let mut queries = params.get(&format!("{PREFIX}.queries"))?;
    let mut outs = Vec::with_capacity(cfg.num_stages);
    for s in 0..cfg.num_stages {
        queries = stage_forward(tape, queries, keys, values, s, params, cfg)?.queries;
        outs.push(tape.reshape(queries, &[1, cfg.num_queries * cfg.dim])?);
    }
    let cat = tape.concat_cols(&outs)?;
    let proj = tape.linear(
        cat,
        params.get(&format!("{PREFIX}.head.w"))?,
        params.get(&format!("{PREFIX}.head.b"))?,
    )?;
    let unit = tape.l2_normalize(proj);
    Ok(tape.reshape(unit, &[cfg.out_dim])?)
}

