//! Central-difference gradient checks of every primitive and module at
//! small sizes, grouped by scope.

use std::fmt;
use std::time::{Duration, Instant};

use cvgl_core::adapter::{adapter_forward, init_adapters, AdapterConfig};
use cvgl_core::aggregator::{aggregate, expert_kv, init_aggregator, stage_forward, AggregatorConfig, KvMode};
use cvgl_core::backbone::{block_forward, init_backbone, BackboneConfig, TokenGrid};
use cvgl_core::loss::symmetric_info_nce;
use cvgl_core::mscr::{init_mscr, mscr_forward, MscrConfig};
use cvgl_numerics::{gradcheck_many, Bindings, ConvMode, NumericsError, ParameterStore, Scope, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HarnessError, Result};

pub const SCOPES: [&str; 7] = ["all", "numerics", "backbone", "adapter", "mscr", "aggregator", "loss"];

const STEP: f64 = 1e-5;
const SEEDS: u64 = 3;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub scope: &'static str,
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<10} {:<28} {:>10.3e} {:>8.0e} {}",
            self.scope,
            self.name,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

type Gen<'a> = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'a;
type Fwd<'a> = dyn Fn(&mut Tape, &Bindings, &[Var]) -> cvgl_numerics::Result<Var> + 'a;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
}

/// Distinct values 0.05 apart in random order, keeping max-style ops away
/// from ties.
fn separated(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).expect("consistent shape")
}

fn randomized(mut store: ParameterStore, prefix: &str, seed: u64, scale: f64) -> ParameterStore {
    let mut r = rng(seed);
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    for n in names {
        let shape = store.tensor(&n).expect("listed name").shape().to_vec();
        store.set(&n, uniform(&mut r, &shape, scale)).expect("same shape");
    }
    store
}

fn lift(e: cvgl_core::ModelError) -> NumericsError {
    NumericsError::Contract(e.to_string())
}

/// Scalarizes with fixed weights of magnitude in [0.5, 1.5].
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> cvgl_numerics::Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let w = Tensor::from_fn(tape.shape(y), |_| {
        let m: f64 = r.random_range(0.5..1.5);
        if r.random::<bool>() { m } else { -m }
    });
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

struct Suite {
    scope: &'static str,
    results: Vec<CaseResult>,
}

impl Suite {
    /// Checks `f` over the named parameters of `store` (others constant)
    /// plus generated inputs, at several seeds.
    fn case(
        &mut self,
        name: &str,
        tolerance: f64,
        store: &ParameterStore,
        params: &[String],
        gen: &Gen<'_>,
        f: &Fwd<'_>,
    ) -> Result<()> {
        let start = Instant::now();
        let mut worst: f64 = 0.0;
        for seed in 0..SEEDS {
            let mut points: Vec<Tensor> = params.iter().map(|n| store.tensor(n).cloned()).collect::<std::result::Result<_, _>>()?;
            points.extend(gen(&mut rng(seed)));
            let report = gradcheck_many(
                |tape, vars| {
                    let mut pairs: Vec<(String, Var)> = params.iter().cloned().zip(vars.iter().copied()).collect();
                    for (n, p) in store.iter() {
                        if !params.iter().any(|q| q == n) {
                            pairs.push((n.to_string(), tape.constant((*p.value).clone())));
                        }
                    }
                    let bindings: Bindings = pairs.into_iter().collect();
                    let y = f(tape, &bindings, &vars[params.len()..])?;
                    weighted(tape, y, seed)
                },
                &points,
                STEP,
            )?;
            worst = worst.max(report.max_rel_err);
        }
        self.results.push(CaseResult {
            scope: self.scope,
            name: name.to_string(),
            max_rel_err: worst,
            tolerance,
            elapsed: start.elapsed(),
        });
        Ok(())
    }

    fn prim(&mut self, name: &str, tolerance: f64, gen: &Gen<'_>, f: &(dyn Fn(&mut Tape, &[Var]) -> cvgl_numerics::Result<Var> + '_)) -> Result<()> {
        self.case(name, tolerance, &ParameterStore::new(), &[], gen, &|t, _, v| f(t, v))
    }
}

fn numerics(s: &mut Suite) -> Result<()> {
    let tol = 1e-6;
    let two: &Gen = &|r| vec![uniform(r, &[3, 4], 1.0), uniform(r, &[3, 4], 1.0)];
    s.prim("add", tol, two, &|t, v| t.add(v[0], v[1]))?;
    s.prim("sub", tol, two, &|t, v| t.sub(v[0], v[1]))?;
    s.prim("mul", tol, two, &|t, v| t.mul(v[0], v[1]))?;
    s.prim("scale", tol, &|r| vec![uniform(r, &[5], 1.0)], &|t, v| Ok(t.scale(v[0], -1.7)))?;
    s.prim("scale_by", tol, &|r| vec![uniform(r, &[2, 3], 1.0), uniform(r, &[1], 2.0)], &|t, v| t.scale_by(v[0], v[1]))?;
    s.prim("exp", tol, &|r| vec![uniform(r, &[6], 2.0)], &|t, v| Ok(t.exp(v[0])))?;
    s.prim("sum", tol, &|r| vec![uniform(r, &[4], 1.0)], &|t, v| {
        let e = t.exp(v[0]);
        Ok(t.sum(e))
    })?;
    s.prim("mean", tol, &|r| vec![uniform(r, &[4, 2], 1.0)], &|t, v| {
        let e = t.exp(v[0]);
        Ok(t.mean(e))
    })?;
    s.prim("matmul", tol, &|r| vec![uniform(r, &[3, 4], 1.0), uniform(r, &[4, 5], 1.0)], &|t, v| t.matmul(v[0], v[1]))?;
    s.prim("transpose", tol, &|r| vec![uniform(r, &[3, 5], 1.0)], &|t, v| t.transpose(v[0]))?;
    s.prim("reshape", tol, &|r| vec![uniform(r, &[2, 6], 1.0)], &|t, v| t.reshape(v[0], &[3, 4]))?;
    s.prim("add_bias", tol, &|r| vec![uniform(r, &[4, 3], 1.0), uniform(r, &[3], 1.0)], &|t, v| t.add_bias(v[0], v[1]))?;
    s.prim(
        "linear",
        tol,
        &|r| vec![uniform(r, &[4, 3], 1.0), uniform(r, &[3, 5], 1.0), uniform(r, &[5], 1.0)],
        &|t, v| t.linear(v[0], v[1], v[2]),
    )?;
    s.prim("softmax", tol, &|r| vec![uniform(r, &[3, 5], 1.0)], &|t, v| t.softmax(v[0]))?;
    s.prim("gelu", tol, &|r| vec![uniform(r, &[8], 3.0)], &|t, v| Ok(t.gelu(v[0])))?;
    s.prim(
        "layer_norm",
        tol,
        &|r| vec![uniform(r, &[3, 6], 2.0), uniform(r, &[6], 1.5), uniform(r, &[6], 1.0)],
        &|t, v| t.layer_norm(v[0], v[1], v[2]),
    )?;
    s.prim("l2_normalize", tol, &|r| vec![uniform(r, &[2, 5], 1.0)], &|t, v| Ok(t.l2_normalize(v[0])))?;
    s.prim("slice_rows", tol, &|r| vec![uniform(r, &[5, 3], 1.0)], &|t, v| t.slice_rows(v[0], 1, 3))?;
    s.prim("slice_cols", tol, &|r| vec![uniform(r, &[3, 6], 1.0)], &|t, v| t.slice_cols(v[0], 2, 3))?;
    s.prim("concat_rows", tol, &|r| vec![uniform(r, &[2, 3], 1.0), uniform(r, &[1, 3], 1.0)], &|t, v| t.concat_rows(v))?;
    s.prim("concat_cols", tol, &|r| vec![uniform(r, &[3, 2], 1.0), uniform(r, &[3, 4], 1.0)], &|t, v| t.concat_cols(v))?;
    s.prim(
        "concat_channels",
        tol,
        &|r| vec![uniform(r, &[2, 1, 3, 3], 1.0), uniform(r, &[2, 2, 3, 3], 1.0)],
        &|t, v| t.concat_channels(v),
    )?;
    s.prim(
        "conv_pointwise",
        tol,
        &|r| vec![uniform(r, &[2, 3, 3, 4], 1.0), uniform(r, &[2, 3], 1.0), uniform(r, &[2], 1.0)],
        &|t, v| t.conv2d(v[0], ConvMode::Pointwise { w: v[1], b: Some(v[2]) }),
    )?;
    s.prim(
        "conv_depthwise",
        tol,
        &|r| vec![uniform(r, &[2, 2, 4, 5], 1.0), uniform(r, &[2, 3, 3], 1.0), uniform(r, &[2], 1.0)],
        &|t, v| t.conv2d(v[0], ConvMode::Depthwise { w: v[1], b: Some(v[2]) }),
    )?;
    s.prim(
        "conv_separable",
        tol,
        &|r| {
            vec![
                uniform(r, &[1, 2, 5, 5], 1.0),
                uniform(r, &[2, 5, 5], 1.0),
                uniform(r, &[2], 1.0),
                uniform(r, &[3, 2], 1.0),
                uniform(r, &[3], 1.0),
            ]
        },
        &|t, v| {
            t.conv2d(
                v[0],
                ConvMode::Separable {
                    dw: v[1],
                    dw_b: Some(v[2]),
                    pw: v[3],
                    pw_b: Some(v[4]),
                },
            )
        },
    )?;
    s.prim("maxpool3x3", tol, &|r| vec![separated(r, &[1, 2, 5, 5])], &|t, v| t.maxpool3x3(v[0]))?;
    s.prim("dropout", tol, &|r| vec![uniform(r, &[40], 1.0)], &|t, v| {
        t.dropout(v[0], 0.3, true, &mut rng(99))
    })?;
    s.prim(
        "sub_channel_broadcast",
        tol,
        &|r| vec![uniform(r, &[2, 3, 2, 2], 1.0), uniform(r, &[2, 1, 2, 2], 1.0)],
        &|t, v| t.sub_channel_broadcast(v[0], v[1]),
    )?;
    s.prim(
        "mul_channel",
        tol,
        &|r| vec![uniform(r, &[2, 3, 2, 2], 1.0), uniform(r, &[3], 1.0)],
        &|t, v| t.mul_channel(v[0], v[1]),
    )?;
    s.prim("top1_mask", tol, &|r| vec![separated(r, &[4, 3])], &|t, v| t.top1_mask(v[0]))?;
    s.prim(
        "route",
        tol,
        &|r| {
            let mut gate = separated(r, &[5, 3]);
            gate.data_mut().iter_mut().for_each(|g| *g += 0.6);
            let mut v = vec![uniform(r, &[5, 4], 1.0), gate];
            v.extend((0..3).map(|_| uniform(r, &[4, 3], 1.0)));
            v.extend((0..3).map(|_| uniform(r, &[3], 1.0)));
            v
        },
        &|t, v| t.route(v[0], v[1], &v[2..5], &v[5..8]),
    )?;
    s.prim("diag_cross_entropy", tol, &|r| vec![uniform(r, &[5, 5], 3.0)], &|t, v| t.diag_cross_entropy(v[0]))?;
    Ok(())
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 12,
        patch_size: 4,
        depth: 2,
        dim: 8,
        heads: 2,
        seed: 3,
    }
}

fn backbone(s: &mut Suite) -> Result<()> {
    let cfg = small_backbone();
    let store = init_backbone(&cfg)?;
    s.case("block_wrt_tokens", 1e-5, &store, &[], &|r| vec![uniform(r, &[10, 8], 1.0)], &|t, b, v| {
        let z = TokenGrid::new(t, v[0], 3, 3, true).map_err(lift)?;
        Ok(block_forward(t, z, 1, b, &cfg).map_err(lift)?.tokens)
    })
}

fn adapter(s: &mut Suite) -> Result<()> {
    let cfg = small_backbone();
    let store = randomized(init_adapters(&cfg, &AdapterConfig::default(), 1)?, "adapter", 5, 0.6);
    let names: Vec<String> = store.names().filter(|n| n.starts_with("adapter.0.")).map(String::from).collect();
    s.case("adapter_params_and_tokens", 1e-5, &store, &names, &|r| vec![uniform(r, &[10, 8], 1.0)], &|t, b, v| {
        let z = TokenGrid::new(t, v[0], 3, 3, true).map_err(lift)?;
        Ok(adapter_forward(t, z, Scope::new(b, "adapter.0")).map_err(lift)?.tokens)
    })
}

fn mscr(s: &mut Suite) -> Result<()> {
    let store = randomized(init_mscr(8, 0)?, "", 6, 0.5);
    let names: Vec<String> = store.names().map(String::from).collect();
    for training in [false, true] {
        let name = if training { "mscr_train_mode" } else { "mscr_eval_mode" };
        s.case(name, 1e-4, &store, &names, &|r| vec![separated(r, &[1, 8, 6, 6])], &move |t, b, v| {
            mscr_forward(t, v[0], b, &MscrConfig::default(), training, &mut rng(17)).map_err(lift)
        })?;
    }
    Ok(())
}

fn aggregator(s: &mut Suite) -> Result<()> {
    let cfg = AggregatorConfig {
        num_queries: 4,
        dim: 8,
        heads: 2,
        num_stages: 3,
        out_dim: 8,
        kv: KvMode::Routed { experts: 3 },
    };
    let store = randomized(init_aggregator(&cfg, 20)?, "aggregator.experts.0.b", 21, 0.2);
    let store = randomized(store, "aggregator.gate", 0, 1.0);
    let expert: Vec<String> = store.names().filter(|n| n.starts_with("aggregator.experts.1.")).map(String::from).collect();
    s.case("expert_kv", 1e-6, &store, &expert, &|r| vec![uniform(r, &[6, 8], 1.0)], &|t, b, v| {
        let (k, val) = expert_kv(t, v[0], b, 1).map_err(lift)?;
        t.concat_cols(&[k, val])
    })?;
    let stage_cfg = cfg.clone();
    s.case(
        "stage_wrt_queries_kv",
        1e-5,
        &store,
        &[],
        &|r| vec![uniform(r, &[4, 8], 1.0), uniform(r, &[6, 8], 1.0), uniform(r, &[6, 8], 1.0)],
        &move |t, b, v| Ok(stage_forward(t, v[0], v[1], v[2], 0, b, &stage_cfg).map_err(lift)?.queries),
    )?;
    // A key bias shared by all keys cancels inside each softmax row; its
    // gradient is identically zero and is left out.
    let all: Vec<String> = store.names().filter(|n| !n.ends_with("self.bk")).map(String::from).collect();
    s.case("aggregator_full", 1e-4, &store, &all, &|r| vec![uniform(r, &[6, 8], 1.0)], &move |t, b, v| {
        Ok(aggregate(t, v[0], b, &cfg).map_err(lift)?.descriptor)
    })
}

fn loss(s: &mut Suite) -> Result<()> {
    s.prim(
        "symmetric_info_nce",
        1e-6,
        &|r| vec![uniform(r, &[5, 5], 1.0), uniform(r, &[1], 1.0)],
        &|t, v| symmetric_info_nce(t, v[0], v[1]).map_err(lift),
    )
}

/// Runs the suites selected by `scope` (one of [`SCOPES`]).
pub fn run(scope: &str) -> Result<Vec<CaseResult>> {
    let suites: Vec<(&'static str, fn(&mut Suite) -> Result<()>)> = vec![
        ("numerics", numerics),
        ("backbone", backbone),
        ("adapter", adapter),
        ("mscr", mscr),
        ("aggregator", aggregator),
        ("loss", loss),
    ];
    if !SCOPES.contains(&scope) {
        return Err(HarnessError::Config(format!(
            "unknown gradcheck scope {scope:?} (expected one of {})",
            SCOPES.join(", ")
        )));
    }
    let mut results = Vec::new();
    for (name, f) in suites {
        if scope == "all" || scope == name {
            let mut s = Suite {
                scope: name,
                results: Vec::new(),
            };
            f(&mut s)?;
            results.extend(s.results);
        }
    }
    Ok(results)
}
