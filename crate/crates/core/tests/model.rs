mod common;

use common::{check_params, randomize, rng, uniform};
use cvgl_core::aggregator::{AggregatorConfig, KvMode};
use cvgl_core::backbone::BackboneConfig;
use cvgl_core::{describe, init_model, ModelConfig, ModelError};
use cvgl_numerics::{Tape, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image_size: 8,
            patch_size: 4,
            depth: 1,
            dim: 8,
            heads: 2,
            seed: 1,
        },
        aggregator: AggregatorConfig {
            num_queries: 2,
            dim: 8,
            heads: 2,
            num_stages: 3,
            out_dim: 8,
            kv: KvMode::Routed { experts: 3 },
        },
        ..ModelConfig::default()
    }
}

fn image(seed: u64, size: usize) -> Tensor {
    uniform(&mut rng(seed), &[3, size, size], 1.0)
}

#[test]
fn default_model_emits_unit_descriptors() {
    let cfg = ModelConfig::default();
    let store = init_model(&cfg).unwrap();
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let out = describe(&mut tape, &b, &cfg, &image(0, 64), false, &mut rng(0)).unwrap();
    assert_eq!(tape.shape(out.descriptor), &[256]);
    assert!((tape.value(out.descriptor).norm() - 1.0).abs() <= 1e-12);
    assert_eq!(out.assignment.len(), 64);
}

#[test]
fn description_is_deterministic() {
    let cfg = tiny();
    let store = init_model(&cfg).unwrap();
    let run = || {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let out = describe(&mut tape, &b, &cfg, &image(2, 8), true, &mut rng(5)).unwrap();
        tape.value(out.descriptor).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn component_toggles_keep_shared_inits() {
    let full = init_model(&tiny()).unwrap();
    let bare = init_model(&tiny().with_components(false, false, KvMode::Routed { experts: 3 })).unwrap();
    for (name, p) in bare.iter() {
        assert_eq!(p.value.data(), full.tensor(name).unwrap().data(), "{name}");
    }
    assert!(bare.names().all(|n| !n.starts_with("adapter") && !n.starts_with("mscr")));
}

#[test]
fn single_expert_model_equals_dense_model() {
    let routed = tiny().with_components(true, true, KvMode::Routed { experts: 1 });
    let dense = tiny().with_components(true, true, KvMode::Dense);
    let pr = init_model(&routed).unwrap();
    let pd = init_model(&dense).unwrap();
    for seed in 0..10 {
        let mut tape = Tape::new();
        let br = pr.bind(&mut tape);
        let bd = pd.bind(&mut tape);
        let a = describe(&mut tape, &br, &routed, &image(seed, 8), false, &mut rng(0)).unwrap();
        let d = describe(&mut tape, &bd, &dense, &image(seed, 8), false, &mut rng(0)).unwrap();
        assert!(tape.value(a.descriptor).max_abs_diff(tape.value(d.descriptor)) <= 1e-10);
    }
}

#[test]
fn mismatched_widths_are_rejected() {
    let mut cfg = tiny();
    cfg.aggregator.dim = 16;
    assert!(matches!(init_model(&cfg), Err(ModelError::Config(_))));
}

#[test]
fn pipeline_gradcheck_over_trainable_parameters() {
    let cfg = tiny();
    let mut store = init_model(&cfg).unwrap();
    randomize(&mut store, "adapter", 3, 0.4);
    randomize(&mut store, "mscr.sigma", 4, 0.5);
    let names: Vec<String> = store
        .iter()
        .filter(|(n, p)| p.trainable && !n.ends_with("self.bk"))
        .map(|(n, _)| n.to_string())
        .collect();
    let img = image(7, 8);
    let report = check_params(&store, &names, &[], 7, |tape, b, _| {
        let out = describe(tape, b, &cfg, &img, true, &mut rng(11))?;
        Ok(out.descriptor)
    });
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}
