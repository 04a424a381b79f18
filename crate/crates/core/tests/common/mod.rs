#![allow(dead_code)]

use cvgl_core::ModelError;
use cvgl_numerics::{gradcheck_many, Bindings, GradcheckReport, NumericsError, ParameterStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Distinct values spaced 0.05 apart in random order.
pub fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Replaces every parameter whose name starts with `prefix` by random values.
pub fn randomize(store: &mut ParameterStore, prefix: &str, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    for n in names {
        let shape = store.tensor(&n).unwrap().shape().to_vec();
        store.set(&n, uniform(&mut r, &shape, scale)).unwrap();
    }
}

pub fn lift(e: ModelError) -> NumericsError {
    NumericsError::Contract(e.to_string())
}

/// Scalarizes `y` with fixed weights of magnitude in [0.5, 1.5].
pub fn weighted(tape: &mut Tape, y: Var, seed: u64) -> cvgl_numerics::Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let w = Tensor::from_fn(tape.shape(y), |_| {
        let m: f64 = r.random_range(0.5..1.5);
        if r.random::<bool>() { m } else { -m }
    });
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Central-difference check over the named parameters of `store` and the
/// extra `inputs`. Every other parameter enters as a constant.
pub fn check_params<F>(store: &ParameterStore, names: &[String], inputs: &[Tensor], seed: u64, f: F) -> GradcheckReport
where
    F: Fn(&mut Tape, &Bindings, &[Var]) -> cvgl_core::Result<Var>,
{
    let mut points: Vec<Tensor> = names.iter().map(|n| store.tensor(n).unwrap().clone()).collect();
    points.extend(inputs.iter().cloned());
    gradcheck_many(
        |tape, vars| {
            let mut pairs: Vec<(String, Var)> = names.iter().cloned().zip(vars.iter().copied()).collect();
            for (name, p) in store.iter() {
                if !names.iter().any(|n| n == name) {
                    pairs.push((name.to_string(), tape.constant((*p.value).clone())));
                }
            }
            let bindings: Bindings = pairs.into_iter().collect();
            let y = f(tape, &bindings, &vars[names.len()..]).map_err(lift)?;
            weighted(tape, y, seed)
        },
        &points,
        STEP,
    )
    .unwrap()
}

pub fn names_with(store: &ParameterStore, prefix: &str) -> Vec<String> {
    store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect()
}
