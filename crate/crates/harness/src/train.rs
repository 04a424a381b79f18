//! Two-branch contrastive training: both views of each location go through
//! the same network, and the symmetric InfoNCE over the batch drives Adam.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use cvgl_core::loss::{similarity, symmetric_info_nce, LOG_INV_TAU};
use cvgl_core::{describe, init_model, ModelConfig};
use cvgl_numerics::{Bindings, ParameterStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{namespace_hash, Checkpoint, RngState};
use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::error::{HarnessError, Result};
use crate::optim::{cosine_lr, Adam};

const TRAIN_STREAM: u64 = 0x7472_6169_6e;

/// Forward state of one image, kept until its backward pass.
pub struct ImagePass {
    pub tape: Tape,
    pub bindings: Bindings,
    pub descriptor: Var,
    pub assignment: Vec<usize>,
}

pub fn image_pass(
    store: &ParameterStore,
    cfg: &ModelConfig,
    image: &Tensor,
    training: bool,
    seed: u64,
) -> Result<ImagePass> {
    let mut tape = Tape::new();
    let bindings = store.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = describe(&mut tape, &bindings, cfg, image, training, &mut rng)?;
    Ok(ImagePass {
        tape,
        bindings,
        descriptor: out.descriptor,
        assignment: out.assignment,
    })
}

/// Inference descriptors, one per image, computed in parallel.
pub fn describe_all(store: &ParameterStore, cfg: &ModelConfig, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .map(|img| {
            let pass = image_pass(store, cfg, img, false, 0)?;
            Ok(pass.tape.value(pass.descriptor).data().to_vec())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    /// Tokens routed to each expert over the epoch.
    pub expert_counts: Vec<usize>,
    pub wall_ms: u128,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let total: usize = self.expert_counts.iter().sum::<usize>().max(1);
        let hist: Vec<String> = self
            .expert_counts
            .iter()
            .map(|&c| format!("{:.3}", c as f64 / total as f64))
            .collect();
        write!(
            f,
            "epoch={} loss={:.6} lr={:.6} tau={:.5} experts=[{}] wall_ms={}",
            self.epoch,
            self.loss,
            self.lr,
            self.tau,
            hist.join(","),
            self.wall_ms
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub backbone_hash: String,
}

/// Freshly initialized model, optimizer and RNG for `cfg`.
pub fn init_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    Ok(Checkpoint {
        config: cfg.clone(),
        epoch: 0,
        rng: RngState::capture(&rng),
        params: init_model(&cfg.model_config())?,
        optimizer: Adam::new(),
    })
}

/// Location pairs of one training set: every A-view and B-view record
/// index per location.
type Pairs = [(usize, Vec<usize>, Vec<usize>)];

/// Views per location usable in round `r` of an epoch.
fn round_sizes(pairs: &Pairs) -> Vec<usize> {
    let rounds = pairs.iter().map(|p| p.1.len()).max().unwrap_or(0);
    (0..rounds).map(|r| pairs.iter().filter(|p| p.1.len() > r).count()).collect()
}

fn chunks_in(n: usize, batch: usize) -> usize {
    n / batch + usize::from(n % batch >= 2)
}

fn batches_per_epoch(pairs: &Pairs, batch: usize) -> usize {
    round_sizes(pairs).into_iter().map(|n| chunks_in(n, batch)).sum()
}

/// One epoch of `(A image, B image)` record pairs in batches. Every A-view
/// appears once. Round `r` draws the `r`-th view of each location after a
/// per-location shuffle, and batches never cross rounds, so a batch never
/// holds one location twice. Chunks smaller than two are dropped.
fn epoch_batches(pairs: &Pairs, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize)>> {
    let views: Vec<Vec<usize>> = pairs
        .iter()
        .map(|(_, a, _)| {
            let mut a = a.clone();
            a.shuffle(rng);
            a
        })
        .collect();
    let mut out = Vec::new();
    for r in 0..round_sizes(pairs).len() {
        let mut order: Vec<usize> = (0..pairs.len()).filter(|&i| views[i].len() > r).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            out.push(
                chunk
                    .iter()
                    .map(|&i| {
                        let b = &pairs[i].2;
                        (views[i][r], b[rng.random_range(0..b.len())])
                    })
                    .collect(),
            );
        }
    }
    out
}

/// One optimizer step on a batch of (A image, B image) pairs. Returns the
/// loss and the expert assignments of every token.
fn train_step(
    store: &mut ParameterStore,
    adam: &mut Adam,
    cfg: &ModelConfig,
    pairs: &[(&Tensor, &Tensor)],
    seeds: &[u64],
    lr: f64,
) -> Result<(f64, Vec<usize>)> {
    let images: Vec<&Tensor> = pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect();
    let frozen: &ParameterStore = store;
    let passes: Vec<ImagePass> = images
        .par_iter()
        .zip(seeds)
        .map(|(img, &seed)| image_pass(frozen, cfg, img, true, seed))
        .collect::<Result<_>>()?;

    let b = pairs.len();
    let dim = cfg.aggregator.out_dim;
    let stack = |range: std::ops::Range<usize>| -> Result<Tensor> {
        let data: Vec<f64> = passes[range].iter().flat_map(|p| p.tape.value(p.descriptor).data().to_vec()).collect();
        Ok(Tensor::new(vec![b, dim], data)?)
    };
    let mut lt = Tape::new();
    let qa = lt.var(stack(0..b)?);
    let rb = lt.var(stack(b..2 * b)?);
    let tau = lt.var(store.tensor(LOG_INV_TAU)?.clone());
    let s = similarity(&mut lt, qa, rb)?;
    let loss = symmetric_info_nce(&mut lt, s, tau)?;
    lt.backward(loss)?;
    let loss_value = lt.value(loss).item();
    let missing = || HarnessError::Invariant("loss tape produced no descriptor gradient".into());
    let ga = lt.grad(qa).ok_or_else(missing)?;
    let gb = lt.grad(rb).ok_or_else(missing)?;
    let seeds_out: Vec<Tensor> = ga
        .data()
        .chunks_exact(dim)
        .chain(gb.data().chunks_exact(dim))
        .map(|row| Tensor::new(vec![dim], row.to_vec()))
        .collect::<std::result::Result<_, _>>()?;

    // Backward in groups of one image per worker; the sum runs in image
    // order so the result does not depend on the thread count.
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut assignments = Vec::new();
    let group = rayon::current_num_threads().max(1);
    let mut work = passes.into_iter().zip(seeds_out);
    loop {
        let chunk: Vec<(ImagePass, Tensor)> = work.by_ref().take(group).collect();
        if chunk.is_empty() {
            break;
        }
        let per_image: Vec<(BTreeMap<String, Tensor>, Vec<usize>)> = chunk
            .into_par_iter()
            .map(|(mut p, g)| {
                p.tape.backward_with(p.descriptor, &g)?;
                Ok((p.bindings.grads(&p.tape), p.assignment))
            })
            .collect::<Result<_>>()?;
        for (g, a) in per_image {
            assignments.extend(a);
            for (name, t) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, v)| *a += v),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
    }
    if store.get(LOG_INV_TAU).is_some_and(|p| p.trainable) {
        grads.insert(LOG_INV_TAU.to_string(), lt.grad(tau).ok_or_else(missing)?);
    }
    adam.update(store, &grads, lr)?;
    Ok((loss_value, assignments))
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, data: &Dataset, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    train_from(init_checkpoint(cfg)?, data, on_epoch)
}

/// Continues `ckpt` until its configured epoch count.
pub fn train_from(ckpt: Checkpoint, data: &Dataset, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let stop = ckpt.config.epochs;
    train_until(ckpt, data, stop, on_epoch)
}

/// Like [`train_from`] but returns once `stop` epochs are complete. The
/// learning-rate schedule still spans the configured epoch count, so a run
/// split at any epoch ends in the same state as an uninterrupted one.
pub fn train_until(
    mut ckpt: Checkpoint,
    data: &Dataset,
    stop: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let cfg = ckpt.config.clone();
    cfg.validate()?;
    if data.manifest.image_size != cfg.image_size {
        return Err(HarnessError::Config(format!(
            "dataset images are {}px but the config expects {}px",
            data.manifest.image_size, cfg.image_size
        )));
    }
    let pairs = data.train_pairs();
    if pairs.len() < 2 {
        return Err(HarnessError::Config("training needs at least two locations".into()));
    }
    let model = cfg.model_config();
    let backbone_hash = namespace_hash(&ckpt.params, "backbone");
    let per_epoch = batches_per_epoch(&pairs, cfg.batch_size);
    let total_steps = (per_epoch * cfg.epochs) as u64;
    let mut rng = ckpt.rng.restore();
    let mut log = Vec::new();

    while (ckpt.epoch as usize) < stop.min(cfg.epochs) {
        let start = Instant::now();
        let mut counts = vec![0usize; model.aggregator.experts()];
        let (mut loss_sum, mut steps, mut lr) = (0.0, 0usize, 0.0);
        for chunk in epoch_batches(&pairs, cfg.batch_size, &mut rng) {
            let batch: Vec<(&Tensor, &Tensor)> =
                chunk.iter().map(|&(a, b)| (&data.images[a], &data.images[b])).collect();
            let seeds: Vec<u64> = (0..2 * batch.len()).map(|_| rng.random()).collect();
            lr = cosine_lr(cfg.lr, ckpt.optimizer.step, total_steps);
            let (loss, assignment) = train_step(&mut ckpt.params, &mut ckpt.optimizer, &model, &batch, &seeds, lr)?;
            if !loss.is_finite() {
                return Err(HarnessError::Invariant(format!("non-finite loss at epoch {}", ckpt.epoch + 1)));
            }
            for e in assignment {
                counts[e] += 1;
            }
            loss_sum += loss;
            steps += 1;
        }
        ckpt.epoch += 1;
        ckpt.rng = RngState::capture(&rng);
        let tau = (-ckpt.params.tensor(LOG_INV_TAU)?.data()[0]).exp();
        let entry = EpochLog {
            epoch: ckpt.epoch,
            loss: loss_sum / steps.max(1) as f64,
            lr,
            tau,
            expert_counts: counts,
            wall_ms: start.elapsed().as_millis(),
        };
        on_epoch(&entry);
        log.push(entry);
    }

    if namespace_hash(&ckpt.params, "backbone") != backbone_hash {
        return Err(HarnessError::Invariant("frozen backbone changed during training".into()));
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
        backbone_hash,
    })
}
