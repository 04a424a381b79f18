//! Retrieval metrics over a query × gallery similarity matrix.
//!
//! Gallery items are ranked by descending similarity; equal scores are
//! ordered by ascending gallery index.

use serde::{Deserialize, Serialize};

use cvgl_numerics::Tensor;

use crate::error::{ModelError, Result};

fn check_instance(scores: &Tensor, relevant: &[Vec<usize>]) -> Result<(usize, usize)> {
    let shape = scores.shape();
    if shape.len() != 2 {
        return Err(ModelError::Shape(format!("expected [Q, G] scores, got {shape:?}")));
    }
    let (q, g) = (shape[0], shape[1]);
    if relevant.len() != q {
        return Err(ModelError::Shape(format!(
            "{q} queries but {} ground-truth lists",
            relevant.len()
        )));
    }
    for (i, rel) in relevant.iter().enumerate() {
        if rel.is_empty() {
            return Err(ModelError::Config(format!("query {i} has no relevant gallery item")));
        }
        if let Some(&bad) = rel.iter().find(|&&j| j >= g) {
            return Err(ModelError::OutOfRange {
                what: "gallery",
                index: bad,
                len: g,
            });
        }
    }
    Ok((q, g))
}

/// Gallery indices in rank order.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Zero-based rank of gallery item `j` without sorting.
fn rank_of(scores: &[f64], j: usize) -> usize {
    let s = scores[j];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, v)| {
            let ord = v.total_cmp(&s);
            ord.is_gt() || (ord.is_eq() && i < j)
        })
        .count()
}

/// Fraction of queries with at least one relevant item in the top `k`.
pub fn recall_at_k(scores: &Tensor, relevant: &[Vec<usize>], k: usize) -> Result<f64> {
    let (q, g) = check_instance(scores, relevant)?;
    if k < 1 || k > g {
        return Err(ModelError::Config(format!("k = {k} outside 1..={g}")));
    }
    let hits = scores
        .data()
        .chunks_exact(g)
        .zip(relevant)
        .filter(|(row, rel)| rel.iter().map(|&j| rank_of(row, j)).min().unwrap_or(usize::MAX) < k)
        .count();
    Ok(hits as f64 / q as f64)
}

/// Mean over relevant positions of precision at that position.
pub fn average_precision(flags: &[bool]) -> Result<f64> {
    let total = flags.iter().filter(|&&f| f).count();
    if total == 0 {
        return Err(ModelError::UndefinedAp);
    }
    let mut seen = 0usize;
    let mut acc = 0.0;
    for (i, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        seen += 1;
        acc += seen as f64 / (i + 1) as f64;
    }
    Ok(acc / total as f64)
}

/// Relevance flags of one query's gallery in rank order.
pub fn ranked_flags(scores: &[f64], relevant: &[usize]) -> Vec<bool> {
    let mut is_rel = vec![false; scores.len()];
    for &j in relevant {
        is_rel[j] = true;
    }
    ranking(scores).into_iter().map(|j| is_rel[j]).collect()
}

pub fn mean_average_precision(scores: &Tensor, relevant: &[Vec<usize>]) -> Result<f64> {
    let (q, g) = check_instance(scores, relevant)?;
    let mut total = 0.0;
    for (row, rel) in scores.data().chunks_exact(g).zip(relevant) {
        total += average_precision(&ranked_flags(row, rel))?;
    }
    Ok(total / q as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall: Vec<(usize, f64)>,
    pub mean_ap: f64,
}

pub fn evaluate(scores: &Tensor, relevant: &[Vec<usize>], ks: &[usize]) -> Result<RetrievalMetrics> {
    let recall = ks
        .iter()
        .map(|&k| recall_at_k(scores, relevant, k).map(|r| (k, r)))
        .collect::<Result<_>>()?;
    Ok(RetrievalMetrics {
        recall,
        mean_ap: mean_average_precision(scores, relevant)?,
    })
}
