//! Held-out retrieval in both directions.

use std::fmt;
use std::str::FromStr;

use cvgl_core::metrics::{evaluate, RetrievalMetrics};
use cvgl_numerics::{ParameterStore, Tensor};

use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::error::{HarnessError, Result};
use crate::manifest::{Split, ViewKind};
use crate::report::Report;
use crate::train::describe_all;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// View-A queries against the view-B gallery.
    AToB,
    BToA,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::AToB, Direction::BToA];

    pub fn key(self) -> &'static str {
        match self {
            Self::AToB => "a2b",
            Self::BToA => "b2a",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AToB => "A->B",
            Self::BToA => "B->A",
        })
    }
}

impl FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "A->B" | "a2b" | "AB" => Ok(Self::AToB),
            "B->A" | "b2a" | "BA" => Ok(Self::BToA),
            _ => Err(format!("unknown direction {s:?} (expected a2b or b2a)")),
        }
    }
}

/// Descriptors of every held-out image.
#[derive(Clone, Debug)]
pub struct HeldOut {
    pub a_locations: Vec<usize>,
    pub b_locations: Vec<usize>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl HeldOut {
    pub fn encode(store: &ParameterStore, cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        let a_idx = data.indices(Split::Query, ViewKind::A);
        let b_idx = data.indices(Split::Gallery, ViewKind::B);
        if a_idx.is_empty() || b_idx.is_empty() {
            return Err(HarnessError::Config("the dataset has no held-out query or gallery images".into()));
        }
        let model = cfg.model_config();
        let imgs = |idx: &[usize]| idx.iter().map(|&i| &data.images[i]).collect::<Vec<&Tensor>>();
        let loc = |idx: &[usize]| idx.iter().map(|&i| data.manifest.records[i].location).collect::<Vec<_>>();
        Ok(Self {
            a: describe_all(store, &model, &imgs(&a_idx))?,
            b: describe_all(store, &model, &imgs(&b_idx))?,
            a_locations: loc(&a_idx),
            b_locations: loc(&b_idx),
        })
    }

    /// `(query descriptors, query locations, gallery descriptors, gallery locations)`.
    pub fn roles(&self, direction: Direction) -> (&[Vec<f64>], &[usize], &[Vec<f64>], &[usize]) {
        match direction {
            Direction::AToB => (&self.a, &self.a_locations, &self.b, &self.b_locations),
            Direction::BToA => (&self.b, &self.b_locations, &self.a, &self.a_locations),
        }
    }

    pub fn evaluate(&self, direction: Direction, ks: &[usize]) -> Result<Evaluation> {
        let (q, ql, g, gl) = self.roles(direction);
        let scores = similarity_matrix(q, g)?;
        let relevant: Vec<Vec<usize>> = ql
            .iter()
            .map(|l| (0..gl.len()).filter(|&j| gl[j] == *l).collect())
            .collect();
        let chance = relevant.iter().map(|r| r.len() as f64 / gl.len() as f64).sum::<f64>() / ql.len() as f64;
        let ks: Vec<usize> = ks.iter().copied().filter(|&k| k <= gl.len()).collect();
        Ok(Evaluation {
            direction,
            queries: ql.len(),
            gallery: gl.len(),
            chance_r1: chance,
            metrics: evaluate(&scores, &relevant, &ks)?,
        })
    }
}

/// Dot products between every query and gallery row.
pub fn similarity_matrix(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Tensor> {
    let dim = gallery.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(queries.len() * gallery.len());
    for q in queries {
        for g in gallery {
            if q.len() != dim || g.len() != dim {
                return Err(HarnessError::Invariant("descriptors of different widths".into()));
            }
            out.push(q.iter().zip(g).map(|(a, b)| a * b).sum());
        }
    }
    Ok(Tensor::new(vec![queries.len(), gallery.len()], out)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub direction: Direction,
    pub queries: usize,
    pub gallery: usize,
    /// Expected R@1 of a uniformly random ranking.
    pub chance_r1: f64,
    pub metrics: RetrievalMetrics,
}

impl Evaluation {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.metrics.recall.iter().find(|r| r.0 == k).map(|r| r.1)
    }

    pub fn report(&self) -> Report {
        let mut r = Report::new("eval");
        self.write(&mut r, "");
        r
    }

    /// Records under `prefix` (empty for none).
    pub fn write(&self, r: &mut Report, prefix: &str) {
        let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        r.push(key("direction"), self.direction);
        r.push(key("queries"), self.queries);
        r.push(key("gallery"), self.gallery);
        r.push(key("chance_r1"), self.chance_r1);
        for (k, v) in &self.metrics.recall {
            r.push(key(&format!("r@{k}")), v);
        }
        r.push(key("map"), self.metrics.mean_ap);
    }
}

/// Both directions in one report, keys prefixed `a2b.` and `b2a.`.
pub fn evaluate_both(held: &HeldOut, ks: &[usize]) -> Result<(Vec<Evaluation>, Report)> {
    let mut report = Report::new("eval");
    let mut evals = Vec::new();
    for d in Direction::BOTH {
        let e = held.evaluate(d, ks)?;
        e.write(&mut report, d.key());
        evals.push(e);
    }
    Ok((evals, report))
}
