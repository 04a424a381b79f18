//! Trains and evaluates a grid of model variants with a shared seed and
//! collects them in one table.

use std::fmt;

use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate_both, Direction, HeldOut};
use crate::report::Report;
use crate::train::train;

/// Cells: the dense baseline plus one routed variant per expert count, each
/// with and without MSCR as requested.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub base: TrainConfig,
    pub experts: Vec<usize>,
    pub mscr: Vec<bool>,
    pub include_dense: bool,
}

impl Grid {
    pub fn standard(base: TrainConfig) -> Self {
        Self {
            base,
            experts: vec![1, 3, 5],
            mscr: vec![true, false],
            include_dense: true,
        }
    }

    pub fn cells(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &use_mscr in &self.mscr {
            if self.include_dense {
                out.push(TrainConfig {
                    use_moe: false,
                    use_mscr,
                    ..self.base.clone()
                });
            }
            for &experts in &self.experts {
                out.push(TrainConfig {
                    use_moe: true,
                    experts,
                    use_mscr,
                    ..self.base.clone()
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub config: TrainConfig,
    pub final_loss: f64,
    /// `(R@1, mAP)` for A→B then B→A.
    pub a2b: (f64, f64),
    pub b2a: (f64, f64),
}

impl Row {
    fn metrics(&self) -> [f64; 4] {
        [self.a2b.0, self.a2b.1, self.b2a.0, self.b2a.1]
    }
}

/// Outcome of comparing one ordering reported for the full-scale model.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderingCheck {
    pub name: &'static str,
    pub expected: &'static str,
    pub agrees: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub rows: Vec<Row>,
    pub orderings: Vec<OrderingCheck>,
    /// Whether every E=1 row has exactly the metrics of its dense twin;
    /// `None` when the grid holds no such pair.
    pub e1_matches_dense: Option<bool>,
}

impl Table {
    fn find(&self, use_moe: bool, experts: usize, use_mscr: bool) -> Option<&Row> {
        self.rows.iter().find(|r| {
            r.config.use_moe == use_moe && (!use_moe || r.config.experts == experts) && r.config.use_mscr == use_mscr
        })
    }

    fn build(rows: Vec<Row>) -> Self {
        let mut t = Self {
            rows,
            orderings: Vec::new(),
            e1_matches_dense: None,
        };
        let mscr = t.rows.first().is_some_and(|r| r.config.use_mscr);
        let r1 = |r: &Row| r.a2b.0;
        let e3 = t.find(true, 3, mscr).map(r1);
        let moe_vs_dense = match (e3, t.find(false, 0, mscr).map(r1)) {
            (Some(m), Some(d)) => Some(m > d),
            _ => None,
        };
        let others: Vec<f64> = t
            .rows
            .iter()
            .filter(|r| r.config.use_moe && r.config.experts != 3 && r.config.use_mscr == mscr)
            .map(r1)
            .collect();
        let e3_best = e3.filter(|_| !others.is_empty()).map(|v| others.iter().all(|&o| v >= o));
        t.orderings = vec![
            OrderingCheck {
                name: "moe_over_dense",
                expected: "routed E=3 beats the dense baseline on A->B R@1",
                agrees: moe_vs_dense,
            },
            OrderingCheck {
                name: "e3_best",
                expected: "E=3 has the highest A->B R@1 among expert counts",
                agrees: e3_best,
            },
        ];
        let pairs: Vec<bool> = t
            .rows
            .iter()
            .filter(|r| r.config.use_moe && r.config.experts == 1)
            .filter_map(|r| t.find(false, 0, r.config.use_mscr).map(|d| d.metrics() == r.metrics()))
            .collect();
        t.e1_matches_dense = (!pairs.is_empty()).then(|| pairs.iter().all(|&b| b));
        t
    }

    pub fn report(&self) -> Report {
        let mut r = Report::new("ablate");
        r.push("rows", self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            let p = format!("row.{i}");
            r.push(format!("{p}.label"), row.config.label());
            r.push(format!("{p}.final_loss"), row.final_loss);
            r.push(format!("{p}.a2b.r@1"), row.a2b.0);
            r.push(format!("{p}.a2b.map"), row.a2b.1);
            r.push(format!("{p}.b2a.r@1"), row.b2a.0);
            r.push(format!("{p}.b2a.map"), row.b2a.1);
        }
        for o in &self.orderings {
            r.push(format!("ordering.{}", o.name), agreement(o.agrees));
        }
        r.push("e1_matches_dense", agreement(self.e1_matches_dense));
        r
    }
}

fn agreement(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "agrees",
        Some(false) => "disagrees",
        None => "n/a",
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>10} {:>9} {:>9} {:>9} {:>9}",
            "config", "loss", "A->B R@1", "A->B AP", "B->A R@1", "B->A AP"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<24} {:>10.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                r.config.label(),
                r.final_loss,
                r.a2b.0,
                r.a2b.1,
                r.b2a.0,
                r.b2a.1
            )?;
        }
        for o in &self.orderings {
            writeln!(f, "full-scale ordering {:<16} {:<10} ({})", o.name, agreement(o.agrees), o.expected)?;
        }
        write!(f, "E=1 vs dense identical metrics: {}", agreement(self.e1_matches_dense))
    }
}

/// Trains every cell of `grid` on `data` and evaluates both directions.
/// Fails with an invariant error when an E=1 row differs from its dense
/// twin, after the table is complete.
pub fn ablate(grid: &Grid, data: &Dataset, mut on_row: impl FnMut(&Row)) -> Result<Table> {
    let mut rows = Vec::new();
    for cfg in grid.cells() {
        log::info!("ablate: training {}", cfg.label());
        let outcome = train(&cfg, data, |e| log::info!("{}: {e}", cfg.label()))?;
        let held = HeldOut::encode(&outcome.checkpoint.params, &cfg, data)?;
        let (evals, _) = evaluate_both(&held, &[1])?;
        let pick = |d: Direction| {
            let e = evals.iter().find(|e| e.direction == d).expect("both directions evaluated");
            (e.recall(1).unwrap_or(0.0), e.metrics.mean_ap)
        };
        let row = Row {
            final_loss: outcome.log.last().map_or(f64::NAN, |l| l.loss),
            a2b: pick(Direction::AToB),
            b2a: pick(Direction::BToA),
            config: cfg,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(Table::build(rows))
}

/// Turns a disagreeing E=1/dense pair into an error.
pub fn check_equivalence(table: &Table) -> Result<()> {
    if table.e1_matches_dense == Some(false) {
        return Err(HarnessError::Invariant(
            "the E=1 routed model and the dense baseline produced different metrics".into(),
        ));
    }
    Ok(())
}
