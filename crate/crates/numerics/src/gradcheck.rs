//! Central-difference gradient checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst coordinate found by [`gradcheck_many`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error used throughout: `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks a scalar function of one tensor. Returns the max relative error.
pub fn gradcheck<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), step)?;
    Ok(report.max_rel_err)
}

/// Checks a scalar function of several tensors, perturbing every coordinate
/// of every input.
pub fn gradcheck_many<F>(f: F, points: &[Tensor], step: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.var(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut inputs = points.to_vec();
    for which in 0..points.len() {
        for idx in 0..points[which].numel() {
            let orig = points[which].data()[idx];
            inputs[which].data_mut()[idx] = orig + step;
            let plus = eval(&inputs)?;
            inputs[which].data_mut()[idx] = orig - step;
            let minus = eval(&inputs)?;
            inputs[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[which].data()[idx];
            let err = rel_err(a, numeric);
            if err > report.max_rel_err {
                report = GradcheckReport {
                    max_rel_err: err,
                    worst_input: which,
                    worst_index: idx,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
