//! Central finite-difference gradient checking.
//!
//! The check rebuilds the whole computation for every perturbed input and
//! only reads forward values, so it is independent of the backward rules it
//! validates.

use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Largest discrepancy found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of the scalar produced by `build` with
/// central differences of step `h`.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, floor)`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, floor: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data()[j];
            work[ti].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > report.max_rel_err || !err.is_finite() {
                report = GradCheck {
                    max_rel_err: err,
                    worst: (ti, j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
