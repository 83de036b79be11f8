//! Finite-difference verification of tape gradients.
//!
//! Double precision only: central differences need more mantissa than f32
//! offers. Comparison is relative with a floor, so elements whose analytic
//! and numeric gradients are both tiny are effectively checked absolutely.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

/// Outcome of a [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error across all checked elements.
    pub max_rel_err: f64,
    /// Worst absolute error across all checked elements.
    pub max_abs_err: f64,
    /// Elements compared (after skips).
    pub checked: usize,
    /// Elements excluded by the skip predicate.
    pub skipped: usize,
}

const STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-4;

/// Compare tape gradients of `f` against central finite differences.
///
/// `f` rebuilds the computation from leaves each call and returns the scalar
/// loss node. `skip` exempts (input, element) pairs sitting on a known
/// non-differentiable point (e.g. a hinge kink).
pub fn grad_check_with(
    inputs: &[Tensor<f64>],
    skip: impl Fn(usize, usize) -> bool,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).scalar_value()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            if skip(k, i) {
                report.skipped += 1;
                continue;
            }
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + STEP;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - STEP;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[k].data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// [`grad_check_with`] without a skip predicate.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    grad_check_with(inputs, |_, _| false, f)
}
