//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// An analytic gradient at most this large is treated as an exact zero.
pub const STRUCTURAL_ZERO: f64 = 1e-12;
/// Largest central difference accepted for an exact-zero gradient
/// (finite-difference roundoff).
pub const ROUNDOFF_TOL: f64 = 1e-7;

/// Compares the tape gradient of scalar `f` at `x` against central differences
/// `(f(x+h) − f(x−h)) / 2h` for every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, &all, h, tol)
}

/// Like [`grad_check`] but only perturbs the listed flat indices.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, indices: &[usize], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).expect("leaf requires grad");

    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: indices.len(),
        passed: true,
    };
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        // Gradients that vanish identically (e.g. key biases under softmax)
        // are compared in absolute terms, since roundoff dominates `numeric`.
        let err = if a.abs() <= STRUCTURAL_ZERO && numeric.abs() <= ROUNDOFF_TOL {
            0.0
        } else {
            rel_error(a, numeric)
        };
        if err > report.max_rel_error || i == indices[0] {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
