//! Central finite-difference gradient checking.
//!
//! The checker is the independent oracle for every differentiable primitive:
//! it evaluates the function twice per coordinate and compares the numeric
//! derivative against whatever the tape produced.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// A scalar-valued function of one tensor, expressed in tape ops.
pub trait ScalarFn {
    fn eval(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    fn eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self(tape, x)
    }
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tol: f64,
    pub coords: usize,
}

impl FiniteDiffReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Relative error with a floor so that near-zero pairs compare absolutely.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(a.abs().max(n.abs()), 1e-6)
}

/// Compare tape gradients of `f` at `x` against central differences with
/// step `h`. `tol` is the relative-error threshold for [`FiniteDiffReport::passed`].
pub fn finite_diff_check(f: &dyn ScalarFn, x: &Tensor, h: f64, tol: f64) -> Result<FiniteDiffReport> {
    assert!(h > 0.0, "finite_diff_check requires h > 0");

    // Analytic gradient from the tape.
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let y = f.eval(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(xv);

    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];

        probe.data_mut()[i] = orig + h;
        let plus = eval_value(f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_value(f, &probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        max_abs = max_abs.max((a - numeric).abs());
        max_rel = max_rel.max(rel_err(a, numeric));
    }

    Ok(FiniteDiffReport {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        tol,
        coords: x.len(),
    })
}

fn eval_value(f: &dyn ScalarFn, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let y = f.eval(&mut tape, xv)?;
    Ok(tape.value(y).item())
}
