//! Finite-difference verification of tape gradients.
//!
//! [`finite_diff_check`] rebuilds a scalar-valued computation under central
//! differences, one input element at a time, and compares the numeric slope
//! against the gradient produced by the backward sweep. The comparison uses
//! a guarded relative error so near-zero gradients do not blow up the ratio.

use super::{Tape, Var};
use crate::error::{Error, Result};
use ndarray::ArrayD;

/// Worst-case disagreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_elem: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl FiniteDiffReport {
    /// Panics with element coordinates when the worst relative error
    /// exceeds `tol`; intended for use inside tests.
    pub fn assert_within(&self, tol: f64) {
        assert!(
            self.max_rel_err <= tol,
            "gradient check failed: rel err {:.3e} > {tol:.3e} at input {} elem {} \
             (analytic {:.9e}, numeric {:.9e})",
            self.max_rel_err,
            self.worst_input,
            self.worst_elem,
            self.worst_analytic,
            self.worst_numeric,
        );
    }
}

/// Compares backward-sweep gradients against central differences.
///
/// `build` must construct the same scalar from the given leaves every time it
/// is called (it runs once per perturbed element). `eps` is the perturbation
/// step; `rel_floor` bounds the denominator of the relative error so that a
/// pair of near-zero slopes compares by absolute difference instead.
pub fn finite_diff_check<F>(
    inputs: &[ArrayD<f64>],
    eps: f64,
    rel_floor: f64,
    build: F,
) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let root = build(&mut tape, &vars)?;
    if tape.value(root).len() != 1 {
        return Err(Error::contract(format!(
            "finite-difference root must be scalar, got shape {:?}",
            tape.shape(root)
        )));
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(a.raw_dim()))
        })
        .collect();

    let eval = |xs: &[ArrayD<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|a| t.constant(a.clone())).collect();
        let r = build(&mut t, &vs)?;
        Ok(t.scalar(r))
    };

    let mut report = FiniteDiffReport::default();
    for (i, base) in inputs.iter().enumerate() {
        for j in 0..base.len() {
            let mut plus: Vec<ArrayD<f64>> = inputs.to_vec();
            plus[i].as_slice_mut().expect("contiguous")[j] += eps;
            let mut minus: Vec<ArrayD<f64>> = inputs.to_vec();
            minus[i].as_slice_mut().expect("contiguous")[j] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic[i].as_slice().expect("contiguous")[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(rel_floor);
            if rel > report.max_rel_err {
                report = FiniteDiffReport {
                    max_rel_err: rel,
                    worst_input: i,
                    worst_elem: j,
                    worst_analytic: a,
                    worst_numeric: numeric,
                };
            }
        }
    }
    Ok(report)
}
