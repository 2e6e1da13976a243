//! Central finite-difference gradient checking.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// One coordinate whose analytic and numeric gradients disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Magnitude below which differences are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the backward pass of `f` against central differences at `point`.
///
/// `f` builds a scalar from the given input vars; it is called once with
/// trainable leaves for the analytic gradient and twice per coordinate with
/// constant leaves.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("grad_check: h must be positive"));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        failures: Vec::new(),
    };
    let mut probe: Vec<Tensor> = point.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, &point[input]);
        for index in 0..point[input].len() {
            let orig = point[input].data()[index];
            probe[input].data_mut()[index] = orig + h;
            let up = eval(&probe)?;
            probe[input].data_mut()[index] = orig - h;
            let down = eval(&probe)?;
            probe[input].data_mut()[index] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[index];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
            }
            if !(rel <= tol) {
                report.failures.push(GradMismatch {
                    input,
                    index,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
