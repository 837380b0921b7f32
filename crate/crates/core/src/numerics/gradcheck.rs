//! Central-difference gradient checks, run in 64-bit precision.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference estimate of `∇f(x)`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(format!("f is not finite around coordinate {i}")));
        }
        out.push((hi - lo) / (2.0 * eps));
    }
    Tensor::new(x.shape(), out)
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub rel_tol: f64,
    /// Coordinates whose absolute error is below this pass regardless of
    /// their relative error.
    pub abs_tol: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, rel_tol: 1e-3, abs_tol: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorstCoordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Coordinate with the largest relative error among those above `abs_tol`.
    pub worst: Option<WorstCoordinate>,
}

/// Compares tape adjoints of `f` against central differences at `inputs`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&g, &vars);
        if !loss.item().is_finite() {
            return Err(Error::NonFinite("loss at the check point".into()));
        }
        let grads = g.backward(loss);
        vars.iter().map(|&v| grads.get_or_zero(v)).collect()
    };

    let mut report = GradcheckReport {
        passed: true,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (which, x) in inputs.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |probe| {
                let g = Graph::new();
                let vars: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == which { probe.clone() } else { t.clone() }))
                    .collect();
                f(&g, &vars).item()
            },
            x,
            opts.eps,
        )?;
        for (index, (&a, &n)) in analytic[which].data().iter().zip(numeric.data()).enumerate() {
            report.checked += 1;
            let abs = (a - n).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs <= opts.abs_tol {
                continue;
            }
            let rel = abs / a.abs().max(n.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(WorstCoordinate { input: which, index, analytic: a, numeric: n });
            }
            if rel >= opts.rel_tol {
                report.passed = false;
            }
        }
    }
    Ok(report)
}
