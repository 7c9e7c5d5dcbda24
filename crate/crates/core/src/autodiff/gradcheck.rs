//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

/// Smallest magnitude used as the denominator of a relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because the two probes straddle a ReLU, absolute-value or clamp kink.
    pub skipped_kinks: usize,
    pub tolerance: f64,
    /// Every coordinate above tolerance.
    pub failures: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Builds `f` on a fresh graph over `inputs` and returns the scalar loss.
fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], grads: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grads)).collect();
    let out = f(&mut g, &vars)?;
    ensure!(
        g.value(out).len() == 1,
        Shape,
        "gradient check needs a scalar function, got {:?}",
        g.shape(out)
    );
    Ok((g, vars, out))
}

/// Reverse-mode gradient of a scalar graph function at `inputs`.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(f, inputs, true)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect())
}

/// Compares reverse-mode gradients with central differences on every coordinate.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    grad_check_against(f, inputs, &analytic, step, tolerance)
}

/// Compares supplied gradients with central differences of `f`.
///
/// A coordinate whose probes land on a different smooth piece than the base point (see
/// [`Graph::branch_signature`]) is counted in `skipped_kinks` instead of being compared.
pub fn grad_check_against<F>(
    f: F,
    inputs: &[Tensor<f64>],
    analytic: &[Vec<f64>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    ensure!(
        step > 0.0,
        InvalidArgument,
        "finite-difference step must be positive"
    );
    ensure!(
        analytic.len() == inputs.len()
            && analytic.iter().zip(inputs).all(|(a, t)| a.len() == t.len()),
        Shape,
        "analytic gradients do not match the inputs"
    );
    let base = {
        let (g, _, _) = evaluate(&f, inputs, false)?;
        g.branch_signature()
    };
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        tolerance,
        failures: Vec::new(),
    };
    for i in 0..inputs.len() {
        for k in 0..inputs[i].len() {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + step;
            let plus = evaluate(&f, &work, false)?;
            let lp = plus.0.value(plus.2).item();
            work[i].data_mut()[k] = x0 - step;
            let minus = evaluate(&f, &work, false)?;
            let lm = minus.0.value(minus.2).item();
            work[i].data_mut()[k] = x0;
            if plus.0.branch_signature() != base || minus.0.branch_signature() != base {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "numeric gradient at input {i}, coordinate {k}"
                )));
            }
            let err = rel_error(analytic[i][k], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((i, k));
            }
            if err > tolerance {
                report.failures.push((i, k));
            }
        }
    }
    Ok(report)
}
