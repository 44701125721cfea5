use crate::tensor::{ShapeError, Tensor};

use super::graph::{Graph, Var};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the element with the worst relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

fn evaluate<F>(f: &F, x: Tensor<f64>) -> Result<f64, ShapeError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, ShapeError>,
{
    let mut g = Graph::new();
    let xv = g.variable(x);
    let out = f(&mut g, xv)?;
    g.value(out).item().ok_or_else(|| ShapeError::Invalid {
        op: "finite_diff_check",
        reason: format!(
            "function must return a scalar, got {:?}",
            g.value(out).shape()
        ),
    })
}

/// Checks the gradient of the scalar function built by `f` at `x0` against
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element, in 64-bit arithmetic.
pub fn finite_diff_check<F>(f: F, x0: &Tensor<f64>, h: f64) -> Result<GradCheckReport, ShapeError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, ShapeError>,
{
    let mut g = Graph::new();
    let xv = g.variable(x0.clone());
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic: Vec<f64> = match g.grad(xv) {
        Some(t) => t.into_data(),
        None => vec![0.0; x0.len()],
    };
    let mut numeric = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        numeric.push((evaluate(&f, plus)? - evaluate(&f, minus)?) / (2.0 * h));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        analytic,
        numeric,
    };
    for (i, (&a, &n)) in report.analytic.iter().zip(&report.numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}
