//! Central finite-difference gradient checking against the reverse-mode sweep.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a [`gradcheck`] run.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a − n| / max(|a|, |n|, 1e-6)` over all checked coordinates.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where `max_rel_error` occurred.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Gradients below this magnitude are compared absolutely: central differences carry
/// roundoff near `1e-16 * |f| / h` that a pure relative test would magnify.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, REL_FLOOR)
}

fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    if out.len() != 1 {
        return Err(Error::shape("gradcheck", format!("function must return a scalar, got {:?}", out.shape())));
    }
    Ok(out.item())
}

/// Compares reverse-mode gradients of the scalar function `f` with central
/// differences of steps `h` and `h/2`, Richardson-extrapolated, for every
/// coordinate of every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    gradcheck_with_floor(f, inputs, h, tol, REL_FLOOR)
}

/// [`gradcheck`] with an explicit magnitude below which errors are measured
/// absolutely. Large functions need a higher floor: the difference noise grows with
/// the number and size of the summed outputs.
pub fn gradcheck_with_floor<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64, floor: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    if !(floor > 0.0) {
        return Err(Error::invalid("gradcheck", format!("floor must be > 0, got {floor}")));
    }
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::invalid("gradcheck", format!("step {h} outside [1e-6, 1e-4]")));
    }
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter()
            .map(|&v| grads.wrt(v).expect("param leaf has a gradient"))
            .collect()
    };
    for (i, a) in analytic.iter().enumerate() {
        if let Some(index) = a.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("gradcheck analytic gradient of input {i}"),
                index,
            });
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
        tol,
        passed: true,
    };
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            let mut central = |step: f64| -> Result<f64> {
                probe[i].data_mut()[j] = x0 + step;
                let up = eval(&f, &probe)?;
                probe[i].data_mut()[j] = x0 - step;
                let down = eval(&f, &probe)?;
                probe[i].data_mut()[j] = x0;
                Ok((up - down) / (2.0 * step))
            };
            // one Richardson step cancels the O(h^2) truncation term
            let (coarse, fine) = (central(h)?, central(h / 2.0)?);
            let numeric = (4.0 * fine - coarse) / 3.0;
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradcheck numeric gradient of input {i}"),
                    index: j,
                });
            }
            let a = analytic[i].data()[j];
            let err = relative_error_with_floor(a, numeric, floor);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
