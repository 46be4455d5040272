//! Central finite-difference gradient checks.

use serde::Serialize;

use crate::ops::Parameters;

/// Relative error `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Adds `delta` to the parameter at flat position `index`.
pub fn nudge<P: Parameters>(params: &mut P, mut index: usize, delta: f64) {
    for t in params.tensors_mut() {
        if index < t.len() {
            t[index] += delta;
            return;
        }
        index -= t.len();
    }
    panic!("parameter index out of range");
}

/// Compares `analytic` (flat, in [`Parameters`] order) against central
/// differences of `loss` at each of `indices`.
pub fn check_parameters<P, F>(
    params: &P,
    indices: &[usize],
    step: f64,
    analytic: &[f64],
    mut loss: F,
) -> GradcheckReport
where
    P: Parameters + Clone,
    F: FnMut(&P) -> f64,
{
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst_index: 0,
    };
    for &i in indices {
        let mut plus = params.clone();
        nudge(&mut plus, i, step);
        let mut minus = params.clone();
        nudge(&mut minus, i, -step);
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report
}

/// Same as [`check_parameters`] for a plain input vector.
pub fn check_input<F>(x: &[f64], indices: &[usize], step: f64, analytic: &[f64], mut loss: F) -> GradcheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst_index: 0,
    };
    let mut buf = x.to_vec();
    for &i in indices {
        buf[i] = x[i] + step;
        let lp = loss(&buf);
        buf[i] = x[i] - step;
        let lm = loss(&buf);
        buf[i] = x[i];
        let err = relative_error(analytic[i], (lp - lm) / (2.0 * step));
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report
}
