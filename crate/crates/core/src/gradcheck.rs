//! Central finite-difference oracle for checking analytic gradients.
//!
//! Only forward evaluations are used here, never the tape's backward pass.

use alloc::string::String;
use alloc::vec::Vec;

use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore};

/// Denominator floor for [`relative_error`]. Gradients below this magnitude are
/// compared on an absolute scale of `floor × tolerance`, which is where central
/// differences at `h = 1e-6` stop resolving anything but round-off.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Central-difference gradient of `loss` with respect to every cell of `id`.
pub fn numeric_gradient(
    store: &ParamStore,
    id: ParamId,
    h: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> Matrix {
    let mut work = store.clone();
    let (r, c) = store.value(id).shape();
    let mut out = Matrix::zeros(r, c);
    for k in 0..r * c {
        let orig = store.value(id).as_slice()[k];
        work.value_mut(id).as_mut_slice()[k] = orig + h;
        let up = loss(&work);
        work.value_mut(id).as_mut_slice()[k] = orig - h;
        let down = loss(&work);
        work.value_mut(id).as_mut_slice()[k] = orig;
        out.as_mut_slice()[k] = (up - down) / (2.0 * h);
    }
    out
}

/// Worst cell of one parameter's comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn compare(name: &str, analytic: &Matrix, numeric: &Matrix) -> GradCheck {
    let mut worst = GradCheck {
        name: name.into(),
        max_relative_error: 0.0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (&a, &n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
        let e = relative_error(a, n);
        if e > worst.max_relative_error || e.is_nan() {
            worst.max_relative_error = e;
            worst.analytic = a;
            worst.numeric = n;
        }
    }
    worst
}

/// Checks every parameter in `store`; returns one record per parameter.
pub fn check_all(
    store: &ParamStore,
    analytic: &crate::params::Gradients,
    h: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> Vec<GradCheck> {
    store
        .iter()
        .map(|(id, p)| {
            let numeric = numeric_gradient(store, id, h, &mut loss);
            compare(&p.name, analytic.get(id), &numeric)
        })
        .collect()
}
