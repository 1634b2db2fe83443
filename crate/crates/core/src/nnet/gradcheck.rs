//! Central finite-difference gradient checking.

use super::{ParamGrads, ParamSet};
use crate::error::{Error, Result};

/// Step used for the central differences.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-2;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// Compares `analytic` against central differences of `loss` around
/// `params`, perturbing every scalar of every tensor.
pub fn check<F>(params: &ParamSet, analytic: &ParamGrads, step: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut report = GradCheckReport::default();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let grad =
            analytic.get(&name).ok_or_else(|| Error::validation(None, format!("no analytic gradient for {name:?}")))?;
        let len = params.get(&name).expect("name from params").len();
        if grad.len() != len {
            return Err(Error::shape(format!("gradient for {name:?} has {} entries, expected {len}", grad.len())));
        }
        let mut check = TensorCheck { name: name.clone(), entries: len, max_rel_err: 0.0, max_abs_err: 0.0 };
        for (i, &a) in grad.iter().enumerate() {
            let original = params.get(&name).expect("present").as_slice().expect("standard layout")[i];
            let cell = |p: &mut ParamSet, v: f64| {
                p.get_mut(&name).expect("present").as_slice_mut().expect("standard layout")[i] = v;
            };
            cell(&mut probe, original + step);
            let up = loss(&probe)?;
            cell(&mut probe, original - step);
            let down = loss(&probe)?;
            cell(&mut probe, original);
            let numeric = (up - down) / (2.0 * step);
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
        }
        report.tensors.push(check);
    }
    Ok(report)
}
