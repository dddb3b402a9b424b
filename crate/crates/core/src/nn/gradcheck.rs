//! Central finite-difference gradient checking.

use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{Gradients, ParamId, ParamSet};
use crate::error::{bail, Result};

/// Outcome of a [`finite_diff_check`] run.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(param, element, analytic, numeric)` for the worst entry.
    pub worst: Option<(ParamId, usize, f64, f64)>,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients from `objective` with central differences
/// `(f(p+eps) − f(p−eps)) / 2eps` at `sample_count` randomly chosen scalars.
///
/// `objective` must be a deterministic function of the parameters. All
/// scalars are checked when `sample_count` exceeds the parameter count.
pub fn finite_diff_check<F>(
    params: &mut ParamSet,
    eps: f64,
    sample_count: usize,
    seed: u64,
    mut objective: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(f64, Gradients)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        bail!(Config, "finite-difference step {eps} outside [1e-7, 1e-3]");
    }
    let (loss, grads) = objective(params)?;
    if !loss.is_finite() {
        bail!(Numeric, "objective returned non-finite loss {loss}");
    }
    let total = params.scalar_count();
    let picks: Vec<usize> = if sample_count >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = index::sample(&mut rng, total, sample_count).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport { max_relative_error: 0.0, checked: 0, worst: None };
    for flat in picks {
        let (id, idx) = params.locate(flat).expect("index within scalar count");
        let analytic = grads.scalar(id, idx);
        let original = params.get(id).value.data()[idx];

        params.get_mut(id).value.data_mut()[idx] = original + eps;
        let plus = objective(params)?.0;
        params.get_mut(id).value.data_mut()[idx] = original - eps;
        let minus = objective(params)?.0;
        params.get_mut(id).value.data_mut()[idx] = original;

        if !plus.is_finite() || !minus.is_finite() {
            bail!(Numeric, "non-finite loss while perturbing `{}`[{idx}]", params.get(id).name);
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((id, idx, analytic, numeric));
        }
    }
    Ok(report)
}
