//! Central-difference validation of analytic gradients. The contract for
//! every learned module is agreement with finite differences in f64.

use super::{GradMap, ParamStore};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("objective is not finite at the given parameters")]
    NonFinite,
    #[error("objective returned no gradients to probe")]
    NoGradients,
}

const FD_STEP: f64 = 1e-4;

/// Probes random parameter coordinates and returns the maximum relative
/// error between analytic gradients and central differences.
///
/// `f` evaluates the scalar objective and its full analytic gradient.
pub fn grad_check<F>(
    f: F,
    params: &ParamStore<f64>,
    probe_count: usize,
    seed: u64,
) -> Result<f64, GradCheckError>
where
    F: Fn(&ParamStore<f64>) -> (f64, GradMap<f64>),
{
    let (loss0, analytic) = f(params);
    if !loss0.is_finite() {
        return Err(GradCheckError::NonFinite);
    }
    let names: Vec<&String> = analytic.keys().collect();
    if names.is_empty() {
        return Err(GradCheckError::NoGradients);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    for _ in 0..probe_count {
        let name = names[rng.random_range(0..names.len())];
        let g = &analytic[name.as_str()];
        let idx = rng.random_range(0..g.len());
        let a = g.data()[idx];

        let numeric = {
            let mut plus = params.clone();
            perturb(plus.get_mut(name), idx, FD_STEP);
            let (lp, _) = f(&plus);
            let mut minus = params.clone();
            perturb(minus.get_mut(name), idx, -FD_STEP);
            let (lm, _) = f(&minus);
            if !lp.is_finite() || !lm.is_finite() {
                return Err(GradCheckError::NonFinite);
            }
            (lp - lm) / (2.0 * FD_STEP)
        };

        // both sides at FD noise level: indistinguishable from zero, skip
        if a.abs() < 1e-9 && numeric.abs() < 1e-9 {
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn perturb(t: &mut Tensor<f64>, idx: usize, h: f64) {
    t.data_mut()[idx] += h;
}
