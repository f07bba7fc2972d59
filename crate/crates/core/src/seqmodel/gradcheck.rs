use alloc::vec::Vec;

use rand::seq::index::sample;

use super::objective::{evaluate, Target, Want};
use super::params::ModelParams;
use crate::linalg::Matrix;
use crate::math::abs;
use crate::rng::{purpose, stream};
use crate::Result;

/// Central-difference step. The fourth-order stencil keeps truncation error
/// near `STEP⁴` while the wider step keeps roundoff in `f` small.
const STEP: f64 = 1e-3;
/// Magnitude below which relative error is measured against this floor instead.
const REL_FLOOR: f64 = 1e-6;

/// Largest relative error `|a - n| / max(|a|, |n|, 1e-6)` between an analytic
/// gradient and fourth-order central differences of `f`, over a seeded random subsample of
/// `fraction` of the coordinates (at least one).
pub fn grad_check<F>(values: &[f64], analytic: &[f64], mut f: F, fraction: f64, seed: u64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let n = values.len();
    let k = ((fraction * n as f64) as usize).clamp(1, n);
    let mut rng = stream(seed, purpose::GRAD_CHECK, n as u64, 0);
    let mut idx: Vec<usize> = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    let mut x = values.to_vec();
    let mut worst: f64 = 0.0;
    for i in idx {
        let orig = x[i];
        let mut at = |d: f64| {
            x[i] = orig + d;
            f(&x)
        };
        let near = at(STEP) - at(-STEP);
        let far = at(2.0 * STEP) - at(-2.0 * STEP);
        x[i] = orig;
        let numeric = (8.0 * near - far) / (12.0 * STEP);
        let a = analytic[i];
        let err = abs(a - numeric) / abs(a).max(abs(numeric)).max(REL_FLOOR);
        worst = worst.max(err);
    }
    worst
}

/// [`grad_check`] of a model's parameter gradient on one example.
pub fn grad_check_model(
    p: &ModelParams,
    features: &Matrix,
    target: &Target,
    fraction: f64,
    seed: u64,
) -> Result<f64> {
    let analytic = evaluate(p, features, target, Want::PARAMS)?
        .grad
        .expect("requested");
    let mut probe = p.clone();
    Ok(grad_check(
        &p.values,
        &analytic.0,
        |v| {
            probe.values.copy_from_slice(v);
            evaluate(&probe, features, target, Want::LOSS).map_or(f64::NAN, |e| e.loss)
        },
        fraction,
        seed,
    ))
}
