//! Randomized primitives: noise samplers, noisy argmax over vote histograms and
//! noisy aggregation of teacher posteriors.
//!
//! Every function draws from an explicit [`Stream`](crate::rng::Stream). A
//! noiseless spec (kind `None` or scale 0) never touches the stream, so the
//! zero-noise path is bit-identical to the plain formula and leaves the stream
//! state unchanged.

use alloc::vec;
use alloc::vec::Vec;

use rand::distr::Open01;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::math::{argmax, ln};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum NoiseKind {
    Laplace,
    Gaussian,
    None,
}

/// Additive noise distribution: Laplace with scale `b`, or Gaussian with
/// standard deviation `σ`, both centered at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseSpec {
    kind: NoiseKind,
    scale: f64,
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec {
        kind: NoiseKind::None,
        scale: 0.0,
    };

    pub fn new(kind: NoiseKind, scale: f64) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::InvalidScale(scale));
        }
        let scale = if kind == NoiseKind::None { 0.0 } else { scale };
        Ok(Self { kind, scale })
    }

    pub fn laplace(scale: f64) -> Result<Self> {
        Self::new(NoiseKind::Laplace, scale)
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(NoiseKind::Gaussian, sigma)
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn is_noiseless(&self) -> bool {
        self.kind == NoiseKind::None || self.scale == 0.0
    }

    /// One draw. Noiseless specs return exactly `0.0` without consuming randomness.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.is_noiseless() {
            return 0.0;
        }
        match self.kind {
            NoiseKind::Laplace => sample_laplace(self.scale, rng),
            NoiseKind::Gaussian => {
                let z: f64 = rng.sample(StandardNormal);
                self.scale * z
            }
            NoiseKind::None => 0.0,
        }
    }
}

/// Inverse-CDF Laplace draw from a single uniform on the open interval (0, 1).
fn sample_laplace<R: Rng + ?Sized>(b: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    let centered = u - 0.5;
    if centered < 0.0 {
        b * ln(1.0 + 2.0 * centered)
    } else {
        -b * ln(1.0 - 2.0 * centered)
    }
}

/// Convenience wrapper matching the free-function form of [`NoiseSpec::sample`].
pub fn sample_noise<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R) -> f64 {
    spec.sample(rng)
}

/// Per-class vote counts from an ensemble of teachers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteHistogram {
    counts: Vec<u32>,
}

impl VoteHistogram {
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::DimensionMismatch(
                "a vote histogram needs at least 2 classes".into(),
            ));
        }
        Ok(Self { counts })
    }

    /// Tally one vote per teacher over `classes` classes.
    pub fn from_votes(votes: impl IntoIterator<Item = usize>, classes: usize) -> Result<Self> {
        let mut counts = vec![0u32; classes];
        for v in votes {
            *counts.get_mut(v).ok_or_else(|| {
                Error::DimensionMismatch(alloc::format!("vote {v} outside {classes} classes"))
            })? += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn voters(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }
}

/// The released noisy histogram `counts[j] + Y_j`.
pub fn noisy_counts<R: Rng + ?Sized>(
    votes: &VoteHistogram,
    spec: &NoiseSpec,
    rng: &mut R,
) -> Vec<f64> {
    votes
        .counts
        .iter()
        .map(|&c| f64::from(c) + spec.sample(rng))
        .collect()
}

/// Report-noisy-max: `argmax_j (counts[j] + Y_j)`, lowest index on ties.
pub fn noisy_max<R: Rng + ?Sized>(votes: &VoteHistogram, spec: &NoiseSpec, rng: &mut R) -> usize {
    argmax(&noisy_counts(votes, spec, rng))
}

/// `Σᵢ wᵢ (Tᵢ + Yᵢ)` with a fresh noise vector per teacher, projected back onto
/// the simplex by clipping negatives and renormalizing. If every entry clips to
/// zero the noiseless weighted average is returned instead.
///
/// A noiseless spec returns the plain weighted average without renormalization.
pub fn noisy_aggregate_posterior<R: Rng + ?Sized>(
    posteriors: &[&[f64]],
    weights: &[f64],
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let classes = posteriors.first().map(|p| p.len()).unwrap_or(0);
    if posteriors.iter().any(|p| p.len() != classes) {
        return Err(Error::DimensionMismatch(
            "teacher posteriors have different lengths".into(),
        ));
    }
    check_simplex_weights(weights)?;
    if weights.len() != posteriors.len() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "{} weights for {} teachers",
            weights.len(),
            posteriors.len()
        )));
    }

    let clean = weighted_average(posteriors, weights, classes);
    if spec.is_noiseless() {
        return Ok(clean);
    }

    let mut noisy = vec![0.0; classes];
    for (p, &w) in posteriors.iter().zip(weights) {
        for (acc, &v) in noisy.iter_mut().zip(p.iter()) {
            *acc += w * (v + spec.sample(rng));
        }
    }
    let mut total = 0.0;
    for v in noisy.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
        total += *v;
    }
    if total <= 0.0 {
        return Ok(clean);
    }
    for v in noisy.iter_mut() {
        *v /= total;
    }
    Ok(noisy)
}

/// Noiseless weighted average, summed in teacher order.
pub(crate) fn weighted_average(posteriors: &[&[f64]], weights: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; classes];
    for (p, &w) in posteriors.iter().zip(weights) {
        for (acc, &v) in out.iter_mut().zip(p.iter()) {
            *acc += w * v;
        }
    }
    out
}

pub(crate) fn check_simplex_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidWeights);
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidWeights);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::exp;
    use crate::rng::{purpose, stream};

    fn rng(i: u64) -> crate::rng::Stream {
        stream(42, purpose::GRAD_CHECK, i, 0)
    }

    #[test]
    fn zero_scale_is_exactly_zero() {
        let mut r = rng(0);
        assert_eq!(NoiseSpec::laplace(0.0).unwrap().sample(&mut r), 0.0);
        assert_eq!(NoiseSpec::gaussian(0.0).unwrap().sample(&mut r), 0.0);
        assert_eq!(NoiseSpec::NONE.sample(&mut r), 0.0);
        // the stream was never advanced
        let a: u64 = r.random();
        let b: u64 = rng(0).random();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_negative_scale() {
        assert!(NoiseSpec::laplace(-1.0).is_err());
        assert!(NoiseSpec::gaussian(f64::NAN).is_err());
    }

    #[test]
    fn laplace_variance_is_two_b_squared() {
        // Var = 2b² = 2. The sample variance of 10⁶ draws has SE ≈ sqrt((μ4 - σ⁴)/n)
        // = sqrt((24 - 4)/10⁶) ≈ 0.0045, so [1.98, 2.02] is a ±4.4 SE window.
        let spec = NoiseSpec::laplace(1.0).unwrap();
        let mut r = rng(1);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = spec.sample(&mut r);
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!((1.98..=2.02).contains(&var), "variance {var}");
    }

    #[test]
    fn gaussian_mean_within_clt_window() {
        // σ = 2: the mean of 10⁶ draws has SE 0.002; ±0.01 is a 5 SE window.
        let spec = NoiseSpec::gaussian(2.0).unwrap();
        let mut r = rng(2);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = spec.sample(&mut r);
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        assert!(mean.abs() <= 0.01, "mean {mean}");
        let var = s2 / n as f64 - mean * mean;
        assert!((var - 4.0).abs() < 0.04, "variance {var}");
    }

    #[test]
    fn noiseless_noisy_max_is_plurality_with_low_tie_break() {
        let mut r = rng(3);
        let v = VoteHistogram::new(vec![5, 3, 2]).unwrap();
        assert_eq!(noisy_max(&v, &NoiseSpec::NONE, &mut r), 0);
        let tie = VoteHistogram::new(vec![4, 4]).unwrap();
        assert_eq!(noisy_max(&tie, &NoiseSpec::NONE, &mut r), 0);
        assert_eq!(
            noisy_max(&tie, &NoiseSpec::laplace(0.0).unwrap(), &mut r),
            0
        );
    }

    /// P(Y₁ − Y₀ > t) for i.i.d. Laplace(0, 1), by numerically convolving the
    /// densities: ∫ f(y) · S(t + y) dy with S the Laplace survival function.
    fn laplace_gap_tail(t: f64) -> f64 {
        let density = |y: f64| 0.5 * exp(-y.abs());
        let survival = |x: f64| {
            if x >= 0.0 {
                0.5 * exp(-x)
            } else {
                1.0 - 0.5 * exp(x)
            }
        };
        let (lo, hi, n) = (-80.0, 80.0, 400_000);
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let y = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += w * density(y) * survival(t + y);
        }
        acc * h
    }

    #[test]
    fn laplace_noisy_max_flip_rate_matches_convolution() {
        let p = laplace_gap_tail(10.0);
        // closed form for the difference of two unit Laplaces: e^{-t}(2 + t)/4
        assert!((p - exp(-10.0) * 12.0 / 4.0).abs() < 1e-9);

        let spec = NoiseSpec::laplace(1.0).unwrap();
        let votes = VoteHistogram::new(vec![10, 0]).unwrap();
        let mut r = rng(4);
        let trials = 100_000;
        let hits = (0..trials)
            .filter(|_| noisy_max(&votes, &spec, &mut r) == 1)
            .count();
        let observed = hits as f64 / trials as f64;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        assert!(
            (observed - p).abs() <= 3.0 * se,
            "observed {observed}, expected {p} ± {se}"
        );
    }

    #[test]
    fn aggregate_examples() {
        let mut r = rng(5);
        let out =
            noisy_aggregate_posterior(&[&[0.7, 0.3]], &[1.0], &NoiseSpec::NONE, &mut r).unwrap();
        assert_eq!(out, vec![0.7, 0.3]);

        let out = noisy_aggregate_posterior(
            &[&[1.0, 0.0], &[0.0, 1.0]],
            &[0.5, 0.5],
            &NoiseSpec::NONE,
            &mut r,
        )
        .unwrap();
        assert_eq!(out, vec![0.5, 0.5]);

        let out = noisy_aggregate_posterior(
            &[&[0.8, 0.2], &[0.6, 0.4]],
            &[0.25, 0.75],
            &NoiseSpec::NONE,
            &mut r,
        )
        .unwrap();
        assert!((out[0] - 0.65).abs() < 1e-15 && (out[1] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn aggregate_errors() {
        let mut r = rng(6);
        let e = noisy_aggregate_posterior(
            &[&[1.0, 0.0], &[1.0, 0.0, 0.0]],
            &[0.5, 0.5],
            &NoiseSpec::NONE,
            &mut r,
        );
        assert!(matches!(e, Err(Error::DimensionMismatch(_))));
        let e = noisy_aggregate_posterior(&[&[1.0, 0.0]], &[0.5], &NoiseSpec::NONE, &mut r);
        assert_eq!(e, Err(Error::InvalidWeights));
        let e = noisy_aggregate_posterior(
            &[&[1.0, 0.0], &[0.0, 1.0]],
            &[1.5, -0.5],
            &NoiseSpec::NONE,
            &mut r,
        );
        assert_eq!(e, Err(Error::InvalidWeights));
    }

    #[test]
    fn heavy_noise_stays_on_simplex() {
        let spec = NoiseSpec::gaussian(50.0).unwrap();
        let mut r = rng(7);
        for _ in 0..2000 {
            let out = noisy_aggregate_posterior(
                &[&[0.5, 0.3, 0.2], &[0.1, 0.1, 0.8]],
                &[0.4, 0.6],
                &spec,
                &mut r,
            )
            .unwrap();
            assert!(out.iter().all(|&v| v >= 0.0));
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn none_and_zero_scale_are_bit_identical() {
        let post: [&[f64]; 3] = [&[0.2, 0.5, 0.3], &[0.9, 0.05, 0.05], &[0.3, 0.3, 0.4]];
        let w = [0.2, 0.3, 0.5];
        let a = noisy_aggregate_posterior(&post, &w, &NoiseSpec::NONE, &mut rng(8)).unwrap();
        let b =
            noisy_aggregate_posterior(&post, &w, &NoiseSpec::laplace(0.0).unwrap(), &mut rng(9))
                .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_draws_are_reproducible() {
        let spec = NoiseSpec::laplace(3.0).unwrap();
        let a: Vec<f64> = (0..16)
            .map({
                let mut r = rng(10);
                move |_| spec.sample(&mut r)
            })
            .collect();
        let b: Vec<f64> = (0..16)
            .map({
                let mut r = rng(10);
                move |_| spec.sample(&mut r)
            })
            .collect();
        assert_eq!(a, b);
    }
}
