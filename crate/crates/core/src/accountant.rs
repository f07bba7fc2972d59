//! Rényi-DP accounting for the Laplace and Gaussian mechanisms.
//!
//! Curves are evaluated on a fixed grid of orders, composed by entry-wise
//! addition and converted to (ε, δ) with
//! `ε = min_α [ε_α + log(1/δ)/(α − 1)]`. All bounds are data-independent and
//! count every query at its worst-case sensitivity.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::math::{ln, log_add, sqrt};
use crate::mechanisms::{NoiseKind, NoiseSpec};
use crate::{Error, Result};

/// Default Rényi orders.
pub const DEFAULT_ORDERS: [f64; 11] = [
    1.25, 1.5, 2.0, 3.0, 4.0, 8.0, 16.0, 32.0, 64.0, 256.0, 1024.0,
];

pub const DEFAULT_DELTA: f64 = 1e-3;

/// An (ε, δ) pair. `epsilon` may be `+∞` for an unprotected release.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::InvalidBudget(alloc::format!(
                "epsilon {epsilon} < 0"
            )));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::InvalidBudget(alloc::format!(
                "delta {delta} outside [0, 1)"
            )));
        }
        Ok(Self { epsilon, delta })
    }

    pub fn unbounded(delta: f64) -> Self {
        Self {
            epsilon: f64::INFINITY,
            delta,
        }
    }

    pub fn is_bounded(&self) -> bool {
        self.epsilon.is_finite()
    }
}

/// RDP guarantee `ε(α)` on a grid of orders.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RdpCurve {
    orders: Vec<f64>,
    epsilons: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, epsilons: Vec<f64>) -> Result<Self> {
        if orders.len() != epsilons.len() || orders.is_empty() {
            return Err(Error::GridMismatch);
        }
        for (i, &a) in orders.iter().enumerate() {
            if !(a > 1.0) {
                return Err(Error::InvalidOrder(a));
            }
            if i > 0 && !(a > orders[i - 1]) {
                return Err(Error::InvalidConfig(
                    "orders must be strictly increasing".into(),
                ));
            }
        }
        if epsilons.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::InvalidConfig(
                "RDP epsilons must be non-negative".into(),
            ));
        }
        Ok(Self { orders, epsilons })
    }

    pub fn zero(orders: &[f64]) -> Self {
        Self {
            orders: orders.to_vec(),
            epsilons: alloc::vec![0.0; orders.len()],
        }
    }

    /// Per-query curve of the mechanism described by `spec` at the given sensitivity.
    /// A noiseless spec yields an infinite curve unless the sensitivity is zero.
    pub fn for_mechanism(spec: &NoiseSpec, sensitivity: f64, orders: &[f64]) -> Result<Self> {
        let epsilons = orders
            .iter()
            .map(|&alpha| mechanism_rdp(spec, sensitivity, alpha))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            orders: orders.to_vec(),
            epsilons,
        })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }

    /// `k`-fold self-composition.
    pub fn repeated(&self, k: usize) -> Self {
        let k = k as f64;
        Self {
            orders: self.orders.clone(),
            epsilons: self
                .epsilons
                .iter()
                .map(|e| if *e == 0.0 { 0.0 } else { e * k })
                .collect(),
        }
    }
}

fn check_order(alpha: f64) -> Result<()> {
    if !(alpha > 1.0) {
        return Err(Error::InvalidOrder(alpha));
    }
    Ok(())
}

fn check_sensitivity(sensitivity: f64) -> Result<()> {
    if !(sensitivity >= 0.0) || !sensitivity.is_finite() {
        return Err(Error::InvalidConfig(alloc::format!(
            "sensitivity {sensitivity} must be finite and >= 0"
        )));
    }
    Ok(())
}

/// RDP of the Gaussian mechanism: `α Δ² / (2σ²)`.
pub fn rdp_gaussian(sigma: f64, sensitivity: f64, alpha: f64) -> Result<f64> {
    check_order(alpha)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidScale(sigma));
    }
    check_sensitivity(sensitivity)?;
    Ok(alpha * sensitivity * sensitivity / (2.0 * sigma * sigma))
}

/// RDP of the Laplace mechanism with scale `b` and L1 sensitivity `Δ`:
/// `1/(α−1) · log[ α/(2α−1) · e^{(α−1)Δ/b} + (α−1)/(2α−1) · e^{−αΔ/b} ]`,
/// evaluated in log space.
pub fn rdp_laplace(b: f64, sensitivity: f64, alpha: f64) -> Result<f64> {
    check_order(alpha)?;
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::InvalidScale(b));
    }
    check_sensitivity(sensitivity)?;
    if sensitivity == 0.0 {
        return Ok(0.0);
    }
    let r = sensitivity / b;
    let denom = 2.0 * alpha - 1.0;
    let first = ln(alpha / denom) + (alpha - 1.0) * r;
    let second = ln((alpha - 1.0) / denom) - alpha * r;
    Ok((log_add(first, second) / (alpha - 1.0)).max(0.0))
}

fn mechanism_rdp(spec: &NoiseSpec, sensitivity: f64, alpha: f64) -> Result<f64> {
    check_order(alpha)?;
    check_sensitivity(sensitivity)?;
    if sensitivity == 0.0 {
        return Ok(0.0);
    }
    if spec.is_noiseless() {
        return Ok(f64::INFINITY);
    }
    match spec.kind() {
        NoiseKind::Laplace => rdp_laplace(spec.scale(), sensitivity, alpha),
        NoiseKind::Gaussian => rdp_gaussian(spec.scale(), sensitivity, alpha),
        NoiseKind::None => Ok(f64::INFINITY),
    }
}

/// Entry-wise sum of curves sharing one order grid.
pub fn compose(curves: &[RdpCurve]) -> Result<RdpCurve> {
    let first = curves.first().ok_or(Error::GridMismatch)?;
    let mut epsilons = alloc::vec![0.0; first.orders.len()];
    for c in curves {
        if c.orders != first.orders {
            return Err(Error::GridMismatch);
        }
        for (acc, e) in epsilons.iter_mut().zip(&c.epsilons) {
            *acc += e;
        }
    }
    Ok(RdpCurve {
        orders: first.orders.clone(),
        epsilons,
    })
}

/// Best (ε, δ) conversion over the curve's orders. Returns `(ε, α*)`.
pub fn rdp_to_dp_with_order(curve: &RdpCurve, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidDelta(delta));
    }
    let log_inv_delta = -ln(delta);
    let mut best = (f64::INFINITY, curve.orders[curve.orders.len() - 1]);
    for (&alpha, &e) in curve.orders.iter().zip(&curve.epsilons) {
        let eps = e + log_inv_delta / (alpha - 1.0);
        if eps < best.0 {
            best = (eps, alpha);
        }
    }
    Ok(best)
}

pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<f64> {
    rdp_to_dp_with_order(curve, delta).map(|(e, _)| e)
}

/// (ε, δ) spent by `queries` releases of `spec` at the given sensitivity.
pub fn account(spec: &NoiseSpec, sensitivity: f64, queries: usize, delta: f64) -> Result<f64> {
    if queries == 0 {
        return rdp_to_dp(&RdpCurve::zero(&DEFAULT_ORDERS), delta).map(|_| 0.0);
    }
    let per_query = RdpCurve::for_mechanism(spec, sensitivity, &DEFAULT_ORDERS)?;
    rdp_to_dp(&per_query.repeated(queries), delta)
}

/// Composition of one release per entry of `sensitivities`, all at the noise
/// level of `spec`. Equal sensitivities are grouped and composed by repetition.
pub fn queries_curve(spec: &NoiseSpec, sensitivities: &[f64], orders: &[f64]) -> Result<RdpCurve> {
    let mut sorted = sensitivities.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut curves = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..]
            .iter()
            .position(|&d| d != sorted[i])
            .map_or(sorted.len(), |n| i + n);
        curves.push(RdpCurve::for_mechanism(spec, sorted[i], orders)?.repeated(j - i));
        i = j;
    }
    if curves.is_empty() {
        return Ok(RdpCurve::zero(orders));
    }
    compose(&curves)
}

/// ε spent by one release per entry of `sensitivities`.
pub fn account_queries(spec: &NoiseSpec, sensitivities: &[f64], delta: f64) -> Result<f64> {
    if sensitivities.is_empty() {
        return rdp_to_dp(&RdpCurve::zero(&DEFAULT_ORDERS), delta).map(|_| 0.0);
    }
    rdp_to_dp(&queries_curve(spec, sensitivities, &DEFAULT_ORDERS)?, delta)
}

/// Smallest noise scale (found by bisection) such that `queries` releases at
/// `sensitivity` stay within `target`, accounted at `target.delta`. The
/// returned scale re-accounts to an ε in `[0.99 · target, target]`.
pub fn calibrate_noise(
    target: PrivacyBudget,
    queries: usize,
    kind: NoiseKind,
    sensitivity: f64,
) -> Result<NoiseSpec> {
    if queries == 0 {
        return Err(Error::InvalidConfig(
            "calibration needs at least one query".into(),
        ));
    }
    calibrate_noise_for_queries(target, kind, &alloc::vec![sensitivity; queries])
}

/// [`calibrate_noise`] for releases with individual sensitivities.
pub fn calibrate_noise_for_queries(
    target: PrivacyBudget,
    kind: NoiseKind,
    sensitivities: &[f64],
) -> Result<NoiseSpec> {
    if !(target.epsilon > 0.0) {
        return Err(Error::InvalidBudget(
            "target epsilon must be positive".into(),
        ));
    }
    if sensitivities.is_empty() {
        return Err(Error::InvalidConfig(
            "calibration needs at least one query".into(),
        ));
    }
    if kind == NoiseKind::None {
        return Err(Error::NoConvergence(
            "no scale of a noiseless mechanism meets a finite budget".into(),
        ));
    }
    for &d in sensitivities {
        check_sensitivity(d)?;
    }
    let max_sensitivity = sensitivities.iter().copied().fold(0.0, f64::max);
    if max_sensitivity == 0.0 || target.epsilon.is_infinite() {
        return NoiseSpec::new(kind, 0.0);
    }
    let spent = |scale: f64| -> Result<f64> {
        account_queries(&NoiseSpec::new(kind, scale)?, sensitivities, target.delta)
    };

    let mut hi = max_sensitivity;
    let mut grow = 0;
    while spent(hi)? > target.epsilon {
        hi *= 2.0;
        grow += 1;
        if grow > 200 || !hi.is_finite() {
            return Err(Error::NoConvergence(alloc::format!(
                "target ε = {} is below the accountant's floor for δ = {}",
                target.epsilon,
                target.delta
            )));
        }
    }
    let mut lo = hi / 2.0;
    let mut shrink = 0;
    while spent(lo)? <= target.epsilon {
        hi = lo;
        lo /= 2.0;
        shrink += 1;
        if shrink > 1100 || lo == 0.0 {
            return Err(Error::NoConvergence(String::from(
                "could not bracket the calibration scale from below",
            )));
        }
    }
    // invariant: spent(lo) > target >= spent(hi)
    for _ in 0..200 {
        if spent(hi)? >= 0.99 * target.epsilon {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if spent(mid)? <= target.epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    NoiseSpec::new(kind, hi)
}

/// The `λ = K / (2ε)` convention relating query count and budget. Reported
/// next to, never instead of, the calibrated scale.
pub fn lambda_from_budget(queries: usize, epsilon: f64) -> f64 {
    queries as f64 / (2.0 * epsilon)
}

/// One row of an accounting report.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AccountingReport {
    pub mechanism: NoiseKind,
    pub scale: f64,
    pub sensitivity: f64,
    #[cfg_attr(feature = "serde", serde(rename = "K"))]
    pub queries: usize,
    pub orders: Vec<f64>,
    pub rdp: Vec<f64>,
    /// `None` when the release is unprotected.
    pub epsilon: Option<f64>,
    pub delta: f64,
    /// Noise-scale convention `λ = K / (2ε)` for the spent ε.
    pub lambda_k_over_2eps: Option<f64>,
}

impl AccountingReport {
    pub fn new(spec: &NoiseSpec, sensitivity: f64, queries: usize, delta: f64) -> Result<Self> {
        let curve = RdpCurve::for_mechanism(spec, sensitivity, &DEFAULT_ORDERS)?.repeated(queries);
        Self::from_curve(spec, sensitivity, queries, curve, delta)
    }

    /// Report for one release per entry of `sensitivities`; `sensitivity`
    /// records the largest of them.
    pub fn for_queries(spec: &NoiseSpec, sensitivities: &[f64], delta: f64) -> Result<Self> {
        let curve = queries_curve(spec, sensitivities, &DEFAULT_ORDERS)?;
        let max = sensitivities.iter().copied().fold(0.0, f64::max);
        Self::from_curve(spec, max, sensitivities.len(), curve, delta)
    }

    fn from_curve(
        spec: &NoiseSpec,
        sensitivity: f64,
        queries: usize,
        curve: RdpCurve,
        delta: f64,
    ) -> Result<Self> {
        let epsilon = rdp_to_dp(&curve, delta)?;
        let epsilon = epsilon.is_finite().then_some(epsilon);
        Ok(Self {
            mechanism: spec.kind(),
            scale: spec.scale(),
            sensitivity,
            queries,
            orders: curve.orders.clone(),
            rdp: curve
                .epsilons
                .iter()
                .map(|e| if e.is_finite() { *e } else { f64::MAX })
                .collect(),
            epsilon,
            delta,
            lambda_k_over_2eps: epsilon.map(|e| lambda_from_budget(queries, e)),
        })
    }
}

/// Monte Carlo estimate of the ε in `Pr[M(d) ∈ S] ≤ e^ε Pr[M(d′) ∈ S] + δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalEpsilon {
    /// Largest observed log-ratio over events and both directions (≥ 0).
    pub epsilon: f64,
    /// Delta-method standard error of the maximizing log-ratio.
    pub std_error: f64,
    /// Event achieving the maximum.
    pub event: usize,
    /// Some event occurred under one input and never under the other.
    pub diverged: bool,
}

/// Minimum hits an event needs under at least one input.
pub const MIN_EVENT_HITS: u64 = 100;

/// Runs `mechanism` `trials` times on each of `d` and `d_prime`; the mechanism
/// maps an input to an event index in `0..events` (a partition of the output
/// space).
pub fn estimate_epsilon_empirical<I, R, M>(
    mut mechanism: M,
    d: &I,
    d_prime: &I,
    events: usize,
    trials: u64,
    delta: f64,
    rng: &mut R,
) -> Result<EmpiricalEpsilon>
where
    I: ?Sized,
    R: Rng + ?Sized,
    M: FnMut(&I, &mut R) -> usize,
{
    if trials < 100_000 {
        return Err(Error::InvalidConfig(alloc::format!(
            "need at least 10^5 trials, got {trials}"
        )));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidDelta(delta));
    }
    let mut hits_d = alloc::vec![0u64; events];
    let mut hits_p = alloc::vec![0u64; events];
    for _ in 0..trials {
        let e = mechanism(d, rng);
        *hits_d.get_mut(e).ok_or_else(|| {
            Error::InvalidConfig(alloc::format!("event {e} outside partition"))
        })? += 1;
        let e = mechanism(d_prime, rng);
        *hits_p.get_mut(e).ok_or_else(|| {
            Error::InvalidConfig(alloc::format!("event {e} outside partition"))
        })? += 1;
    }
    for (event, (&a, &b)) in hits_d.iter().zip(&hits_p).enumerate() {
        if a < MIN_EVENT_HITS && b < MIN_EVENT_HITS {
            return Err(Error::InsufficientMass {
                event,
                min_hits: MIN_EVENT_HITS,
            });
        }
    }

    let n = trials as f64;
    let mut best = EmpiricalEpsilon {
        epsilon: 0.0,
        std_error: 0.0,
        event: 0,
        diverged: false,
    };
    let mut best_log_ratio = f64::NEG_INFINITY;
    for event in 0..events {
        let p = hits_d[event] as f64 / n;
        let q = hits_p[event] as f64 / n;
        for (num, den) in [(p, q), (q, p)] {
            let shifted = num - delta;
            if shifted <= 0.0 {
                continue;
            }
            if den == 0.0 {
                return Ok(EmpiricalEpsilon {
                    epsilon: f64::INFINITY,
                    std_error: f64::INFINITY,
                    event,
                    diverged: true,
                });
            }
            let log_ratio = ln(shifted / den);
            if log_ratio > best_log_ratio {
                best_log_ratio = log_ratio;
                // Var[ln(p̂ − δ)] ≈ p(1 − p)/(n (p − δ)²), Var[ln q̂] ≈ (1 − q)/(n q)
                let var = num * (1.0 - num) / (n * shifted * shifted) + (1.0 - den) / (n * den);
                best = EmpiricalEpsilon {
                    epsilon: log_ratio.max(0.0),
                    std_error: sqrt(var),
                    event,
                    diverged: false,
                };
            }
        }
    }
    Ok(best)
}

/// Exact ε of a pure-DP Laplace release, `Δ/b`. Used as the analytic bound for
/// report-noisy-max with Laplace noise.
pub fn laplace_pure_epsilon(b: f64, sensitivity: f64) -> f64 {
    sensitivity / b
}
