//! DP-SGD baseline: per-example clipping, Gaussian noise on the summed
//! gradient, and full-participation RDP accounting with a hard budget stop.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::accountant::{calibrate_noise, rdp_to_dp, PrivacyBudget, RdpCurve, DEFAULT_ORDERS};
use crate::mechanisms::{NoiseKind, NoiseSpec};
use crate::rng::{purpose, stream};
use crate::seqmodel::{
    mean_gradient, train_with, Example, Gradient, ModelParams, OptimizerKind, TrainConfig,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DpSgdConfig {
    /// Per-example L2 clipping norm `C`.
    pub clip_norm: f64,
    /// Noise standard deviation is `noise_multiplier · C`.
    pub noise_multiplier: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub delta: f64,
    /// Training stops before a step would push spent ε past this.
    pub target_epsilon: f64,
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!(
                "clip norm {}",
                self.clip_norm
            )));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!(
                "noise multiplier {}",
                self.noise_multiplier
            )));
        }
        if !(self.target_epsilon >= 0.0) {
            return Err(Error::InvalidBudget(alloc::format!(
                "target ε {}",
                self.target_epsilon
            )));
        }
        PrivacyBudget::new(0.0, self.delta)?;
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

/// `g · min(1, C / ‖g‖₂)`.
pub fn clip_gradient(g: &Gradient, clip_norm: f64) -> Gradient {
    let norm = g.norm();
    if norm <= clip_norm {
        return g.clone();
    }
    let mut out = g.clone();
    out.scale(clip_norm / norm);
    out
}

/// `(Σ clip(gᵢ) + N(0, (σC)² I)) / B`, summed in batch order. No noise is
/// drawn when `σ = 0`.
pub fn noisy_mean_gradient<R: Rng + ?Sized>(
    grads: &[Gradient],
    clip_norm: f64,
    noise_multiplier: f64,
    rng: &mut R,
) -> Gradient {
    let clipped: Vec<Gradient> = grads.iter().map(|g| clip_gradient(g, clip_norm)).collect();
    debug_assert!(clipped
        .iter()
        .all(|g| g.norm() <= clip_norm * (1.0 + 1e-12)));
    let mut mean = mean_gradient(&clipped);
    if noise_multiplier > 0.0 {
        let std = noise_multiplier * clip_norm / grads.len() as f64;
        for v in mean.0.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        }
    }
    mean
}

/// The parameter update `−lr · noisy_mean_gradient(...)`.
pub fn dpsgd_step<R: Rng + ?Sized>(
    grads: &[Gradient],
    cfg: &DpSgdConfig,
    rng: &mut R,
) -> Result<Gradient> {
    if grads.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut u = noisy_mean_gradient(grads, cfg.clip_norm, cfg.noise_multiplier, rng);
    u.scale(-cfg.learning_rate);
    Ok(u)
}

/// ε spent by `steps` full-participation steps at noise multiplier `σ`.
pub fn spent_epsilon(noise_multiplier: f64, steps: usize, delta: f64) -> Result<f64> {
    if steps == 0 {
        return Ok(0.0);
    }
    let spec = NoiseSpec::new(NoiseKind::Gaussian, noise_multiplier)?;
    let spec = if noise_multiplier == 0.0 {
        NoiseSpec::NONE
    } else {
        spec
    };
    rdp_to_dp(
        &RdpCurve::for_mechanism(&spec, 1.0, &DEFAULT_ORDERS)?.repeated(steps),
        delta,
    )
}

/// Most steps whose spent ε stays within `target_epsilon`.
pub fn max_steps(
    noise_multiplier: f64,
    target_epsilon: f64,
    delta: f64,
    cap: usize,
) -> Result<usize> {
    if target_epsilon.is_infinite() {
        return Ok(cap);
    }
    // spent ε is non-decreasing in the step count: binary search.
    let (mut lo, mut hi) = (0usize, cap);
    if spent_epsilon(noise_multiplier, hi, delta)? <= target_epsilon {
        return Ok(hi);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if spent_epsilon(noise_multiplier, mid, delta)? <= target_epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Noise multiplier that lets `steps` steps fit within `target`.
pub fn calibrate_multiplier(target: PrivacyBudget, steps: usize) -> Result<f64> {
    Ok(calibrate_noise(target, steps, NoiseKind::Gaussian, 1.0)?.scale())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpSgdOutcome {
    pub params: ModelParams,
    pub spent: PrivacyBudget,
    pub steps: usize,
    pub loss_trace: Vec<f64>,
    pub stopped_early: bool,
}

/// DP-SGD training that never exceeds `target_epsilon`: before each step the
/// accountant checks the step fits, otherwise training stops.
pub fn dpsgd_train(
    params: ModelParams,
    data: &[Example],
    cfg: &DpSgdConfig,
) -> Result<DpSgdOutcome> {
    cfg.validate()?;
    let tc = cfg.train_config();
    tc.validate()?;
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let planned = per_epoch * cfg.epochs;
    let allowed = max_steps(cfg.noise_multiplier, cfg.target_epsilon, cfg.delta, planned)?;
    if allowed < per_epoch.min(planned) {
        return Err(Error::BudgetExhaustedBeforeOneEpoch {
            steps: allowed,
            per_epoch,
        });
    }
    let out = train_with(params, data, &tc, |step, grads| {
        if step >= allowed {
            return Ok(None);
        }
        let mut rng = stream(cfg.seed, purpose::DPSGD_NOISE, step as u64, 0);
        Ok(Some(noisy_mean_gradient(
            &grads,
            cfg.clip_norm,
            cfg.noise_multiplier,
            &mut rng,
        )))
    })?;
    let spent = spent_epsilon(cfg.noise_multiplier, out.steps, cfg.delta)?;
    Ok(DpSgdOutcome {
        params: out.params,
        spent: PrivacyBudget {
            epsilon: spent,
            delta: cfg.delta,
        },
        steps: out.steps,
        loss_trace: out.loss_trace,
        stopped_early: out.stopped_early,
    })
}
