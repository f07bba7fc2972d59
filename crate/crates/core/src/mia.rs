//! Model-inversion attack: gradient ascent on `log p(target | x)` over the
//! input features, plus a similarity score against a reference pattern and a
//! multi-trial report comparing models trained with and without privacy.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::StandardNormal;

use crate::linalg::Matrix;
use crate::math::sqrt;
use crate::rng::{purpose, stream, Rng};
use crate::seqmodel::{
    evaluate, forced_alignment, frame_log_posteriors, Arch, ModelParams, Target, Want,
};
use crate::{par, Error, Result};

/// Halvings tried by the line search before an ascent step is abandoned.
pub const MAX_HALVINGS: usize = 20;

/// Designated two-token attack target, the synthetic stand-in for a short
/// common word.
pub const STOP_WORD: [usize; 2] = [2, 5];

/// Small enough that the ascent, not the starting point, shapes the reconstruction.
pub const RANDOM_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InitKind {
    Zeros,
    /// Gaussian features with standard deviation [`RANDOM_INIT_STD`] from the given seed.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InvertConfig {
    pub frames: usize,
    pub steps: usize,
    pub step_size: f64,
    pub init: InitKind,
    /// Maximum model evaluations (each forward, with or without backward, is one query).
    pub query_budget: usize,
}

impl InvertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidConfig(
                "inversion needs at least one frame".into(),
            ));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!(
                "step size {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    /// `frames × input` reconstruction.
    pub features: Matrix,
    /// `log p(target | x)` at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub queries: usize,
}

impl Inversion {
    pub fn final_log_likelihood(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

fn check_target(params: &ModelParams, target: &[usize], frames: usize) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&k| k >= params.dims.vocab) {
        return Err(Error::InvalidConfig(alloc::format!(
            "target token {bad} outside the vocabulary"
        )));
    }
    let needed = match params.arch {
        Arch::Rnnt => 1,
        Arch::Ctc | Arch::FrameClassifier => {
            target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
        }
    };
    if frames < needed {
        return Err(Error::InfeasibleTarget {
            labels: target.len(),
            frames,
        });
    }
    Ok(())
}

fn initial_features(cfg: &InvertConfig, input: usize) -> Matrix {
    let mut x = Matrix::zeros(cfg.frames, input);
    if let InitKind::Random(seed) = cfg.init {
        let mut rng = stream(seed, purpose::ATTACK, 0, 0);
        x.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = RANDOM_INIT_STD * rng.sample::<f64, _>(StandardNormal));
    }
    x
}

/// Reconstruct features the model maps to `target`, by gradient ascent with
/// a halving line search: a step is taken only if the log-likelihood does not
/// decrease, so the trace is non-decreasing. Stops after `steps` accepted
/// steps, when the query budget runs out, or when no step size helps.
pub fn invert(params: &ModelParams, target: &[usize], cfg: &InvertConfig) -> Result<Inversion> {
    cfg.validate()?;
    check_target(params, target, cfg.frames)?;
    let labels = Target::Labels(target.to_vec());
    let mut x = initial_features(cfg, params.dims.input);
    let mut trace = Vec::new();
    if cfg.query_budget == 0 {
        return Ok(Inversion {
            features: x,
            trace,
            queries: 0,
        });
    }
    let mut queries = 1;
    let mut current = evaluate(params, &x, &labels, Want::INPUT)?;
    trace.push(-current.loss);
    'outer: for _ in 0..cfg.steps {
        let grad = current.input_grad.take().expect("input gradient requested");
        let mut eta = cfg.step_size;
        for _ in 0..=MAX_HALVINGS {
            if queries >= cfg.query_budget {
                break 'outer;
            }
            let mut candidate = x.clone();
            for (v, g) in candidate.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *v -= eta * g;
            }
            queries += 1;
            let eval = evaluate(params, &candidate, &labels, Want::INPUT)?;
            if eval.loss.is_finite() && -eval.loss >= -current.loss {
                x = candidate;
                current = eval;
                trace.push(-current.loss);
                continue 'outer;
            }
            eta *= 0.5;
        }
        break;
    }
    Ok(Inversion {
        features: x,
        trace,
        queries,
    })
}

/// Mean-pool `x` into `segments` contiguous, near-equal runs of frames.
pub fn pool_segments(x: &Matrix, segments: usize) -> Result<Matrix> {
    if segments == 0 || segments > x.rows() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "cannot pool {} frames into {segments} segments",
            x.rows()
        )));
    }
    let mut out = Matrix::zeros(segments, x.cols());
    for s in 0..segments {
        let (lo, hi) = (s * x.rows() / segments, (s + 1) * x.rows() / segments);
        for t in lo..hi {
            for (o, v) in out.row_mut(s).iter_mut().zip(x.row(t)) {
                *o += v;
            }
        }
        let n = (hi - lo) as f64;
        out.row_mut(s).iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}

/// `U × F` reference: the class mean of each target token.
pub fn token_template(class_means: &Matrix, tokens: &[usize]) -> Result<Matrix> {
    if tokens.is_empty() {
        return Err(Error::DimensionMismatch("empty target".into()));
    }
    if tokens.iter().any(|&k| k >= class_means.rows()) {
        return Err(Error::DimensionMismatch(
            "token without a class mean".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&k| class_means.row(k).to_vec())
        .collect();
    Matrix::from_rows(&rows)
}

/// Mean of the frames the model aligns to each target token (`U × F`), using
/// the most probable alignment under the model's frame posteriors.
pub fn token_segments(params: &ModelParams, features: &Matrix, target: &[usize]) -> Result<Matrix> {
    let log_probs = frame_log_posteriors(params, features)?;
    let rule = params.arch.collapse_rule();
    let alignment =
        forced_alignment(&log_probs, target, rule, params.dims.blank()).map_err(|_| {
            Error::InfeasibleTarget {
                labels: target.len(),
                frames: features.rows(),
            }
        })?;
    let mut out = Matrix::zeros(target.len(), features.cols());
    let mut counts = vec![0usize; target.len()];
    for (t, a) in alignment.iter().enumerate() {
        if let Some(u) = *a {
            counts[u] += 1;
            for (o, v) in out.row_mut(u).iter_mut().zip(features.row(t)) {
                *o += v;
            }
        }
    }
    for (u, &n) in counts.iter().enumerate() {
        out.row_mut(u).iter_mut().for_each(|o| *o /= n as f64);
    }
    Ok(out)
}

/// Divide each column by its root mean square. Columns are not centered: with
/// one row per token, centering would leave only the sign of each difference.
fn standardized(x: &Matrix) -> Vec<f64> {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = x.as_slice().to_vec();
    for c in 0..cols {
        let rms = sqrt((0..rows).map(|r| x.get(r, c) * x.get(r, c)).sum::<f64>() / rows as f64);
        for r in 0..rows {
            out[r * cols + c] = if rms > 0.0 { x.get(r, c) / rms } else { 0.0 };
        }
    }
    out
}

/// Cosine similarity of the flattened matrices after per-column scaling. When frame
/// counts differ, the longer matrix is mean-pooled into as many segments as
/// the shorter one has rows.
pub fn similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "{} vs {} feature columns",
            a.cols(),
            b.cols()
        )));
    }
    let (a, b) = match a.rows().cmp(&b.rows()) {
        core::cmp::Ordering::Greater => (pool_segments(a, b.rows())?, b.clone()),
        core::cmp::Ordering::Less => (a.clone(), pool_segments(b, a.rows())?),
        core::cmp::Ordering::Equal => (a.clone(), b.clone()),
    };
    let (za, zb) = (standardized(&a), standardized(&b));
    let dot: f64 = za.iter().zip(&zb).map(|(x, y)| x * y).sum();
    let na = sqrt(za.iter().map(|v| v * v).sum());
    let nb = sqrt(zb.iter().map(|v| v * v).sum());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// A model under attack and the budget it was trained with (`∞` = no privacy).
#[derive(Debug, Clone, Copy)]
pub struct AttackTarget<'a> {
    pub epsilon: f64,
    pub params: &'a ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttackTrial {
    pub epsilon: f64,
    pub trial: usize,
    pub similarity: f64,
    pub final_loglik: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttackSummary {
    pub epsilon: f64,
    pub mean: f64,
    pub se: f64,
    /// Mean similarity is more than two pooled standard errors below the no-privacy mean.
    pub protected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub trials: Vec<AttackTrial>,
    pub summary: Vec<AttackSummary>,
}

pub const MIN_TRIALS: usize = 5;

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, sqrt(var / n))
}

/// Invert every model `trials` times from random starts shared across models
/// (trial `i` starts from the same features for each model) and compare each
/// reconstruction's per-token segment means with `reference` (`U × F`, e.g.
/// [`token_template`]).
pub fn attack_report(
    no_dp: &ModelParams,
    private: &[AttackTarget<'_>],
    target: &[usize],
    reference: &Matrix,
    cfg: &InvertConfig,
    trials: usize,
    seed: u64,
) -> Result<AttackReport> {
    if trials < MIN_TRIALS {
        return Err(Error::InvalidConfig(alloc::format!(
            "attack needs at least {MIN_TRIALS} trials, got {trials}"
        )));
    }
    let mut models = vec![AttackTarget {
        epsilon: f64::INFINITY,
        params: no_dp,
    }];
    models.extend_from_slice(private);
    let jobs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|m| (0..trials).map(move |t| (m, t)))
        .collect();
    let results = par::map(&jobs, |&(m, t)| -> Result<AttackTrial> {
        let init = InitKind::Random(crate::rng::derive_seed(seed, purpose::ATTACK, t as u64, 0));
        let inv = invert(
            models[m].params,
            target,
            &InvertConfig {
                init,
                ..cfg.clone()
            },
        )?;
        Ok(AttackTrial {
            epsilon: models[m].epsilon,
            trial: t,
            similarity: similarity(
                &token_segments(models[m].params, &inv.features, target)?,
                reference,
            )?,
            final_loglik: inv.final_log_likelihood(),
        })
    });
    let trials_out = results.into_iter().collect::<Result<Vec<_>>>()?;
    let sims: Vec<Vec<f64>> = (0..models.len())
        .map(|m| {
            trials_out[m * trials..(m + 1) * trials]
                .iter()
                .map(|r| r.similarity)
                .collect()
        })
        .collect();
    let (base_mean, base_se) = mean_se(&sims[0]);
    let summary = models
        .iter()
        .zip(&sims)
        .map(|(m, s)| {
            let (mean, se) = mean_se(s);
            let pooled = sqrt(se * se + base_se * base_se);
            AttackSummary {
                epsilon: m.epsilon,
                mean,
                se,
                protected: mean < base_mean - 2.0 * pooled,
            }
        })
        .collect();
    Ok(AttackReport {
        trials: trials_out,
        summary,
    })
}
