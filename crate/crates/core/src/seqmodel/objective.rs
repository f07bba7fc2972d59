use alloc::vec::Vec;

use super::ctc::ctc_loss_log;
use super::decode::{sequence_log_prob, CollapseRule, Hypothesis};
use super::network::{frame_backward, frame_forward, transducer_backward, transducer_forward};
use super::params::{Arch, Gradient, ModelParams};
use super::rnnt::rnnt_loss;
use super::PosteriorSeq;
use crate::linalg::Matrix;
use crate::math::exp;
use crate::{Error, Result};

/// Student log-probabilities below this are clamped in the distillation term
/// (and contribute no gradient).
pub const KD_LOG_FLOOR: f64 = -700.0;

/// What a training example asks the model to fit.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// A token sequence under the model's sequence loss.
    Labels(Vec<usize>),
    /// Soft per-frame targets under cross-entropy (frame-synchronous models only).
    Frames(PosteriorSeq),
    /// Sequence loss on `labels` plus `kd_weight` times the distillation loss
    /// `-Σ P_n log p(ŷ_n)` over an N-best list.
    Distill {
        labels: Vec<usize>,
        nbest: Vec<Hypothesis>,
        kd_weight: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Want {
    pub params: bool,
    pub input: bool,
}

impl Want {
    pub const LOSS: Want = Want {
        params: false,
        input: false,
    };
    pub const PARAMS: Want = Want {
        params: true,
        input: false,
    };
    pub const INPUT: Want = Want {
        params: false,
        input: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Option<Gradient>,
    pub input_grad: Option<Matrix>,
}

/// Distillation loss of frame posteriors against an N-best list.
pub fn kd_loss(posteriors: &PosteriorSeq, nbest: &[Hypothesis], rule: CollapseRule) -> Result<f64> {
    kd_loss_from_log_probs(&posteriors.log_probs(), nbest, rule)
}

pub fn kd_loss_from_log_probs(
    log_probs: &Matrix,
    nbest: &[Hypothesis],
    rule: CollapseRule,
) -> Result<f64> {
    let blank = log_probs.cols() - 1;
    let mut total = 0.0;
    for h in nbest {
        let lp = sequence_log_prob(log_probs, &h.tokens, rule, blank)?;
        total -= h.normalized_prob * lp.max(KD_LOG_FLOOR);
    }
    Ok(total)
}

/// Loss of `target` on `features`, with the requested gradients.
pub fn evaluate(
    p: &ModelParams,
    features: &Matrix,
    target: &Target,
    want: Want,
) -> Result<Evaluation> {
    let mut grad = want.params.then(|| Gradient::zeros(p.values.len()));
    let mut dx = want
        .input
        .then(|| Matrix::zeros(features.rows(), features.cols()));
    let loss = match p.arch {
        Arch::FrameClassifier | Arch::Ctc => {
            frame_objective(p, features, target, want, &mut grad, &mut dx)?
        }
        Arch::Rnnt => transducer_objective(p, features, target, want, &mut grad, &mut dx)?,
    };
    Ok(Evaluation {
        loss,
        grad,
        input_grad: dx,
    })
}

fn frame_objective(
    p: &ModelParams,
    x: &Matrix,
    target: &Target,
    want: Want,
    grad: &mut Option<Gradient>,
    dx: &mut Option<Matrix>,
) -> Result<f64> {
    let trace = frame_forward(p, x)?;
    let lp = &trace.log_probs;
    let blank = p.dims.blank();
    let (loss, dz) = match target {
        Target::Labels(labels) => ctc_loss_log(lp, labels, blank)?,
        Target::Frames(q) => {
            if q.frames() != lp.rows() || q.classes() != lp.cols() {
                return Err(Error::DimensionMismatch(alloc::format!(
                    "frame targets are {}×{}, model output is {}×{}",
                    q.frames(),
                    q.classes(),
                    lp.rows(),
                    lp.cols()
                )));
            }
            let mut loss = 0.0;
            let mut dz = Matrix::zeros(lp.rows(), lp.cols());
            for t in 0..lp.rows() {
                for (k, (&qk, &lk)) in q.row(t).iter().zip(lp.row(t)).enumerate() {
                    if qk > 0.0 {
                        loss -= qk * lk;
                    }
                    dz.set(t, k, exp(lk) - qk);
                }
            }
            (loss, dz)
        }
        Target::Distill {
            labels,
            nbest,
            kd_weight,
        } => {
            let (mut loss, mut dz) = ctc_loss_log(lp, labels, blank)?;
            for h in nbest {
                let (nll, dz_n) = ctc_loss_log(lp, &h.tokens, blank)?;
                let w = kd_weight * h.normalized_prob;
                if nll < -KD_LOG_FLOOR {
                    loss += w * nll;
                    for (a, b) in dz.as_mut_slice().iter_mut().zip(dz_n.as_slice()) {
                        *a += w * b;
                    }
                } else {
                    loss += w * -KD_LOG_FLOOR;
                }
            }
            (loss, dz)
        }
    };
    if want.params || want.input {
        frame_backward(
            p,
            x,
            &trace,
            &dz,
            grad.as_mut().map(|g| g.0.as_mut_slice()),
            dx.as_mut(),
        );
    }
    Ok(loss)
}

fn transducer_objective(
    p: &ModelParams,
    x: &Matrix,
    target: &Target,
    want: Want,
    grad: &mut Option<Gradient>,
    dx: &mut Option<Matrix>,
) -> Result<f64> {
    let mut terms: Vec<(&[usize], f64)> = Vec::new();
    match target {
        Target::Labels(labels) => terms.push((labels, 1.0)),
        Target::Frames(_) => {
            return Err(Error::InvalidConfig(
                "soft frame targets need a frame-synchronous model".into(),
            ))
        }
        Target::Distill {
            labels,
            nbest,
            kd_weight,
        } => {
            terms.push((labels, 1.0));
            terms.extend(
                nbest
                    .iter()
                    .map(|h| (h.tokens.as_slice(), kd_weight * h.normalized_prob)),
            );
        }
    }
    let mut loss = 0.0;
    for (i, (labels, w)) in terms.into_iter().enumerate() {
        let trace = transducer_forward(p, x, labels)?;
        let (nll, mut dz) = rnnt_loss(&trace.lattice, labels, p.dims.blank())?;
        // The first term is the hard-label loss; the rest are floored distillation terms.
        if i > 0 && nll >= -KD_LOG_FLOOR {
            loss += w * -KD_LOG_FLOOR;
            continue;
        }
        loss += w * nll;
        if want.params || want.input {
            dz.scale(w);
            transducer_backward(
                p,
                x,
                labels,
                &trace,
                &dz,
                grad.as_mut().map(|g| g.0.as_mut_slice()),
                dx.as_mut(),
            );
        }
    }
    Ok(loss)
}
