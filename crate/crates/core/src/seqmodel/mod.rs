//! Trainable sequence models with exact sequence losses.
//!
//! Three architectures share one flat parameter vector format:
//!
//! - [`Arch::FrameClassifier`]: a per-frame linear softmax layer.
//! - [`Arch::Ctc`]: a single-layer tanh recurrence with a linear softmax head,
//!   trained with CTC.
//! - [`Arch::Rnnt`]: the same encoder plus a tanh prediction recurrence over
//!   previous labels and an additive joint layer, trained with the transducer
//!   loss.
//!
//! Symbol `vocab` is the blank; tokens are `0..vocab`.

mod ctc;
mod decode;
mod gradcheck;
mod network;
mod objective;
mod params;
mod rnnt;
mod train;

pub use ctc::{ctc_loss, ctc_loss_log};
pub use decode::{
    beam_search, collapse, forced_alignment, greedy_decode, greedy_frames, sequence_log_prob,
    CollapseRule, Hypothesis, BEAM_FLOOR,
};
pub use gradcheck::{grad_check, grad_check_model};
pub use network::{
    decode, forward, frame_log_posteriors, transducer_lattice, MAX_SYMBOLS_PER_FRAME,
};
pub use objective::{
    evaluate, kd_loss, kd_loss_from_log_probs, Evaluation, Target, Want, KD_LOG_FLOOR,
};
pub use params::{Arch, Block, Dims, Gradient, ModelParams};
pub use rnnt::{rnnt_loss, Lattice};
pub use train::{
    mean_gradient, train, train_with, Example, OptimizerKind, TrainConfig, TrainOutcome,
};

use alloc::vec::Vec;

use crate::linalg::Matrix;
use crate::math::{exp, ln};
use crate::{Error, Result};

/// Tolerance on row sums accepted by [`PosteriorSeq::new`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// `T × (V + 1)` per-frame label posteriors; every row is a distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSeq {
    probs: Matrix,
}

impl PosteriorSeq {
    pub fn new(probs: Matrix) -> Result<Self> {
        for (t, row) in probs.iter_rows().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::DimensionMismatch(alloc::format!(
                    "row {t} has a negative or NaN entry"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::DimensionMismatch(alloc::format!(
                    "row {t} sums to {s}"
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn from_log_probs(log_probs: &Matrix) -> Self {
        let data = log_probs.as_slice().iter().map(|&l| exp(l)).collect();
        Self {
            probs: Matrix::from_vec(log_probs.rows(), log_probs.cols(), data).expect("same shape"),
        }
    }

    /// Wraps rows the caller guarantees are distributions up to rounding.
    pub(crate) fn trusted(probs: Matrix) -> Self {
        Self { probs }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(Matrix::from_rows(&rows)?)
    }

    pub fn frames(&self) -> usize {
        self.probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.probs.row(t)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.probs
    }

    pub fn log_probs(&self) -> Matrix {
        let data = self.probs.as_slice().iter().map(|&p| ln(p)).collect();
        Matrix::from_vec(self.probs.rows(), self.probs.cols(), data).expect("same shape")
    }
}

#[cfg(test)]
mod tests;
