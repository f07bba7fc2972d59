use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::objective::{evaluate, Target, Want};
use super::params::{Gradient, ModelParams};
use crate::linalg::Matrix;
use crate::math::sqrt;
use crate::rng::{purpose, stream};
use crate::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Matrix,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean example loss over each completed epoch, measured as it ran.
    pub loss_trace: Vec<f64>,
    /// Parameter updates applied.
    pub steps: usize,
    /// The step hook asked to stop before the configured epochs finished.
    pub stopped_early: bool,
}

/// Mean of per-example gradients, summed in order.
pub fn mean_gradient(grads: &[Gradient]) -> Gradient {
    let mut sum = Gradient::zeros(grads.first().map_or(0, Gradient::len));
    for g in grads {
        sum.add_assign(g);
    }
    sum.scale(1.0 / grads.len() as f64);
    sum
}

/// Minibatch training on the mean per-example gradient.
pub fn train(params: ModelParams, data: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(params, data, cfg, |_, grads| {
        Ok(Some(mean_gradient(&grads)))
    })
}

/// Minibatch training where `step` turns the batch's per-example gradients
/// (in batch order) into the update direction, or returns `None` to stop.
pub fn train_with<F>(
    mut params: ModelParams,
    data: &[Example],
    cfg: &TrainConfig,
    mut step: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, Vec<Gradient>) -> Result<Option<Gradient>>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("no training examples".into()));
    }
    let n_params = params.values.len();
    let (mut m, mut v) = match cfg.optimizer {
        OptimizerKind::Adam => (vec![0.0; n_params], vec![0.0; n_params]),
        OptimizerKind::Sgd => (Vec::new(), Vec::new()),
    };
    let (mut b1t, mut b2t) = (1.0, 1.0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, purpose::SHUFFLE, epoch as u64, 0));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = per_example(&params, data, batch)?;
            let mut grads = Vec::with_capacity(batch.len());
            for (loss, g) in results {
                if !loss.is_finite() || !g.is_finite() {
                    return Err(Error::DivergenceDetected { epoch });
                }
                epoch_loss += loss;
                grads.push(g);
            }
            let Some(update) = step(steps, grads)? else {
                return Ok(TrainOutcome {
                    params,
                    loss_trace: trace,
                    steps,
                    stopped_early: true,
                });
            };
            let lr = cfg.learning_rate;
            match cfg.optimizer {
                OptimizerKind::Sgd => {
                    for (p, g) in params.values.iter_mut().zip(&update.0) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    b1t *= ADAM_BETA1;
                    b2t *= ADAM_BETA2;
                    for i in 0..n_params {
                        let g = update.0[i];
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = m[i] / (1.0 - b1t);
                        let v_hat = v[i] / (1.0 - b2t);
                        params.values[i] -= lr * m_hat / (sqrt(v_hat) + ADAM_EPS);
                    }
                }
            }
            steps += 1;
            if !params.is_finite() {
                return Err(Error::DivergenceDetected { epoch });
            }
        }
        trace.push(epoch_loss / data.len() as f64);
    }
    Ok(TrainOutcome {
        params,
        loss_trace: trace,
        steps,
        stopped_early: false,
    })
}

fn per_example(
    params: &ModelParams,
    data: &[Example],
    batch: &[usize],
) -> Result<Vec<(f64, Gradient)>> {
    let one = |&i: &usize| -> Result<(f64, Gradient)> {
        let e = evaluate(params, &data[i].features, &data[i].target, Want::PARAMS)?;
        Ok((e.loss, e.grad.expect("requested")))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        batch.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.iter().map(one).collect()
    }
}
