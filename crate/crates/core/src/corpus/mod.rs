//! Synthetic speech-like corpus, teacher partitioning and error metrics.
//!
//! Each token owns a class-mean feature vector; an utterance is a uniformly
//! drawn token sequence where every token emits a random number of frames
//! scattered around its class mean, shifted by a fixed per-speaker offset.

mod metrics;
mod partition;

pub use metrics::{edit_distance, model_error_rate, token_error_rate, EditOps, ErrorTally};
pub use partition::{partition, CorpusPartition, PartitionStrategy};

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::Matrix;
use crate::rng::{purpose, stream, Stream};
use crate::{Error, Result};

/// Seed of the stream the class means are drawn from unless overridden.
pub const CLASS_MEANS_SEED: u64 = 0x05EE_D0FC_1A55;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct CorpusConfig {
    pub vocab: usize,
    pub feat_dim: usize,
    /// Inclusive range of frames emitted per token.
    pub frames_per_token: (usize, usize),
    /// Inclusive range of tokens per utterance.
    pub tokens_per_utterance: (usize, usize),
    pub emission_std: f64,
    pub speaker_offset_std: f64,
    pub speakers: usize,
    pub utterances: usize,
    pub seed: u64,
    pub means_seed: u64,
    /// Constant added to every class mean; a second corpus with a shift models
    /// a domain change.
    pub mean_shift: f64,
    /// Explicit `vocab × feat_dim` class means, overriding `means_seed`.
    pub class_means: Option<Vec<Vec<f64>>>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab: 8,
            feat_dim: 8,
            frames_per_token: (4, 12),
            tokens_per_utterance: (2, 4),
            emission_std: 0.5,
            speaker_offset_std: 0.3,
            speakers: 24,
            utterances: 1440,
            seed: 1,
            means_seed: CLASS_MEANS_SEED,
            mean_shift: 0.0,
            class_means: None,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (usize, usize)| {
            if lo == 0 || lo > hi {
                Err(Error::InvalidRange(alloc::format!("{name} = [{lo}, {hi}]")))
            } else {
                Ok(())
            }
        };
        if self.vocab < 2 {
            return Err(Error::InvalidRange(alloc::format!(
                "vocab = {} (need >= 2)",
                self.vocab
            )));
        }
        if self.feat_dim == 0 || self.speakers == 0 {
            return Err(Error::InvalidRange(
                "feat_dim and speakers must be >= 1".into(),
            ));
        }
        range("frames_per_token", self.frames_per_token)?;
        range("tokens_per_utterance", self.tokens_per_utterance)?;
        if !(self.emission_std >= 0.0) || !(self.speaker_offset_std >= 0.0) {
            return Err(Error::InvalidRange(
                "standard deviations must be >= 0".into(),
            ));
        }
        if let Some(m) = &self.class_means {
            if m.len() != self.vocab || m.iter().any(|r| r.len() != self.feat_dim) {
                return Err(Error::DimensionMismatch(
                    "class_means must be vocab x feat_dim".into(),
                ));
            }
        }
        Ok(())
    }

    /// Longest possible utterance in frames.
    pub fn max_frames(&self) -> usize {
        self.frames_per_token.1 * self.tokens_per_utterance.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: usize,
    pub speaker: usize,
    pub tokens: Vec<usize>,
    /// `frames × feat_dim`.
    pub features: Matrix,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    /// `vocab × feat_dim`.
    pub class_means: Matrix,
    /// `speakers × feat_dim`.
    pub speaker_offsets: Matrix,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Utterance> {
        // ids are dense and ordered in generated corpora; fall back to a scan otherwise
        match self.utterances.get(id) {
            Some(u) if u.id == id => Some(u),
            _ => self.utterances.iter().find(|u| u.id == id),
        }
    }

    /// Speakers with at least one utterance among `ids`.
    pub fn speakers_of(&self, ids: &[usize]) -> Vec<usize> {
        let mut s: Vec<usize> = ids
            .iter()
            .filter_map(|&i| self.get(i))
            .map(|u| u.speaker)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Fresh utterances from the same generator (same class means and speakers)
    /// for evaluation. `stream_tag` separates independent held-out sets.
    pub fn held_out(&self, count: usize, stream_tag: u64) -> Vec<Utterance> {
        (0..count)
            .map(|i| {
                let mut rng = stream(self.config.seed, purpose::HELD_OUT, stream_tag, i as u64);
                draw_utterance(
                    &self.config,
                    &self.class_means,
                    &self.speaker_offsets,
                    i,
                    &mut rng,
                )
            })
            .collect()
    }
}

/// Generate a corpus. Utterance `i` depends only on `(seed, i)`.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let class_means = class_means(config)?;
    let mut rng = stream(config.seed, purpose::SPEAKERS, 0, 0);
    let mut speaker_offsets = Matrix::zeros(config.speakers, config.feat_dim);
    for v in speaker_offsets.as_mut_slice() {
        let z: f64 = rng.sample(StandardNormal);
        *v = config.speaker_offset_std * z;
    }
    let utterances = (0..config.utterances)
        .map(|i| {
            let mut rng = stream(config.seed, purpose::UTTERANCE, i as u64, 0);
            draw_utterance(config, &class_means, &speaker_offsets, i, &mut rng)
        })
        .collect();
    Ok(Corpus {
        config: config.clone(),
        class_means,
        speaker_offsets,
        utterances,
    })
}

fn class_means(config: &CorpusConfig) -> Result<Matrix> {
    let mut means = match &config.class_means {
        Some(rows) => Matrix::from_rows(rows)?,
        None => {
            let mut rng = stream(config.means_seed, purpose::CLASS_MEANS, 0, 0);
            let mut m = Matrix::zeros(config.vocab, config.feat_dim);
            for v in m.as_mut_slice() {
                *v = rng.sample(StandardNormal);
            }
            m
        }
    };
    if config.mean_shift != 0.0 {
        for v in means.as_mut_slice() {
            *v += config.mean_shift;
        }
    }
    Ok(means)
}

fn draw_utterance(
    config: &CorpusConfig,
    means: &Matrix,
    offsets: &Matrix,
    id: usize,
    rng: &mut Stream,
) -> Utterance {
    let speaker = rng.random_range(0..config.speakers);
    let (lo, hi) = config.tokens_per_utterance;
    let len = rng.random_range(lo..=hi);
    let tokens: Vec<usize> = (0..len)
        .map(|_| rng.random_range(0..config.vocab))
        .collect();
    let (flo, fhi) = config.frames_per_token;
    let mut data = Vec::new();
    let mut frames = 0;
    for &tok in &tokens {
        let n = rng.random_range(flo..=fhi);
        for _ in 0..n {
            for d in 0..config.feat_dim {
                let z: f64 = if config.emission_std > 0.0 {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                };
                data.push(means.get(tok, d) + offsets.get(speaker, d) + config.emission_std * z);
            }
        }
        frames += n;
    }
    let features =
        Matrix::from_vec(frames, config.feat_dim, data).expect("frame buffer matches shape");
    Utterance {
        id,
        speaker,
        tokens,
        features,
    }
}
