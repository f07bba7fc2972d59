//! Private aggregation of teacher ensembles for sequence labeling.
//!
//! Teachers train on disjoint private shards; the public set is relabeled
//! through a noisy aggregate (per-frame report-noisy-max over teacher votes, or
//! noisy posterior averaging), each public utterance counting as one query;
//! a student then trains on the relabeled public set with a hard-label
//! sequence loss plus sequence-level distillation from the released N-best.

use alloc::vec;
use alloc::vec::Vec;

use crate::accountant::{AccountingReport, PrivacyBudget};
use crate::corpus::{Corpus, CorpusPartition, Utterance};
use crate::linalg::Matrix;
use crate::math::{argmax, exp};
use crate::mechanisms::{
    noisy_aggregate_posterior, noisy_counts, weighted_average, NoiseKind, NoiseSpec, VoteHistogram,
};
use crate::rng::{derive_seed, purpose, stream};
use crate::seqmodel::{
    beam_search, collapse, frame_log_posteriors, train, Arch, CollapseRule, Dims, Example,
    Hypothesis, ModelParams, PosteriorSeq, Target, TrainConfig,
};
use crate::{par, Error, Result};

/// Teachers with aggregation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEnsemble {
    teachers: Vec<ModelParams>,
    weights: Vec<f64>,
}

impl TeacherEnsemble {
    pub fn new(teachers: Vec<ModelParams>, weights: Vec<f64>) -> Result<Self> {
        let Some(first) = teachers.first() else {
            return Err(Error::InvalidConfig(
                "an ensemble needs at least one teacher".into(),
            ));
        };
        if teachers
            .iter()
            .any(|t| t.arch != first.arch || t.dims != first.dims)
        {
            return Err(Error::DimensionMismatch(
                "teachers differ in architecture".into(),
            ));
        }
        if weights.len() != teachers.len() {
            return Err(Error::InvalidWeights);
        }
        crate::mechanisms::check_simplex_weights(&weights)?;
        Ok(Self { teachers, weights })
    }

    pub fn uniform(teachers: Vec<ModelParams>) -> Result<Self> {
        let n = teachers.len().max(1);
        Self::new(teachers, vec![1.0 / n as f64; n])
    }

    pub fn teachers(&self) -> &[ModelParams] {
        &self.teachers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn arch(&self) -> Arch {
        self.teachers[0].arch
    }

    pub fn dims(&self) -> Dims {
        self.teachers[0].dims
    }

    pub fn rule(&self) -> CollapseRule {
        self.arch().collapse_rule()
    }
}

/// Architecture and size of a model trained on a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    pub arch: Arch,
    pub hidden: usize,
}

impl ModelSpec {
    pub fn dims(&self, corpus: &Corpus) -> Dims {
        Dims {
            input: corpus.config.feat_dim,
            hidden: self.hidden,
            vocab: corpus.config.vocab,
        }
    }
}

/// Hard-label training examples for the given utterance ids.
pub fn label_examples(corpus: &Corpus, ids: &[usize]) -> Result<Vec<Example>> {
    ids.iter()
        .map(|&id| {
            let u = corpus
                .get(id)
                .ok_or_else(|| Error::InvalidConfig(alloc::format!("no utterance {id}")))?;
            Ok(Example {
                features: u.features.clone(),
                target: Target::Labels(u.tokens.clone()),
            })
        })
        .collect()
}

/// Seed of the teacher trained on `subset`, keyed by its smallest utterance id
/// so a teacher depends only on its own data.
pub fn teacher_seed(seed: u64, subset: &[usize]) -> u64 {
    derive_seed(
        seed,
        purpose::TEACHER,
        subset.iter().min().map_or(u64::MAX, |&m| m as u64),
        0,
    )
}

/// Train one teacher on one private subset. With `init` the teacher
/// fine-tunes from it instead of a fresh initialization.
pub fn train_teacher(
    corpus: &Corpus,
    subset: &[usize],
    model: ModelSpec,
    train_cfg: &TrainConfig,
    seed: u64,
    init: Option<&ModelParams>,
) -> Result<ModelParams> {
    if subset.is_empty() {
        return Err(Error::EmptySubset(0));
    }
    let s = teacher_seed(seed, subset);
    let params = match init {
        Some(p) => p.clone(),
        None => ModelParams::init(model.arch, model.dims(corpus), s)?,
    };
    let cfg = TrainConfig {
        seed: s,
        ..train_cfg.clone()
    };
    Ok(train(params, &label_examples(corpus, subset)?, &cfg)?.params)
}

/// Train one teacher per private subset, with uniform weights.
pub fn train_teachers(
    corpus: &Corpus,
    partition: &CorpusPartition,
    model: ModelSpec,
    train_cfg: &TrainConfig,
    seed: u64,
    init: Option<&ModelParams>,
) -> Result<TeacherEnsemble> {
    if let Some(i) = partition.subsets.iter().position(|s| s.is_empty()) {
        return Err(Error::EmptySubset(i));
    }
    let teachers = par::map(&partition.subsets, |subset| {
        train_teacher(corpus, subset, model, train_cfg, seed, init)
    });
    TeacherEnsemble::uniform(teachers.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Per-teacher `T × C` frame posteriors (probabilities).
pub fn teacher_posteriors(ensemble: &TeacherEnsemble, features: &Matrix) -> Result<Vec<Matrix>> {
    ensemble
        .teachers
        .iter()
        .map(|t| {
            let mut m = frame_log_posteriors(t, features)?;
            m.as_mut_slice().iter_mut().for_each(|v| *v = exp(*v));
            Ok(m)
        })
        .collect()
}

/// Frame-wise weighted average of the teachers' posteriors.
pub fn aggregate(ensemble: &TeacherEnsemble, features: &Matrix) -> Result<PosteriorSeq> {
    let posts = teacher_posteriors(ensemble, features)?;
    let (t_len, c) = (features.rows(), ensemble.dims().classes());
    let mut out = Matrix::zeros(t_len, c);
    for t in 0..t_len {
        let rows: Vec<&[f64]> = posts.iter().map(|p| p.row(t)).collect();
        out.row_mut(t)
            .copy_from_slice(&weighted_average(&rows, &ensemble.weights, c));
    }
    Ok(PosteriorSeq::trusted(out))
}

/// Greedy decode of the noiseless aggregate.
pub fn ensemble_decode(ensemble: &TeacherEnsemble, features: &Matrix) -> Result<Vec<usize>> {
    let post = aggregate(ensemble, features)?;
    Ok(collapse(
        &crate::seqmodel::greedy_frames(&post),
        ensemble.rule(),
        ensemble.dims().blank(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RelabelMode {
    /// Each teacher votes its per-frame argmax symbol; report-noisy-max picks the label.
    VoteNoisyMax,
    /// Noisy weighted average of teacher posteriors per frame.
    PosteriorNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelabelConfig {
    pub mode: RelabelMode,
    pub noise: NoiseSpec,
    /// N-best list size released for distillation.
    pub nbest: usize,
    /// Seeds the per-utterance noise streams.
    pub seed: u64,
    pub delta: f64,
    /// Refuse to release if the spent budget would exceed this.
    pub target: Option<PrivacyBudget>,
}

/// Per-query sensitivity of releasing one utterance of `frames` frames
/// (utterance lengths are public): every frame's vote histogram (or teacher posterior row) moves by at
/// most 2 in L1 and √2 in L2 when one teacher changes.
pub fn query_sensitivity(kind: NoiseKind, frames: usize) -> f64 {
    let t = frames as f64;
    match kind {
        NoiseKind::Gaussian => crate::math::sqrt(2.0 * t),
        NoiseKind::Laplace | NoiseKind::None => 2.0 * t,
    }
}

/// Longest utterance among the queries.
pub fn max_frames(public: &[&Utterance]) -> usize {
    public.iter().map(|u| u.frames()).max().unwrap_or(0)
}

/// One sensitivity per relabeling query.
pub fn query_sensitivities(kind: NoiseKind, public: &[&Utterance]) -> Vec<f64> {
    public
        .iter()
        .map(|u| query_sensitivity(kind, u.frames()))
        .collect()
}

/// Noise spec meeting `target` for relabeling `public`.
pub fn calibrate_relabel_noise(
    target: PrivacyBudget,
    public: &[&Utterance],
    kind: NoiseKind,
) -> Result<NoiseSpec> {
    crate::accountant::calibrate_noise_for_queries(target, kind, &query_sensitivities(kind, public))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LabeledUtterance {
    pub utterance_id: usize,
    /// Released per-frame hard labels, blank included.
    pub frame_labels: Vec<usize>,
    pub nbest: Vec<Hypothesis>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentLabelSet {
    pub entries: Vec<LabeledUtterance>,
    pub rule: CollapseRule,
    pub blank: usize,
    pub spent: PrivacyBudget,
    pub report: AccountingReport,
}

impl LabeledUtterance {
    pub fn tokens(&self, rule: CollapseRule, blank: usize) -> Vec<usize> {
        collapse(&self.frame_labels, rule, blank)
    }
}

/// Clip-and-normalize noisy counts into a distribution; uniform if nothing survives.
fn counts_to_distribution(noisy: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = noisy
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    let total: f64 = clipped.iter().sum();
    if total > 0.0 {
        clipped.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / noisy.len() as f64; noisy.len()]
    }
}

fn frame_votes(posts: &[Matrix], t: usize) -> impl Iterator<Item = usize> + '_ {
    posts.iter().map(move |p| argmax(p.row(t)))
}

fn relabel_one(
    ensemble: &TeacherEnsemble,
    u: &Utterance,
    cfg: &RelabelConfig,
) -> Result<LabeledUtterance> {
    let posts = teacher_posteriors(ensemble, &u.features)?;
    let c = ensemble.dims().classes();
    let mut rng = stream(cfg.seed, purpose::RELABEL, u.id as u64, 0);
    let mut released = Matrix::zeros(u.frames(), c);
    let mut frame_labels = Vec::with_capacity(u.frames());
    for t in 0..u.frames() {
        let row = match cfg.mode {
            RelabelMode::VoteNoisyMax => {
                let noisy = noisy_counts(
                    &VoteHistogram::from_votes(frame_votes(&posts, t), c)?,
                    &cfg.noise,
                    &mut rng,
                );
                frame_labels.push(argmax(&noisy));
                counts_to_distribution(&noisy)
            }
            RelabelMode::PosteriorNoise => {
                let rows: Vec<&[f64]> = posts.iter().map(|p| p.row(t)).collect();
                let row =
                    noisy_aggregate_posterior(&rows, &ensemble.weights, &cfg.noise, &mut rng)?;
                frame_labels.push(argmax(&row));
                row
            }
        };
        released.row_mut(t).copy_from_slice(&row);
    }
    let nbest = beam_search(&PosteriorSeq::trusted(released), ensemble.rule(), cfg.nbest)?;
    Ok(LabeledUtterance {
        utterance_id: u.id,
        frame_labels,
        nbest,
    })
}

/// Relabel the public set through the noisy aggregate. Each utterance is one
/// query; the N-best lists are post-processing of the same release.
pub fn relabel_public(
    ensemble: &TeacherEnsemble,
    public: &[&Utterance],
    cfg: &RelabelConfig,
) -> Result<StudentLabelSet> {
    if public.is_empty() {
        return Err(Error::InvalidConfig("empty public set".into()));
    }
    let report = AccountingReport::for_queries(
        &cfg.noise,
        &query_sensitivities(cfg.noise.kind(), public),
        cfg.delta,
    )?;
    let spent = PrivacyBudget {
        epsilon: report.epsilon.unwrap_or(f64::INFINITY),
        delta: cfg.delta,
    };
    if let Some(target) = cfg.target {
        if spent.epsilon > target.epsilon {
            return Err(Error::BudgetExceeded {
                spent: spent.epsilon,
                target: target.epsilon,
            });
        }
    }
    let entries = par::map(public, |u| relabel_one(ensemble, u, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(StudentLabelSet {
        entries,
        rule: ensemble.rule(),
        blank: ensemble.dims().blank(),
        spent,
        report,
    })
}

/// Reference relabeling straight from the noiseless ensemble: vote-count or
/// aggregate argmax per frame, N-best over the normalized counts or aggregate.
pub fn clean_relabel(
    ensemble: &TeacherEnsemble,
    public: &[&Utterance],
    mode: RelabelMode,
    nbest: usize,
) -> Result<Vec<LabeledUtterance>> {
    let c = ensemble.dims().classes();
    public
        .iter()
        .map(|u| {
            let (frame_labels, dist) = match mode {
                RelabelMode::PosteriorNoise => {
                    let agg = aggregate(ensemble, &u.features)?;
                    (crate::seqmodel::greedy_frames(&agg), agg)
                }
                RelabelMode::VoteNoisyMax => {
                    let posts = teacher_posteriors(ensemble, &u.features)?;
                    let mut m = Matrix::zeros(u.frames(), c);
                    let mut labels = Vec::with_capacity(u.frames());
                    for t in 0..u.frames() {
                        let counts: Vec<f64> =
                            VoteHistogram::from_votes(frame_votes(&posts, t), c)?
                                .counts()
                                .iter()
                                .map(|&n| f64::from(n))
                                .collect();
                        labels.push(argmax(&counts));
                        m.row_mut(t)
                            .copy_from_slice(&counts_to_distribution(&counts));
                    }
                    (labels, PosteriorSeq::trusted(m))
                }
            };
            let nbest = beam_search(&dist, ensemble.rule(), nbest)?;
            Ok(LabeledUtterance {
                utterance_id: u.id,
                frame_labels,
                nbest,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentConfig {
    pub model: ModelSpec,
    /// Weight of the distillation term; 0 trains on hard labels only.
    pub kd_weight: f64,
    pub train: TrainConfig,
    /// Seeds initialization and shuffling.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutcome {
    pub params: ModelParams,
    /// Carried over verbatim from the label set: training on released labels is post-processing.
    pub spent: PrivacyBudget,
    pub loss_trace: Vec<f64>,
}

/// Student training examples from relabeled public utterances.
pub fn student_examples(
    entries: &[LabeledUtterance],
    public: &[&Utterance],
    rule: CollapseRule,
    blank: usize,
    kd_weight: f64,
) -> Result<Vec<Example>> {
    if entries.len() != public.len() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "{} labels for {} utterances",
            entries.len(),
            public.len()
        )));
    }
    entries
        .iter()
        .zip(public)
        .map(|(e, u)| {
            if e.utterance_id != u.id || e.frame_labels.len() != u.frames() {
                return Err(Error::DimensionMismatch(alloc::format!(
                    "labels for {} do not match utterance {}",
                    e.utterance_id,
                    u.id
                )));
            }
            let labels = e.tokens(rule, blank);
            let target = if kd_weight > 0.0 && !e.nbest.is_empty() {
                Target::Distill {
                    labels,
                    nbest: e.nbest.clone(),
                    kd_weight,
                }
            } else {
                Target::Labels(labels)
            };
            Ok(Example {
                features: u.features.clone(),
                target,
            })
        })
        .collect()
}

/// Train a student on relabeled entries (the shared core of the private and
/// clean pipelines).
pub fn train_student_on(
    entries: &[LabeledUtterance],
    public: &[&Utterance],
    rule: CollapseRule,
    dims: Dims,
    cfg: &StudentConfig,
    init: Option<&ModelParams>,
) -> Result<(ModelParams, Vec<f64>)> {
    if !(cfg.kd_weight >= 0.0) {
        return Err(Error::InvalidConfig(
            "kd_weight must be non-negative".into(),
        ));
    }
    let data = student_examples(entries, public, rule, dims.blank(), cfg.kd_weight)?;
    let s = derive_seed(cfg.seed, purpose::STUDENT, 0, 0);
    let params = match init {
        Some(p) => p.clone(),
        None => ModelParams::init(
            cfg.model.arch,
            Dims {
                hidden: cfg.model.hidden,
                ..dims
            },
            s,
        )?,
    };
    let out = train(
        params,
        &data,
        &TrainConfig {
            seed: s,
            ..cfg.train.clone()
        },
    )?;
    Ok((out.params, out.loss_trace))
}

pub fn train_student(
    labels: &StudentLabelSet,
    public: &[&Utterance],
    dims: Dims,
    cfg: &StudentConfig,
    init: Option<&ModelParams>,
) -> Result<StudentOutcome> {
    let (params, loss_trace) =
        train_student_on(&labels.entries, public, labels.rule, dims, cfg, init)?;
    Ok(StudentOutcome {
        params,
        spent: labels.spent,
        loss_trace,
    })
}
