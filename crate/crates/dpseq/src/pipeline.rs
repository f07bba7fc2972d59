//! In-memory experiment steps shared by the CLI stages and the sweep.

use dpseq_core::accountant::PrivacyBudget;
use dpseq_core::corpus::{
    generate_corpus, model_error_rate, partition, Corpus, CorpusConfig, CorpusPartition, Utterance,
};
use dpseq_core::dpsgd::{calibrate_multiplier, dpsgd_train, DpSgdConfig, DpSgdOutcome};
use dpseq_core::mechanisms::{NoiseKind, NoiseSpec};
use dpseq_core::pate::{
    calibrate_relabel_noise, label_examples, relabel_public, train_student, train_teachers,
    RelabelConfig, RelabelMode, StudentConfig, StudentLabelSet, StudentOutcome, TeacherEnsemble,
};
use dpseq_core::rng::derive_seed;
use dpseq_core::seqmodel::{train, ModelParams};

use crate::config::Config;
use crate::error::{Error, Result};

/// Stream purpose for the pretraining corpus and model (outside the core's range).
const PRETRAIN: u64 = 100;
/// Stream purpose for the DP-SGD model initialization.
const DPSGD_INIT: u64 = 101;

/// Tag of the held-out evaluation stream.
pub const EVAL_TAG: u64 = 0;

pub fn corpus_config(cfg: &Config) -> CorpusConfig {
    CorpusConfig {
        seed: cfg.seed,
        ..cfg.corpus.clone()
    }
}

pub fn eval_set(corpus: &Corpus, cfg: &Config) -> Vec<Utterance> {
    corpus.held_out(cfg.eval.held_out, EVAL_TAG)
}

/// The shifted pretraining corpus for `corpus`.
pub fn pretrain_corpus(corpus: &Corpus, cfg: &Config) -> Result<Corpus> {
    let c = CorpusConfig {
        seed: derive_seed(cfg.seed, PRETRAIN, 0, 0),
        utterances: cfg.pretrain.utterances,
        mean_shift: corpus.config.mean_shift + cfg.pretrain.mean_shift,
        ..corpus.config.clone()
    };
    Ok(generate_corpus(&c)?)
}

/// Non-private base model trained on the shifted corpus, when pretraining is enabled.
pub fn pretrained(corpus: &Corpus, cfg: &Config) -> Result<Option<ModelParams>> {
    if !cfg.pretrain.enabled {
        return Ok(None);
    }
    let shifted = pretrain_corpus(corpus, cfg)?;
    let ids: Vec<usize> = shifted.utterances.iter().map(|u| u.id).collect();
    let data = label_examples(&shifted, &ids)?;
    let seed = derive_seed(cfg.seed, PRETRAIN, 1, 0);
    let init = ModelParams::init(cfg.model.arch, cfg.model_spec().dims(corpus), seed)?;
    let tc = dpseq_core::seqmodel::TrainConfig {
        epochs: cfg.pretrain.epochs,
        ..cfg.teacher.train_config(seed)
    };
    Ok(Some(train(init, &data, &tc)?.params))
}

pub fn split(corpus: &Corpus, cfg: &Config) -> Result<CorpusPartition> {
    Ok(partition(
        corpus,
        cfg.partition.teachers,
        cfg.partition.strategy,
        cfg.partition.public_fraction,
        cfg.seed,
    )?)
}

pub fn teachers(
    corpus: &Corpus,
    part: &CorpusPartition,
    cfg: &Config,
    init: Option<&ModelParams>,
) -> Result<TeacherEnsemble> {
    Ok(train_teachers(
        corpus,
        part,
        cfg.model_spec(),
        &cfg.teacher.train_config(cfg.seed),
        cfg.seed,
        init,
    )?)
}

pub fn public_set<'a>(corpus: &'a Corpus, ids: &[usize]) -> Result<Vec<&'a Utterance>> {
    ids.iter()
        .map(|&i| {
            corpus
                .get(i)
                .ok_or_else(|| Error::Mismatch(format!("utterance {i} is not in the corpus")))
        })
        .collect()
}

/// Noise for relabeling: an explicit scale, else calibrated to `epsilon`, else none.
pub fn relabel_noise(
    kind: NoiseKind,
    scale: Option<f64>,
    epsilon: Option<f64>,
    delta: f64,
    public: &[&Utterance],
) -> Result<NoiseSpec> {
    Ok(match (kind, scale, epsilon) {
        (NoiseKind::None, _, _) | (_, None, None) => NoiseSpec::NONE,
        (_, Some(s), _) => NoiseSpec::new(kind, s)?,
        (_, None, Some(e)) => calibrate_relabel_noise(PrivacyBudget::new(e, delta)?, public, kind)?,
    })
}

pub fn relabel(
    ensemble: &TeacherEnsemble,
    public: &[&Utterance],
    cfg: &Config,
    mode: RelabelMode,
    noise: NoiseSpec,
    epsilon: Option<f64>,
) -> Result<StudentLabelSet> {
    let target = epsilon
        .map(|e| PrivacyBudget::new(e, cfg.budget.delta))
        .transpose()?;
    let rc = RelabelConfig {
        mode,
        noise,
        nbest: cfg.student.nbest,
        seed: cfg.seed,
        delta: cfg.budget.delta,
        target,
    };
    Ok(relabel_public(ensemble, public, &rc)?)
}

pub fn student(
    labels: &StudentLabelSet,
    public: &[&Utterance],
    corpus: &Corpus,
    cfg: &Config,
    init: Option<&ModelParams>,
) -> Result<StudentOutcome> {
    let sc = StudentConfig {
        model: cfg.model_spec(),
        kd_weight: cfg.student.kd_weight,
        train: cfg.student.train_config(cfg.seed),
        seed: cfg.seed,
    };
    Ok(train_student(
        labels,
        public,
        cfg.model_spec().dims(corpus),
        &sc,
        init,
    )?)
}

/// DP-SGD on the union of the teachers' private subsets. Without an explicit
/// noise multiplier, σ is calibrated so the planned run spends `epsilon`.
/// Returns the outcome and the σ used.
pub fn dpsgd(
    corpus: &Corpus,
    part: &CorpusPartition,
    cfg: &Config,
    epsilon: Option<f64>,
    init: Option<&ModelParams>,
) -> Result<(DpSgdOutcome, f64)> {
    let data = label_examples(corpus, &part.private_ids())?;
    let d = &cfg.dpsgd;
    if d.batch_size == 0 {
        return Err(Error::Config("dpsgd.batch_size must be positive".into()));
    }
    let steps = data.len().div_ceil(d.batch_size) * d.epochs;
    let sigma = match (d.noise_multiplier, epsilon) {
        (Some(s), _) => s,
        (None, Some(e)) => calibrate_multiplier(PrivacyBudget::new(e, cfg.budget.delta)?, steps)?,
        (None, None) => 0.0,
    };
    let dc = DpSgdConfig {
        clip_norm: d.clip_norm,
        noise_multiplier: sigma,
        learning_rate: d.learning_rate,
        epochs: d.epochs,
        batch_size: d.batch_size,
        seed: cfg.seed,
        delta: cfg.budget.delta,
        target_epsilon: epsilon.unwrap_or(f64::INFINITY),
    };
    let params = match init {
        Some(p) => p.clone(),
        None => ModelParams::init(
            cfg.model.arch,
            cfg.model_spec().dims(corpus),
            derive_seed(cfg.seed, DPSGD_INIT, 0, 0),
        )?,
    };
    Ok((dpsgd_train(params, &data, &dc)?, sigma))
}

pub fn ter(params: &ModelParams, eval: &[Utterance]) -> Result<f64> {
    Ok(model_error_rate(params, eval)?)
}
