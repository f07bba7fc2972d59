//! Experiment configuration: a TOML file plus `section.key=value` overrides.
//!
//! Every section and field has a default, so an empty file is a valid config.
//! Unknown keys are rejected.

use std::path::Path;

use dpseq_core::corpus::{CorpusConfig, PartitionStrategy};
use dpseq_core::mechanisms::NoiseKind;
use dpseq_core::mia::InitKind;
use dpseq_core::mia::InvertConfig;
use dpseq_core::pate::{ModelSpec, RelabelMode};
use dpseq_core::seqmodel::{Arch, OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    /// Master seed. Overrides `corpus.seed` and keys every other stream.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub teacher: TrainSection,
    pub student: StudentSection,
    pub relabel: RelabelSection,
    pub budget: BudgetSection,
    pub dpsgd: DpSgdSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub pretrain: PretrainSection,
    pub sweep: SweepSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 1,
            corpus: CorpusConfig::default(),
            partition: PartitionSection::default(),
            model: ModelSection::default(),
            teacher: TrainSection::default(),
            student: StudentSection::default(),
            relabel: RelabelSection::default(),
            budget: BudgetSection::default(),
            dpsgd: DpSgdSection::default(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
            pretrain: PretrainSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub teachers: usize,
    pub strategy: PartitionStrategy,
    pub public_fraction: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            teachers: 15,
            strategy: PartitionStrategy::RoundRobin,
            public_fraction: 1.0 / 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: Arch::Ctc,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.01,
            epochs: 60,
            batch_size: 8,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub kd_weight: f64,
    pub nbest: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self {
            kd_weight: 0.5,
            nbest: 4,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.01,
            epochs: 30,
            batch_size: 8,
        }
    }
}

impl StudentSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelSection {
    pub mode: RelabelMode,
    pub mechanism: NoiseKind,
    /// Explicit noise scale (Laplace `b` or Gaussian `σ`). When unset the scale
    /// is calibrated so the whole relabeling spends `epsilon`.
    pub scale: Option<f64>,
    /// Budget for the relabeling; unset means unbounded.
    pub epsilon: Option<f64>,
}

impl Default for RelabelSection {
    fn default() -> Self {
        Self {
            mode: RelabelMode::VoteNoisyMax,
            mechanism: NoiseKind::Gaussian,
            scale: None,
            epsilon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub grid: Vec<f64>,
    pub delta: f64,
}

impl Default for BudgetSection {
    fn default() -> Self {
        Self {
            grid: vec![1.0, 10.0, 100.0, 1000.0],
            delta: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSgdSection {
    pub clip_norm: f64,
    /// Explicit noise multiplier; when unset it is calibrated to `epsilon`
    /// over the full run.
    pub noise_multiplier: Option<f64>,
    pub epsilon: Option<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for DpSgdSection {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            noise_multiplier: None,
            epsilon: None,
            learning_rate: 0.5,
            epochs: 10,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub target: Vec<usize>,
    pub frames: usize,
    pub steps: usize,
    pub step_size: f64,
    pub query_budget: usize,
    pub trials: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            target: dpseq_core::mia::STOP_WORD.to_vec(),
            frames: 8,
            steps: 300,
            step_size: 0.5,
            query_budget: 10_000,
            trials: 10,
        }
    }
}

impl AttackSection {
    pub fn invert_config(&self) -> InvertConfig {
        InvertConfig {
            frames: self.frames,
            steps: self.steps,
            step_size: self.step_size,
            init: InitKind::Zeros,
            query_budget: self.query_budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Size of the freshly drawn evaluation set.
    pub held_out: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { held_out: 200 }
    }
}

/// Pretrain-then-finetune: a base model is first trained without privacy on a
/// second corpus whose class means are shifted, and every private model starts
/// from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub enabled: bool,
    pub mean_shift: f64,
    pub utterances: usize,
    pub epochs: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            enabled: false,
            mean_shift: 0.5,
            utterances: 1440,
            epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Number of consecutive seeds starting at the master seed.
    pub seeds: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { seeds: 5 }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_value(toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text)
    }

    /// Load `path` (or the defaults) and apply `key.path=value` overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(Error::io(p))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    fn from_value(value: toml::Table) -> Result<Self> {
        let mut cfg: Config = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.corpus.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        self.corpus
            .validate()
            .map_err(|e| Error::Config(format!("corpus: {e}")))?;
        if self.partition.teachers == 0 {
            return bad("partition.teachers must be positive".into());
        }
        if self.model.hidden == 0 {
            return bad("model.hidden must be positive".into());
        }
        if !(self.budget.delta > 0.0 && self.budget.delta < 1.0) {
            return bad(format!(
                "budget.delta = {} is outside (0, 1)",
                self.budget.delta
            ));
        }
        if self.budget.grid.is_empty() || self.budget.grid.iter().any(|&e| !(e > 0.0)) {
            return bad("budget.grid must be a non-empty list of positive budgets".into());
        }
        for (name, e) in [
            ("relabel.epsilon", self.relabel.epsilon),
            ("dpsgd.epsilon", self.dpsgd.epsilon),
        ] {
            if let Some(e) = e {
                if !(e > 0.0) {
                    return bad(format!("{name} = {e} must be positive"));
                }
            }
        }
        if self.sweep.seeds == 0 {
            return bad("sweep.seeds must be positive".into());
        }
        if self.eval.held_out == 0 {
            return bad("eval.held_out must be positive".into());
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            arch: self.model.arch,
            hidden: self.model.hidden,
        }
    }

    /// Hex SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Set `a.b.c = value` in a TOML table. The value is parsed as a TOML value
/// when possible (numbers, booleans, arrays, quoted strings) and taken as a bare
/// string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = parse_value(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("empty key in `{assignment}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = Config::default();
        cfg.relabel.epsilon = Some(10.0);
        cfg.corpus.frames_per_token = (2, 5);
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn overrides() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "seed=7").unwrap();
        apply_override(&mut t, "model.arch=rnnt").unwrap();
        apply_override(&mut t, "budget.grid=[2, 20.5]").unwrap();
        apply_override(&mut t, "relabel.epsilon = 3").unwrap();
        let cfg = Config::from_value(t).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.corpus.seed, 7);
        assert_eq!(cfg.model.arch, Arch::Rnnt);
        assert_eq!(cfg.budget.grid, vec![2.0, 20.5]);
        assert_eq!(cfg.relabel.epsilon, Some(3.0));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in [
            "bogus = 1",
            "[model]\nlayers = 2",
            "[budget]\ndelta = 2.0",
            "[partition]\nteachers = 0",
        ] {
            assert!(
                matches!(Config::from_toml(text), Err(Error::Config(_))),
                "{text}"
            );
        }
        let mut t = toml::Table::new();
        assert!(apply_override(&mut t, "noequals").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.student.kd_weight = 0.25;
        assert_ne!(a.hash(), b.hash());
    }
}
