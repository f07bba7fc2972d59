//! CLI stages. Each stage reads its inputs, writes its outputs into a fresh run
//! directory and records both, with hashes, in `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dpseq_core::corpus::{generate_corpus, Corpus, CorpusPartition, ErrorTally};
use dpseq_core::mia::{
    attack_report, invert, token_template, AttackTarget, InitKind, InvertConfig,
};
use dpseq_core::pate::{clean_relabel, ensemble_decode, RelabelMode, TeacherEnsemble};
use dpseq_core::rng::{derive_seed, purpose};
use dpseq_core::seqmodel::ModelParams;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::Config;
use crate::corpus_io::{read_corpus, write_corpus, write_features};
use crate::error::{Error, Result};
use crate::labels::{read_label_set, write_label_set, Budget};
use crate::manifest::{hash_files, Manifest, MANIFEST_FILE, MANIFEST_VERSION};
use crate::pipeline;
use crate::sweep;
use crate::table::{num, Table};

/// A stage invocation. Input locations are run directories of earlier stages
/// (or the artifact directories inside them), stored as absolute paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainTeachers {
        corpus: PathBuf,
    },
    AggregateEval {
        corpus: PathBuf,
        teachers: PathBuf,
    },
    Relabel {
        corpus: PathBuf,
        teachers: PathBuf,
    },
    TrainStudent {
        corpus: PathBuf,
        labels: PathBuf,
    },
    TrainDpsgd {
        corpus: PathBuf,
    },
    Attack {
        corpus: PathBuf,
        baseline: PathBuf,
        targets: Vec<AttackInput>,
    },
    Sweep,
    Report {
        sweep: PathBuf,
    },
}

/// A private model to attack, with the budget it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackInput {
    pub epsilon: f64,
    pub checkpoint: PathBuf,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainTeachers { .. } => "train-teachers",
            Stage::AggregateEval { .. } => "aggregate-eval",
            Stage::Relabel { .. } => "relabel",
            Stage::TrainStudent { .. } => "train-student",
            Stage::TrainDpsgd { .. } => "train-dpsgd",
            Stage::Attack { .. } => "attack",
            Stage::Sweep => "sweep",
            Stage::Report { .. } => "report",
        }
    }

    fn input_dirs(&self) -> Vec<&Path> {
        match self {
            Stage::GenData | Stage::Sweep => vec![],
            Stage::TrainTeachers { corpus } | Stage::TrainDpsgd { corpus } => vec![corpus],
            Stage::AggregateEval { corpus, teachers } | Stage::Relabel { corpus, teachers } => {
                vec![corpus, teachers]
            }
            Stage::TrainStudent { corpus, labels } => vec![corpus, labels],
            Stage::Attack { corpus, .. } => vec![corpus],
            Stage::Report { sweep } => vec![sweep],
        }
    }

    /// The same stage with every input path made absolute.
    pub fn absolutize(self) -> Result<Self> {
        let abs = |p: PathBuf| fs::canonicalize(&p).map_err(Error::io(p));
        Ok(match self {
            Stage::TrainTeachers { corpus } => Stage::TrainTeachers {
                corpus: abs(corpus)?,
            },
            Stage::AggregateEval { corpus, teachers } => Stage::AggregateEval {
                corpus: abs(corpus)?,
                teachers: abs(teachers)?,
            },
            Stage::Relabel { corpus, teachers } => Stage::Relabel {
                corpus: abs(corpus)?,
                teachers: abs(teachers)?,
            },
            Stage::TrainStudent { corpus, labels } => Stage::TrainStudent {
                corpus: abs(corpus)?,
                labels: abs(labels)?,
            },
            Stage::TrainDpsgd { corpus } => Stage::TrainDpsgd {
                corpus: abs(corpus)?,
            },
            Stage::Attack {
                corpus,
                baseline,
                targets,
            } => Stage::Attack {
                corpus: abs(corpus)?,
                baseline: abs(baseline)?,
                targets: targets
                    .into_iter()
                    .map(|t| {
                        Ok(AttackInput {
                            epsilon: t.epsilon,
                            checkpoint: abs(t.checkpoint)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            },
            Stage::Report { sweep } => Stage::Report { sweep: abs(sweep)? },
            s @ (Stage::GenData | Stage::Sweep) => s,
        })
    }
}

struct Ctx<'a> {
    out: &'a Path,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    metrics: BTreeMap<String, f64>,
    spent: Option<Budget>,
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn table(&mut self, rel: &str, t: &Table) -> Result<()> {
        let p = self.path(rel);
        t.write(&p)?;
        self.outputs.push(p);
        Ok(())
    }

    fn checkpoint(&mut self, rel: &str, params: &ModelParams, seed: u64) -> Result<()> {
        let p = self.path(rel);
        checkpoint::write(&p, params, seed)?;
        self.outputs.push(p);
        Ok(())
    }

    fn read_checkpoint(&mut self, path: &Path) -> Result<ModelParams> {
        let c = checkpoint::read(path)?;
        self.inputs.push(path.to_path_buf());
        Ok(c.params)
    }

    fn corpus(&mut self, location: &Path) -> Result<Corpus> {
        let dir = locate(location, "corpus", "features");
        let corpus = read_corpus(&dir)?;
        self.inputs.push(dir.join("manifest.json"));
        self.inputs.push(dir.join("labels.csv"));
        self.inputs.extend(
            corpus
                .utterances
                .iter()
                .map(|u| crate::corpus_io::feature_file(&dir, u.id)),
        );
        Ok(corpus)
    }

    fn teachers(&mut self, location: &Path) -> Result<(CorpusPartition, TeacherEnsemble)> {
        let dir = locate(location, "teachers", "partition.json");
        let part_path = dir.join("partition.json");
        let part: CorpusPartition = crate::read_json(&part_path)?;
        self.inputs.push(part_path);
        let teachers = (0..part.teachers())
            .map(|i| self.read_checkpoint(&dir.join(teacher_file(i))))
            .collect::<Result<Vec<_>>>()?;
        Ok((part, TeacherEnsemble::uniform(teachers)?))
    }
}

/// `location` itself if it holds `marker`, else its `child` directory.
fn locate(location: &Path, child: &str, marker: &str) -> PathBuf {
    if location.join(marker).exists() {
        location.to_path_buf()
    } else {
        location.join(child)
    }
}

fn teacher_file(i: usize) -> String {
    format!("teacher_{i:03}.ckpt")
}

fn epsilon_label(e: f64) -> String {
    if e.is_finite() {
        format!("eps_{}", num(e))
    } else {
        "no_dp".into()
    }
}

/// Run `stage` with `cfg`, writing into `out` (which must be absent or empty).
pub fn run(stage: &Stage, cfg: &Config, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    if out.exists() && fs::read_dir(out).map_err(Error::io(out))?.next().is_some() {
        return Err(Error::Config(format!(
            "run directory {} is not empty",
            out.display()
        )));
    }
    let out_abs = std::path::absolute(out).map_err(Error::io(out))?;
    for input in stage.input_dirs() {
        if let Ok(i) = fs::canonicalize(input) {
            if out_abs.starts_with(&i) {
                return Err(Error::Config(format!(
                    "run directory {} is inside input {}",
                    out.display(),
                    input.display()
                )));
            }
        }
    }
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let result = execute(stage, cfg, out);
    if result.is_err() {
        // the directory was absent or empty: leave nothing half-written behind
        let _ = fs::remove_dir_all(out);
    }
    result
}

fn execute(stage: &Stage, cfg: &Config, out: &Path) -> Result<Manifest> {
    let mut ctx = Ctx {
        out,
        inputs: Vec::new(),
        outputs: Vec::new(),
        metrics: BTreeMap::new(),
        spent: None,
    };
    match stage {
        Stage::GenData => gen_data(&mut ctx, cfg)?,
        Stage::TrainTeachers { corpus } => train_teachers(&mut ctx, cfg, corpus)?,
        Stage::AggregateEval { corpus, teachers } => {
            aggregate_eval(&mut ctx, cfg, corpus, teachers)?
        }
        Stage::Relabel { corpus, teachers } => relabel(&mut ctx, cfg, corpus, teachers)?,
        Stage::TrainStudent { corpus, labels } => train_student(&mut ctx, cfg, corpus, labels)?,
        Stage::TrainDpsgd { corpus } => train_dpsgd(&mut ctx, cfg, corpus)?,
        Stage::Attack {
            corpus,
            baseline,
            targets,
        } => attack(&mut ctx, cfg, corpus, baseline, targets)?,
        Stage::Sweep => run_sweep(&mut ctx, cfg)?,
        Stage::Report { sweep } => report(&mut ctx, sweep)?,
    }

    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        tool: env!("CARGO_PKG_NAME").into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        stage: stage.clone(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        inputs: hash_files(Path::new(""), &ctx.inputs)?,
        outputs: hash_files(out, &ctx.outputs)?,
        spent: ctx.spent,
        metrics: ctx.metrics,
    };
    crate::write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn gen_data(ctx: &mut Ctx, cfg: &Config) -> Result<()> {
    let corpus = generate_corpus(&pipeline::corpus_config(cfg))?;
    ctx.outputs
        .extend(write_corpus(&ctx.path("corpus"), &corpus)?);
    let frames: usize = corpus.utterances.iter().map(|u| u.frames()).sum();
    let tokens: usize = corpus.utterances.iter().map(|u| u.tokens.len()).sum();
    let mut t = Table::new(&["utterances", "speakers", "frames", "tokens"]);
    t.push(vec![
        corpus.len().to_string(),
        corpus.config.speakers.to_string(),
        frames.to_string(),
        tokens.to_string(),
    ]);
    ctx.table("corpus_stats.csv", &t)?;
    ctx.metrics.insert("utterances".into(), corpus.len() as f64);
    ctx.metrics.insert("frames".into(), frames as f64);
    Ok(())
}

fn train_teachers(ctx: &mut Ctx, cfg: &Config, corpus: &Path) -> Result<()> {
    let corpus = ctx.corpus(corpus)?;
    let part = pipeline::split(&corpus, cfg)?;
    let init = pipeline::pretrained(&corpus, cfg)?;
    let ensemble = pipeline::teachers(&corpus, &part, cfg, init.as_ref())?;
    let dir = ctx.path("teachers");
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let part_path = dir.join("partition.json");
    crate::write_json(&part_path, &part)?;
    ctx.outputs.push(part_path);
    if let Some(p) = &init {
        ctx.checkpoint("pretrained.ckpt", p, cfg.seed)?;
    }
    let eval = pipeline::eval_set(&corpus, cfg);
    let mut t = Table::new(&["teacher", "utterances", "held_out_ter"]);
    let mut total = 0.0;
    for (i, (params, subset)) in ensemble.teachers().iter().zip(&part.subsets).enumerate() {
        ctx.checkpoint(&format!("teachers/{}", teacher_file(i)), params, cfg.seed)?;
        let ter = pipeline::ter(params, &eval)?;
        total += ter;
        t.push(vec![i.to_string(), subset.len().to_string(), num(ter)]);
    }
    ctx.table("teachers.csv", &t)?;
    ctx.metrics
        .insert("mean_teacher_ter".into(), total / ensemble.len() as f64);
    ctx.metrics
        .insert("public_utterances".into(), part.public_set.len() as f64);
    Ok(())
}

fn aggregate_eval(ctx: &mut Ctx, cfg: &Config, corpus: &Path, teachers: &Path) -> Result<()> {
    let corpus = ctx.corpus(corpus)?;
    let (_, ensemble) = ctx.teachers(teachers)?;
    let eval = pipeline::eval_set(&corpus, cfg);
    let mut t = Table::new(&["model", "held_out_ter"]);
    for (i, p) in ensemble.teachers().iter().enumerate() {
        t.push(vec![
            format!("teacher_{i:03}"),
            num(pipeline::ter(p, &eval)?),
        ]);
    }
    let mut aggregate = ErrorTally::default();
    for u in &eval {
        aggregate.add(&u.tokens, &ensemble_decode(&ensemble, &u.features)?);
    }
    let refs: Vec<_> = eval.iter().collect();
    let mut vote = ErrorTally::default();
    for (l, u) in clean_relabel(&ensemble, &refs, RelabelMode::VoteNoisyMax, 1)?
        .iter()
        .zip(&eval)
    {
        vote.add(
            &u.tokens,
            &l.tokens(ensemble.rule(), ensemble.dims().blank()),
        );
    }
    let (agg, vote) = (aggregate.rate()?, vote.rate()?);
    t.push(vec!["ensemble_posterior".into(), num(agg)]);
    t.push(vec!["ensemble_vote".into(), num(vote)]);
    ctx.table("aggregate_eval.csv", &t)?;
    ctx.metrics.insert("ensemble_posterior_ter".into(), agg);
    ctx.metrics.insert("ensemble_vote_ter".into(), vote);
    Ok(())
}

fn relabel(ctx: &mut Ctx, cfg: &Config, corpus: &Path, teachers: &Path) -> Result<()> {
    let corpus = ctx.corpus(corpus)?;
    let (part, ensemble) = ctx.teachers(teachers)?;
    let public = pipeline::public_set(&corpus, &part.public_set)?;
    let r = &cfg.relabel;
    let noise =
        pipeline::relabel_noise(r.mechanism, r.scale, r.epsilon, cfg.budget.delta, &public)?;
    let labels = pipeline::relabel(&ensemble, &public, cfg, r.mode, noise, r.epsilon)?;
    ctx.outputs.extend(write_label_set(ctx.out, &labels)?);
    let mut tally = ErrorTally::default();
    for (e, u) in labels.entries.iter().zip(&public) {
        tally.add(&u.tokens, &e.tokens(labels.rule, labels.blank));
    }
    let label_ter = tally.rate()?;
    let mut t = Table::new(&[
        "mechanism",
        "scale",
        "queries",
        "spent_epsilon",
        "delta",
        "label_ter",
    ]);
    t.push(vec![
        format!("{:?}", noise.kind()).to_lowercase(),
        num(noise.scale()),
        labels.entries.len().to_string(),
        num(labels.spent.epsilon),
        num(labels.spent.delta),
        num(label_ter),
    ]);
    ctx.table("relabel.csv", &t)?;
    ctx.metrics.insert("label_ter".into(), label_ter);
    ctx.metrics.insert("scale".into(), noise.scale());
    ctx.spent = Some(labels.spent.into());
    Ok(())
}

fn loss_table(trace: &[f64]) -> Table {
    let mut t = Table::new(&["epoch", "loss"]);
    for (i, l) in trace.iter().enumerate() {
        t.push(vec![i.to_string(), num(*l)]);
    }
    t
}

fn train_student(ctx: &mut Ctx, cfg: &Config, corpus: &Path, labels: &Path) -> Result<()> {
    let corpus = ctx.corpus(corpus)?;
    let set = read_label_set(labels)?;
    ctx.inputs
        .extend(["labels.csv", "nbest.json", "accounting.json"].map(|f| labels.join(f)));
    let ids: Vec<usize> = set.entries.iter().map(|e| e.utterance_id).collect();
    let public = pipeline::public_set(&corpus, &ids)?;
    let init = pipeline::pretrained(&corpus, cfg)?;
    let out = pipeline::student(&set, &public, &corpus, cfg, init.as_ref())?;
    ctx.checkpoint("student.ckpt", &out.params, cfg.seed)?;
    ctx.table("loss_trace.csv", &loss_table(&out.loss_trace))?;
    let ter = pipeline::ter(&out.params, &pipeline::eval_set(&corpus, cfg))?;
    let mut t = Table::new(&["spent_epsilon", "delta", "held_out_ter"]);
    t.push(vec![num(out.spent.epsilon), num(out.spent.delta), num(ter)]);
    ctx.table("student.csv", &t)?;
    ctx.metrics.insert("held_out_ter".into(), ter);
    ctx.spent = Some(out.spent.into());
    Ok(())
}

fn train_dpsgd(ctx: &mut Ctx, cfg: &Config, corpus: &Path) -> Result<()> {
    let corpus = ctx.corpus(corpus)?;
    let part = pipeline::split(&corpus, cfg)?;
    let init = pipeline::pretrained(&corpus, cfg)?;
    let (out, sigma) = pipeline::dpsgd(&corpus, &part, cfg, cfg.dpsgd.epsilon, init.as_ref())?;
    ctx.checkpoint("dpsgd.ckpt", &out.params, cfg.seed)?;
    ctx.table("loss_trace.csv", &loss_table(&out.loss_trace))?;
    let ter = pipeline::ter(&out.params, &pipeline::eval_set(&corpus, cfg))?;
    let mut t = Table::new(&[
        "noise_multiplier",
        "steps",
        "stopped_early",
        "spent_epsilon",
        "delta",
        "held_out_ter",
    ]);
    t.push(vec![
        num(sigma),
        out.steps.to_string(),
        out.stopped_early.to_string(),
        num(out.spent.epsilon),
        num(out.spent.delta),
        num(ter),
    ]);
    ctx.table("dpsgd.csv", &t)?;
    ctx.metrics.insert("held_out_ter".into(), ter);
    ctx.metrics.insert("noise_multiplier".into(), sigma);
    ctx.spent = Some(out.spent.into());
    Ok(())
}

fn attack(
    ctx: &mut Ctx,
    cfg: &Config,
    corpus: &Path,
    baseline: &Path,
    targets: &[AttackInput],
) -> Result<()> {
    let corpus = ctx.corpus(corpus)?;
    let no_dp = ctx.read_checkpoint(baseline)?;
    let private = targets
        .iter()
        .map(|t| ctx.read_checkpoint(&t.checkpoint))
        .collect::<Result<Vec<_>>>()?;
    let a = &cfg.attack;
    let reference = token_template(&corpus.class_means, &a.target)?;
    let ic = a.invert_config();
    let attacked: Vec<AttackTarget> = targets
        .iter()
        .zip(&private)
        .map(|(t, p)| AttackTarget {
            epsilon: t.epsilon,
            params: p,
        })
        .collect();
    let rep = attack_report(
        &no_dp, &attacked, &a.target, &reference, &ic, a.trials, cfg.seed,
    )?;

    let mut t = Table::new(&["epsilon", "trial", "similarity", "final_loglik"]);
    for r in &rep.trials {
        t.push(vec![
            num(r.epsilon),
            r.trial.to_string(),
            num(r.similarity),
            num(r.final_loglik),
        ]);
    }
    ctx.table("attack.csv", &t)?;
    let mut s = Table::new(&["epsilon", "mean_similarity", "se", "protected"]);
    for r in &rep.summary {
        s.push(vec![
            num(r.epsilon),
            num(r.mean),
            num(r.se),
            r.protected.to_string(),
        ]);
        ctx.metrics.insert(
            format!("mean_similarity.{}", epsilon_label(r.epsilon)),
            r.mean,
        );
    }
    ctx.table("attack_summary.csv", &s)?;

    // first-trial reconstructions next to the reference, in the corpus feature format
    let dir = ctx.path("reconstructions");
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let p = dir.join("reference.csv");
    write_features(&p, &reference)?;
    ctx.outputs.push(p);
    let init = InitKind::Random(derive_seed(cfg.seed, purpose::ATTACK, 0, 0));
    let models = std::iter::once((f64::INFINITY, &no_dp))
        .chain(targets.iter().map(|t| t.epsilon).zip(&private));
    for (k, (eps, params)) in models.enumerate() {
        let inv = invert(params, &a.target, &InvertConfig { init, ..ic.clone() })?;
        let p = dir.join(format!("{k:02}_{}_trial_000.csv", epsilon_label(eps)));
        write_features(&p, &inv.features)?;
        ctx.outputs.push(p);
    }
    Ok(())
}

fn run_sweep(ctx: &mut Ctx, cfg: &Config) -> Result<()> {
    let outcome = sweep::run(cfg)?;
    let rows = sweep::summarize(&outcome.cells, &cfg.budget.grid);
    ctx.table("cells.csv", &sweep::cells_table(&outcome.cells))?;
    ctx.table("sweep.csv", &sweep::sweep_table(&rows))?;
    ctx.table("seeds.csv", &sweep::seeds_table(&outcome.seeds))?;
    for r in &rows {
        ctx.metrics.insert(
            format!("mean_ter.{}.{}", r.method.name(), epsilon_label(r.epsilon)),
            r.mean_ter,
        );
    }
    Ok(())
}

fn report(ctx: &mut Ctx, sweep_dir: &Path) -> Result<()> {
    let path = sweep_dir.join("sweep.csv");
    let rows = sweep::read_sweep_table(&path)?;
    ctx.inputs.push(path);
    let gaps = sweep::gaps(&rows);
    if gaps.is_empty() {
        return Err(Error::format(
            sweep_dir.join("sweep.csv"),
            "no ε has both pate_gnmax and dpsgd rows",
        ));
    }
    ctx.table("report.csv", &sweep::gap_table(&gaps))?;
    ctx.metrics.insert(
        "mean_gap".into(),
        gaps.iter().map(|g| g.gap).sum::<f64>() / gaps.len() as f64,
    );
    Ok(())
}
