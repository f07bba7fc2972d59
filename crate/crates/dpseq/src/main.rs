use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpseq::manifest::verify;
use dpseq::stages::{run, AttackInput, Stage};
use dpseq::{Config, Error, Result};
use sha2::{Digest, Sha256};

/// Differentially private sequence-model experiments: teacher ensembles with
/// noisy relabeling versus DP-SGD, on a synthetic speech-like corpus.
#[derive(Parser)]
#[command(name = "dpseq", version)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set teacher.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory. Defaults to `$DPSEQ_RUN_ROOT/<stage>-s<seed>-<hash>` (root `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start every model from a non-private base model trained on a shifted corpus.
    #[arg(long)]
    pretrain: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mechanism {
    Gaussian,
    Laplace,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Vote,
    Posterior,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Partition the corpus and train one teacher per private subset.
    TrainTeachers {
        #[command(flatten)]
        common: Common,
        /// gen-data run directory.
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Held-out error rates of each teacher and of the noiseless ensemble.
    AggregateEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// train-teachers run directory.
        #[arg(long)]
        teachers: PathBuf,
    },
    /// Label the public set through the noisy teacher aggregate.
    Relabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        teachers: PathBuf,
        /// Budget for the whole relabeling (calibrates the noise unless --scale is given).
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, value_enum)]
        mechanism: Option<Mechanism>,
        /// Explicit noise scale; with --epsilon the release must fit the budget.
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Train a student on a released label set.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// relabel run directory.
        #[arg(long)]
        labels: PathBuf,
    },
    /// Train the DP-SGD baseline on the teachers' private data.
    TrainDpsgd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        noise_multiplier: Option<f64>,
    },
    /// Model inversion against a non-private baseline and private models.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint of the model trained without privacy.
        #[arg(long)]
        baseline: PathBuf,
        /// Private model as `EPSILON=CHECKPOINT`. Repeatable.
        #[arg(long = "target", value_name = "EPSILON=CHECKPOINT", value_parser = parse_target)]
        targets: Vec<AttackInput>,
    },
    /// Every method at every budget of the grid, over several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// PATE-vs-DP-SGD error-rate gap per budget, from a sweep run.
    Report {
        #[command(flatten)]
        common: Common,
        /// sweep run directory.
        #[arg(long)]
        sweep: PathBuf,
    },
    /// Re-run a recorded run into a scratch directory and compare every output.
    Verify { run_dir: PathBuf },
}

fn parse_target(s: &str) -> std::result::Result<AttackInput, String> {
    let (e, p) = s.split_once('=').ok_or("expected EPSILON=CHECKPOINT")?;
    let epsilon: f64 = e.parse().map_err(|err| format!("epsilon `{e}`: {err}"))?;
    Ok(AttackInput {
        epsilon,
        checkpoint: p.into(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<()> {
    let mut extra: Vec<String> = Vec::new();
    let (common, stage) = match command {
        Command::Verify { run_dir } => return verify_run(&run_dir),
        Command::GenData { common } => (common, Stage::GenData),
        Command::TrainTeachers { common, corpus } => (common, Stage::TrainTeachers { corpus }),
        Command::AggregateEval {
            common,
            corpus,
            teachers,
        } => (common, Stage::AggregateEval { corpus, teachers }),
        Command::Relabel {
            common,
            corpus,
            teachers,
            epsilon,
            mechanism,
            scale,
            mode,
        } => {
            if let Some(e) = epsilon {
                extra.push(format!("relabel.epsilon={e:?}"));
            }
            if let Some(s) = scale {
                extra.push(format!("relabel.scale={s:?}"));
            }
            if let Some(m) = mechanism {
                let m = match m {
                    Mechanism::Gaussian => "gaussian",
                    Mechanism::Laplace => "laplace",
                    Mechanism::None => "none",
                };
                extra.push(format!("relabel.mechanism=\"{m}\""));
            }
            if let Some(m) = mode {
                let m = match m {
                    Mode::Vote => "vote_noisy_max",
                    Mode::Posterior => "posterior_noise",
                };
                extra.push(format!("relabel.mode=\"{m}\""));
            }
            (common, Stage::Relabel { corpus, teachers })
        }
        Command::TrainStudent {
            common,
            corpus,
            labels,
        } => (common, Stage::TrainStudent { corpus, labels }),
        Command::TrainDpsgd {
            common,
            corpus,
            epsilon,
            noise_multiplier,
        } => {
            if let Some(e) = epsilon {
                extra.push(format!("dpsgd.epsilon={e:?}"));
            }
            if let Some(s) = noise_multiplier {
                extra.push(format!("dpsgd.noise_multiplier={s:?}"));
            }
            (common, Stage::TrainDpsgd { corpus })
        }
        Command::Attack {
            common,
            corpus,
            baseline,
            targets,
        } => (
            common,
            Stage::Attack {
                corpus,
                baseline,
                targets,
            },
        ),
        Command::Sweep { common } => {
            if common.seed.is_none() {
                return Err(Error::Config("sweep requires --seed".into()));
            }
            (common, Stage::Sweep)
        }
        Command::Report { common, sweep } => (common, Stage::Report { sweep }),
    };

    let mut overrides = common.overrides.clone();
    overrides.extend(extra);
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if common.pretrain {
        overrides.push("pretrain.enabled=true".into());
    }
    let cfg = Config::resolve(common.config.as_deref(), &overrides)?;
    let stage = stage.absolutize()?;
    let out = match common.out {
        Some(o) => o,
        None => default_run_dir(&stage, &cfg),
    };
    let m = run(&stage, &cfg, &out)?;
    println!("{}", out.display());
    for (k, v) in &m.metrics {
        println!("  {k} = {v}");
    }
    if let Some(spent) = m.spent {
        match spent.epsilon {
            Some(e) => println!("  spent ε = {e} (δ = {})", spent.delta),
            None => println!("  spent ε = ∞"),
        }
    }
    Ok(())
}

fn default_run_dir(stage: &Stage, cfg: &Config) -> PathBuf {
    let root = std::env::var_os("DPSEQ_RUN_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    let mut h = Sha256::new();
    h.update(cfg.hash().as_bytes());
    h.update(serde_json::to_vec(stage).expect("stage serializes"));
    let tag = hex::encode(h.finalize());
    root.join(format!("{}-s{}-{}", stage.name(), cfg.seed, &tag[..12]))
}

fn verify_run(run_dir: &Path) -> Result<()> {
    let scratch = tempfile::tempdir().map_err(Error::io(std::env::temp_dir()))?;
    let report = verify(run_dir, &scratch.path().join("run"))?;
    if report.mismatched.is_empty() {
        println!(
            "{}: {} outputs reproduced bit-exactly",
            run_dir.display(),
            report.checked
        );
        Ok(())
    } else {
        for p in &report.mismatched {
            eprintln!("differs: {}", p.display());
        }
        Err(Error::Mismatch(format!(
            "{} of {} outputs",
            report.mismatched.len(),
            report.checked
        )))
    }
}
