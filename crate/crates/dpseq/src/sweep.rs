//! The budget sweep: every method at every ε of the grid, for several seeds,
//! and the PATE-vs-DP-SGD gap computed from its table.

use std::path::Path;

use dpseq_core::mechanisms::{NoiseKind, NoiseSpec};
use dpseq_core::pate::RelabelMode;
use dpseq_core::seqmodel::ModelParams;
use rayon::prelude::*;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::pipeline;
use crate::table::{num, parse_f64, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    PateGnmax,
    PateLnmax,
    Clean,
    Dpsgd,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::PateGnmax,
        Method::PateLnmax,
        Method::Clean,
        Method::Dpsgd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::PateGnmax => "pate_gnmax",
            Method::PateLnmax => "pate_lnmax",
            Method::Clean => "clean",
            Method::Dpsgd => "dpsgd",
        }
    }
}

/// One trained model of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub seed: u64,
    pub method: Method,
    /// Grid budget the cell was run for (the clean student is repeated at each).
    pub epsilon: f64,
    /// Budget actually spent (`∞` for the clean student).
    pub spent: f64,
    pub ter: f64,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub ensemble_ter: f64,
    pub mean_teacher_ter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub cells: Vec<Cell>,
    pub seeds: Vec<SeedSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub method: Method,
    pub mean_ter: f64,
    pub se: f64,
    pub seeds: usize,
}

pub fn seeds(cfg: &Config) -> Vec<u64> {
    (0..cfg.sweep.seeds as u64).map(|i| cfg.seed + i).collect()
}

fn for_seed(cfg: &Config, seed: u64) -> Config {
    let mut c = cfg.clone();
    c.seed = seed;
    c.corpus.seed = seed;
    c
}

struct Prepared {
    cfg: Config,
    corpus: dpseq_core::corpus::Corpus,
    part: dpseq_core::corpus::CorpusPartition,
    ensemble: dpseq_core::pate::TeacherEnsemble,
    init: Option<ModelParams>,
    eval: Vec<dpseq_core::corpus::Utterance>,
}

/// Run the grid for every seed. Cells run in parallel on the current rayon
/// pool; results do not depend on its size.
pub fn run(cfg: &Config) -> Result<SweepOutcome> {
    let prepared = seeds(cfg)
        .into_par_iter()
        .map(|s| {
            let cfg = for_seed(cfg, s);
            let corpus = dpseq_core::corpus::generate_corpus(&pipeline::corpus_config(&cfg))?;
            let part = pipeline::split(&corpus, &cfg)?;
            let init = pipeline::pretrained(&corpus, &cfg)?;
            let ensemble = pipeline::teachers(&corpus, &part, &cfg, init.as_ref())?;
            let eval = pipeline::eval_set(&corpus, &cfg);
            Ok(Prepared {
                cfg,
                corpus,
                part,
                ensemble,
                init,
                eval,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut jobs: Vec<(usize, Method, Option<f64>)> = Vec::new();
    for i in 0..prepared.len() {
        jobs.push((i, Method::Clean, None));
        for &e in &cfg.budget.grid {
            for m in [Method::PateGnmax, Method::PateLnmax, Method::Dpsgd] {
                jobs.push((i, m, Some(e)));
            }
        }
    }
    let done = jobs
        .par_iter()
        .map(|&(i, method, epsilon)| run_cell(&prepared[i], method, epsilon))
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for ((i, method, epsilon), (spent, ter, params)) in jobs.into_iter().zip(done) {
        let seed = prepared[i].cfg.seed;
        match epsilon {
            Some(e) => cells.push(Cell {
                seed,
                method,
                epsilon: e,
                spent,
                ter,
                params,
            }),
            None => {
                for &e in &cfg.budget.grid {
                    cells.push(Cell {
                        seed,
                        method,
                        epsilon: e,
                        spent,
                        ter,
                        params: params.clone(),
                    });
                }
            }
        }
    }
    cells.sort_by(|a, b| {
        (a.seed, a.method)
            .cmp(&(b.seed, b.method))
            .then(a.epsilon.total_cmp(&b.epsilon))
    });

    let seeds = prepared
        .par_iter()
        .map(|p| {
            let mut tally = dpseq_core::corpus::ErrorTally::default();
            for u in &p.eval {
                tally.add(
                    &u.tokens,
                    &dpseq_core::pate::ensemble_decode(&p.ensemble, &u.features)?,
                );
            }
            let teacher_ters = p
                .ensemble
                .teachers()
                .iter()
                .map(|t| pipeline::ter(t, &p.eval))
                .collect::<Result<Vec<_>>>()?;
            Ok(SeedSummary {
                seed: p.cfg.seed,
                ensemble_ter: tally.rate()?,
                mean_teacher_ter: teacher_ters.iter().sum::<f64>() / teacher_ters.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepOutcome { cells, seeds })
}

fn run_cell(p: &Prepared, method: Method, epsilon: Option<f64>) -> Result<(f64, f64, ModelParams)> {
    let cfg = &p.cfg;
    let init = p.init.as_ref();
    if method == Method::Dpsgd {
        let (out, _) = pipeline::dpsgd(&p.corpus, &p.part, cfg, epsilon, init)?;
        let ter = pipeline::ter(&out.params, &p.eval)?;
        return Ok((out.spent.epsilon, ter, out.params));
    }
    let public = pipeline::public_set(&p.corpus, &p.part.public_set)?;
    let noise = match method {
        Method::PateGnmax => pipeline::relabel_noise(
            NoiseKind::Gaussian,
            None,
            epsilon,
            cfg.budget.delta,
            &public,
        )?,
        Method::PateLnmax => {
            pipeline::relabel_noise(NoiseKind::Laplace, None, epsilon, cfg.budget.delta, &public)?
        }
        _ => NoiseSpec::NONE,
    };
    let labels = pipeline::relabel(
        &p.ensemble,
        &public,
        cfg,
        RelabelMode::VoteNoisyMax,
        noise,
        epsilon,
    )?;
    let out = pipeline::student(&labels, &public, &p.corpus, cfg, init)?;
    let ter = pipeline::ter(&out.params, &p.eval)?;
    Ok((out.spent.epsilon, ter, out.params))
}

/// Sample mean and standard error (0 for a single value).
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean TER and SE across seeds, one row per (ε, method), ε in grid order.
pub fn summarize(cells: &[Cell], grid: &[f64]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &e in grid {
        for m in Method::ALL {
            let ters: Vec<f64> = cells
                .iter()
                .filter(|c| c.method == m && c.epsilon == e)
                .map(|c| c.ter)
                .collect();
            if ters.is_empty() {
                continue;
            }
            let (mean_ter, se) = mean_se(&ters);
            rows.push(SweepRow {
                epsilon: e,
                method: m,
                mean_ter,
                se,
                seeds: ters.len(),
            });
        }
    }
    rows
}

pub fn cells_table(cells: &[Cell]) -> Table {
    let mut t = Table::new(&["seed", "method", "epsilon", "spent_epsilon", "ter"]);
    for c in cells {
        t.push(vec![
            c.seed.to_string(),
            c.method.name().into(),
            num(c.epsilon),
            num(c.spent),
            num(c.ter),
        ]);
    }
    t
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new(&["epsilon", "method", "mean_ter", "se", "seeds"]);
    for r in rows {
        t.push(vec![
            num(r.epsilon),
            r.method.name().into(),
            num(r.mean_ter),
            num(r.se),
            r.seeds.to_string(),
        ]);
    }
    t
}

pub fn seeds_table(seeds: &[SeedSummary]) -> Table {
    let mut t = Table::new(&["seed", "ensemble_ter", "mean_teacher_ter"]);
    for s in seeds {
        t.push(vec![
            s.seed.to_string(),
            num(s.ensemble_ter),
            num(s.mean_teacher_ter),
        ]);
    }
    t
}

/// Per-ε difference `mean TER(dpsgd) − mean TER(pate_gnmax)` (positive means
/// PATE is better) with its pooled standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapRow {
    pub epsilon: f64,
    pub pate_ter: f64,
    pub pate_se: f64,
    pub dpsgd_ter: f64,
    pub dpsgd_se: f64,
    pub gap: f64,
    pub gap_se: f64,
}

pub fn read_sweep_table(path: &Path) -> Result<Vec<SweepRow>> {
    let t = Table::read(path)?;
    let (ce, cm, ct, cs, cn) = (
        t.column(path, "epsilon")?,
        t.column(path, "method")?,
        t.column(path, "mean_ter")?,
        t.column(path, "se")?,
        t.column(path, "seeds")?,
    );
    t.rows
        .iter()
        .map(|r| {
            let method = Method::ALL
                .into_iter()
                .find(|m| m.name() == r[cm])
                .ok_or_else(|| Error::format(path, format!("unknown method `{}`", r[cm])))?;
            Ok(SweepRow {
                epsilon: parse_f64(path, &r[ce])?,
                method,
                mean_ter: parse_f64(path, &r[ct])?,
                se: parse_f64(path, &r[cs])?,
                seeds: r[cn].parse().map_err(|e| Error::format(path, e))?,
            })
        })
        .collect()
}

pub fn gaps(rows: &[SweepRow]) -> Vec<GapRow> {
    let mut out = Vec::new();
    for pate in rows.iter().filter(|r| r.method == Method::PateGnmax) {
        if let Some(dp) = rows
            .iter()
            .find(|r| r.method == Method::Dpsgd && r.epsilon == pate.epsilon)
        {
            out.push(GapRow {
                epsilon: pate.epsilon,
                pate_ter: pate.mean_ter,
                pate_se: pate.se,
                dpsgd_ter: dp.mean_ter,
                dpsgd_se: dp.se,
                gap: dp.mean_ter - pate.mean_ter,
                gap_se: (pate.se * pate.se + dp.se * dp.se).sqrt(),
            });
        }
    }
    out
}

pub fn gap_table(gaps: &[GapRow]) -> Table {
    let mut t = Table::new(&[
        "epsilon",
        "pate_gnmax_ter",
        "pate_gnmax_se",
        "dpsgd_ter",
        "dpsgd_se",
        "gap",
        "gap_se",
    ]);
    for g in gaps {
        t.push(vec![
            num(g.epsilon),
            num(g.pate_ter),
            num(g.pate_se),
            num(g.dpsgd_ter),
            num(g.dpsgd_se),
            num(g.gap),
            num(g.gap_se),
        ]);
    }
    t
}
