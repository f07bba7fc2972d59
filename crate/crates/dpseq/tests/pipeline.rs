use std::path::{Path, PathBuf};
use std::process::Command;

use dpseq::corpus_io::{read_corpus, read_features, write_corpus, write_features};
use dpseq::labels::{read_label_set, write_label_set};
use dpseq::manifest::{verify, Manifest};
use dpseq::stages::{run, AttackInput, Stage};
use dpseq::sweep::{gaps, read_sweep_table};
use dpseq::table::Table;
use dpseq::{Config, Error};
use dpseq_core::corpus::{generate_corpus, CorpusConfig};
use dpseq_core::linalg::Matrix;
use tempfile::TempDir;

const TINY: &str = r#"
seed = 4
[corpus]
utterances = 72
speakers = 6
[partition]
teachers = 3
[model]
hidden = 6
[teacher]
epochs = 2
[student]
epochs = 2
[dpsgd]
epochs = 1
[eval]
held_out = 12
[attack]
steps = 10
trials = 5
"#;

fn tiny(overrides: &[&str]) -> Config {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, TINY).unwrap();
    Config::resolve(
        Some(&p),
        &overrides.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
    )
    .unwrap()
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn corpus_round_trip_is_bit_exact() {
    let dir = TempDir::new().unwrap();
    let corpus = generate_corpus(&CorpusConfig {
        utterances: 30,
        speakers: 5,
        mean_shift: 0.1,
        ..Default::default()
    })
    .unwrap();
    let files = write_corpus(dir.path(), &corpus).unwrap();
    assert_eq!(files.len(), 32);
    let back = read_corpus(dir.path()).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(bits(&back.class_means), bits(&corpus.class_means));
    for (a, b) in back.utterances.iter().zip(&corpus.utterances) {
        assert_eq!(bits(&a.features), bits(&b.features));
    }

    let awkward =
        Matrix::from_rows(&[vec![-0.0, 1e-310, 0.1 + 0.2], vec![f64::MAX, -1.5e-7, 3.0]]).unwrap();
    let p = dir.path().join("m.csv");
    write_features(&p, &awkward).unwrap();
    assert_eq!(bits(&read_features(&p).unwrap()), bits(&awkward));
}

fn stage(out: &Path, s: Stage, cfg: &Config) -> Manifest {
    run(&s, cfg, out).unwrap()
}

/// gen-data → train-teachers → relabel → train-student, under `root`.
fn chain(root: &Path, cfg: &Config) -> [PathBuf; 4] {
    let [d, t, l, s] = ["data", "teachers", "labels", "student"].map(|n| root.join(n));
    stage(&d, Stage::GenData, cfg);
    stage(&t, Stage::TrainTeachers { corpus: d.clone() }, cfg);
    stage(
        &l,
        Stage::Relabel {
            corpus: d.clone(),
            teachers: t.clone(),
        },
        cfg,
    );
    stage(
        &s,
        Stage::TrainStudent {
            corpus: d.clone(),
            labels: l.clone(),
        },
        cfg,
    );
    [d, t, l, s]
}

#[test]
fn stages_are_deterministic_and_verifiable() {
    let cfg = tiny(&["relabel.epsilon=50"]);
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let ra = chain(a.path(), &cfg);
    let rb = chain(b.path(), &cfg);
    for (x, y) in ra.iter().zip(&rb) {
        let (mx, my) = (Manifest::read(x).unwrap(), Manifest::read(y).unwrap());
        assert_eq!(mx.outputs, my.outputs, "{}", x.display());
        assert_eq!(mx.metrics, my.metrics);
    }
    for csv in [
        "teachers/teachers.csv",
        "labels/relabel.csv",
        "student/student.csv",
        "student/loss_trace.csv",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(csv)).unwrap(),
            std::fs::read(b.path().join(csv)).unwrap(),
            "{csv}"
        );
    }
    let spent = Manifest::read(&ra[2]).unwrap().spent.unwrap();
    assert!(spent.epsilon.unwrap() <= 50.0 && spent.epsilon.unwrap() >= 49.5);
    assert_eq!(Manifest::read(&ra[3]).unwrap().spent, Some(spent));

    for r in &ra {
        let scratch = TempDir::new().unwrap();
        let rep = verify(r, &scratch.path().join("again")).unwrap();
        assert!(
            rep.mismatched.is_empty() && rep.checked > 0,
            "{}",
            r.display()
        );
    }

    // a tampered output is reported, a tampered input refuses to verify
    std::fs::write(ra[3].join("student.csv"), "x\n").unwrap();
    let rep = verify(&ra[3], &TempDir::new().unwrap().path().join("again")).unwrap();
    assert_eq!(rep.mismatched, vec![PathBuf::from("student.csv")]);
    std::fs::write(ra[2].join("labels.csv"), "utterance_id,frame,label\n").unwrap();
    assert!(matches!(
        verify(&ra[3], &TempDir::new().unwrap().path().join("again")),
        Err(Error::Mismatch(_))
    ));
}

#[test]
fn label_set_round_trip() {
    let cfg = tiny(&["relabel.epsilon=20", "relabel.mechanism=\"laplace\""]);
    let root = TempDir::new().unwrap();
    let [_, _, l, _] = chain(root.path(), &cfg);
    let set = read_label_set(&l).unwrap();
    let again = TempDir::new().unwrap();
    write_label_set(again.path(), &set).unwrap();
    assert_eq!(read_label_set(again.path()).unwrap(), set);
    for f in ["labels.csv", "nbest.json", "accounting.json"] {
        assert_eq!(
            std::fs::read(l.join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(set.report.queries, set.entries.len());
}

#[test]
fn stages_refuse_used_or_nested_run_dirs() {
    let cfg = tiny(&[]);
    let root = TempDir::new().unwrap();
    let d = root.path().join("data");
    stage(&d, Stage::GenData, &cfg);
    assert!(matches!(
        run(&Stage::GenData, &cfg, &d),
        Err(Error::Config(_))
    ));
    let nested = d.join("teachers");
    assert!(matches!(
        run(&Stage::TrainTeachers { corpus: d.clone() }, &cfg, &nested),
        Err(Error::Config(_))
    ));
    assert!(!nested.exists());
}

#[test]
fn dpsgd_and_attack_stages() {
    let cfg = tiny(&["dpsgd.epsilon=100"]);
    let root = TempDir::new().unwrap();
    let [d, t, _, s] = chain(root.path(), &cfg);
    let dp = root.path().join("dpsgd");
    let m = stage(&dp, Stage::TrainDpsgd { corpus: d.clone() }, &cfg);
    assert!(m.spent.unwrap().epsilon.unwrap() <= 100.0);
    let att = root.path().join("attack");
    let targets = vec![
        AttackInput {
            epsilon: 100.0,
            checkpoint: dp.join("dpsgd.ckpt"),
        },
        AttackInput {
            epsilon: 1e9,
            checkpoint: s.join("student.ckpt"),
        },
    ];
    stage(
        &att,
        Stage::Attack {
            corpus: d,
            baseline: t.join("teachers/teacher_000.ckpt"),
            targets,
        },
        &cfg,
    );
    let trials = Table::read(&att.join("attack.csv")).unwrap();
    assert_eq!(
        trials.header,
        ["epsilon", "trial", "similarity", "final_loglik"]
    );
    assert_eq!(trials.rows.len(), 15);
    let recon = read_features(&att.join("reconstructions/00_no_dp_trial_000.csv")).unwrap();
    assert_eq!((recon.rows(), recon.cols()), (8, 8));
    assert_eq!(
        Table::read(&att.join("attack_summary.csv"))
            .unwrap()
            .rows
            .len(),
        3
    );
}

#[test]
fn sweep_shape_and_report_arithmetic() {
    let cfg = tiny(&[
        "corpus.utterances=48",
        "teacher.epochs=1",
        "student.epochs=1",
        "eval.held_out=6",
    ]);
    let root = TempDir::new().unwrap();
    let sw = root.path().join("sweep");
    stage(&sw, Stage::Sweep, &cfg);
    let table = Table::read(&sw.join("sweep.csv")).unwrap();
    assert_eq!(
        table.header,
        ["epsilon", "method", "mean_ter", "se", "seeds"]
    );
    assert_eq!(table.rows.len(), 16);
    assert!(table.rows.iter().all(|r| r[4] == "5"));
    assert_eq!(Table::read(&sw.join("cells.csv")).unwrap().rows.len(), 80);

    let rep = root.path().join("report");
    stage(&rep, Stage::Report { sweep: sw.clone() }, &cfg);
    let rows = read_sweep_table(&sw.join("sweep.csv")).unwrap();
    let report = Table::read(&rep.join("report.csv")).unwrap();
    assert_eq!(report.rows.len(), 4);
    for (g, r) in gaps(&rows).iter().zip(&report.rows) {
        let find = |m: &str| {
            table
                .rows
                .iter()
                .find(|t| t[1] == m && t[0].parse::<f64>().unwrap() == g.epsilon)
                .unwrap()[2]
                .parse::<f64>()
                .unwrap()
        };
        assert_eq!(g.gap, find("dpsgd") - find("pate_gnmax"));
        assert_eq!(r[5].parse::<f64>().unwrap(), g.gap);
    }

    // thread count does not change the table
    let other = root.path().join("sweep1");
    rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| stage(&other, Stage::Sweep, &cfg));
    assert_eq!(
        std::fs::read(sw.join("cells.csv")).unwrap(),
        std::fs::read(other.join("cells.csv")).unwrap()
    );
}

fn dpseq(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dpseq"))
        .args(args)
        .current_dir(cwd)
        .env("DPSEQ_RUN_ROOT", cwd.join("runs"))
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_exit_codes() {
    let dir = TempDir::new().unwrap();
    let cwd = dir.path();
    std::fs::write(cwd.join("c.toml"), TINY).unwrap();
    assert_eq!(
        dpseq(&["gen-data", "--config", "c.toml", "--out", "data"], cwd).0,
        0
    );
    assert_eq!(dpseq(&["gen-data", "--config", "c.toml"], cwd).0, 0);
    assert_eq!(std::fs::read_dir(cwd.join("runs")).unwrap().count(), 1);
    assert_eq!(dpseq(&["verify", "data"], cwd).0, 0);

    assert_eq!(
        dpseq(
            &["gen-data", "--config", "c.toml", "--set", "model.depth=2"],
            cwd
        )
        .0,
        2
    );
    assert_eq!(dpseq(&["gen-data", "--config", "missing.toml"], cwd).0, 1);
    assert_eq!(dpseq(&["sweep", "--config", "c.toml"], cwd).0, 2);
    assert_eq!(dpseq(&["frobnicate"], cwd).0, 2);

    assert_eq!(
        dpseq(
            &[
                "train-teachers",
                "--config",
                "c.toml",
                "--corpus",
                "data",
                "--out",
                "t"
            ],
            cwd
        )
        .0,
        0
    );
    let over = [
        "relabel",
        "--config",
        "c.toml",
        "--corpus",
        "data",
        "--teachers",
        "t",
        "--epsilon",
        "1",
        "--scale",
        "0.5",
        "--out",
        "l",
    ];
    assert_eq!(dpseq(&over, cwd).0, 3);
    assert!(!cwd.join("l").exists());
    let exhausted = [
        "train-dpsgd",
        "--config",
        "c.toml",
        "--corpus",
        "data",
        "--epsilon",
        "0.01",
        "--noise-multiplier",
        "1",
        "--out",
        "d",
    ];
    assert_eq!(dpseq(&exhausted, cwd).0, 3);
    let diverge = [
        "train-teachers",
        "--config",
        "c.toml",
        "--corpus",
        "data",
        "--out",
        "t2",
        "--set",
        "teacher.optimizer=sgd",
        "--set",
        "teacher.learning_rate=1e300",
    ];
    assert_eq!(dpseq(&diverge, cwd).0, 4);
}
