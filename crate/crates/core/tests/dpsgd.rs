use dpseq_core::accountant::PrivacyBudget;
use dpseq_core::corpus::{generate_corpus, CorpusConfig};
use dpseq_core::dpsgd::*;
use dpseq_core::rng::stream;
use dpseq_core::seqmodel::{
    train, Arch, Dims, Example, Gradient, ModelParams, OptimizerKind, Target, TrainConfig,
};
use dpseq_core::Error;

const ORDERS: [f64; 11] = [
    1.25, 1.5, 2.0, 3.0, 4.0, 8.0, 16.0, 32.0, 64.0, 256.0, 1024.0,
];

fn oracle_epsilon(sigma: f64, steps: usize, delta: f64) -> f64 {
    ORDERS
        .iter()
        .map(|&a| steps as f64 * a / (2.0 * sigma * sigma) + (1.0 / delta).ln() / (a - 1.0))
        .fold(f64::INFINITY, f64::min)
}

fn cfg(sigma: f64) -> DpSgdConfig {
    DpSgdConfig {
        clip_norm: 1.0,
        noise_multiplier: sigma,
        learning_rate: 0.1,
        epochs: 2,
        batch_size: 4,
        seed: 7,
        delta: 1e-3,
        target_epsilon: f64::INFINITY,
    }
}

fn data() -> (Vec<Example>, Dims) {
    let corpus = generate_corpus(&CorpusConfig {
        utterances: 18,
        speakers: 4,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let ex = corpus
        .utterances
        .iter()
        .map(|u| Example {
            features: u.features.clone(),
            target: Target::Labels(u.tokens.clone()),
        })
        .collect();
    (
        ex,
        Dims {
            input: corpus.config.feat_dim,
            hidden: 6,
            vocab: corpus.config.vocab,
        },
    )
}

#[test]
fn clipping_examples() {
    let g = Gradient(vec![0.3, -0.4]);
    assert_eq!(clip_gradient(&g, 1.0), g);
    let big = Gradient(vec![6.0, 8.0]);
    let c = clip_gradient(&big, 5.0);
    assert!((c.norm() - 5.0).abs() < 1e-15);
    assert!((c.0[0] - 3.0).abs() < 1e-15 && (c.0[1] - 4.0).abs() < 1e-15);
    let z = Gradient(vec![0.0; 3]);
    assert_eq!(clip_gradient(&z, 1.0), z);
}

#[test]
fn noiseless_step_is_sgd() {
    let mut rng = stream(1, 0, 0, 0);
    let g = Gradient(vec![0.2, -0.1, 0.05]);
    let u = dpsgd_step(
        std::slice::from_ref(&g),
        &DpSgdConfig {
            learning_rate: 0.5,
            ..cfg(0.0)
        },
        &mut rng,
    )
    .unwrap();
    assert_eq!(u.0, vec![-0.1, 0.05, -0.025]);
    let opposite = dpsgd_step(
        &[g.clone(), Gradient(g.0.iter().map(|v| -v).collect())],
        &cfg(0.0),
        &mut rng,
    )
    .unwrap();
    assert!(opposite.0.iter().all(|&v| v == 0.0));
    assert!(matches!(
        dpsgd_step(&[], &cfg(0.0), &mut rng),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn noise_only_update_std() {
    let c = DpSgdConfig {
        clip_norm: 2.0,
        noise_multiplier: 1.5,
        learning_rate: 0.3,
        batch_size: 4,
        ..cfg(0.0)
    };
    let zeros = vec![Gradient(vec![0.0; 1]); 4];
    let mut rng = stream(3, 0, 0, 0);
    let n = 100_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let v = dpsgd_step(&zeros, &c, &mut rng).unwrap().0[0];
        s += v;
        s2 += v * v;
    }
    let mean = s / n as f64;
    let std = (s2 / n as f64 - mean * mean).sqrt();
    let want = 0.3 * 1.5 * 2.0 / 4.0;
    // the sample std of n normals has relative SE ≈ 1/sqrt(2n)
    let se = want / (2.0 * n as f64).sqrt();
    assert!((std - want).abs() < 4.0 * se, "{std} vs {want}");
    assert!(mean.abs() < 4.0 * want / (n as f64).sqrt());
}

#[test]
fn accounting_matches_independent_oracle() {
    for sigma in [0.7, 1.1, 4.0, 25.0] {
        let mut prev = 0.0;
        for steps in [1, 10, 100, 1000] {
            let e = spent_epsilon(sigma, steps, 1e-3).unwrap();
            assert!(
                (e - oracle_epsilon(sigma, steps, 1e-3)).abs() < 1e-9,
                "σ={sigma} n={steps}"
            );
            assert!(e >= prev);
            prev = e;
        }
    }
    assert_eq!(spent_epsilon(0.0, 3, 1e-3).unwrap(), f64::INFINITY);
    let n = max_steps(2.0, 5.0, 1e-3, 10_000).unwrap();
    assert!(
        spent_epsilon(2.0, n, 1e-3).unwrap() <= 5.0
            && spent_epsilon(2.0, n + 1, 1e-3).unwrap() > 5.0
    );
    let sigma = calibrate_multiplier(PrivacyBudget::new(3.0, 1e-3).unwrap(), 200).unwrap();
    let e = spent_epsilon(sigma, 200, 1e-3).unwrap();
    assert!((2.97..=3.0).contains(&e));
}

#[test]
fn zero_noise_training_is_plain_sgd() {
    let (ex, dims) = data();
    let p = ModelParams::init(Arch::Ctc, dims, 1).unwrap();
    let c = DpSgdConfig {
        clip_norm: 1e9,
        ..cfg(0.0)
    };
    let dp = dpsgd_train(p.clone(), &ex, &c).unwrap();
    let tc = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.1,
        epochs: 2,
        batch_size: 4,
        seed: 7,
    };
    let plain = train(p, &ex, &tc).unwrap();
    assert_eq!(dp.params, plain.params);
    assert_eq!(dp.loss_trace, plain.loss_trace);
    assert_eq!(dp.steps, 10);
    assert_eq!(dp.spent.epsilon, f64::INFINITY);
}

#[test]
fn budget_stops_training() {
    let (ex, dims) = data();
    let p = ModelParams::init(Arch::Ctc, dims, 1).unwrap();
    // 5 steps per epoch; find a target that allows 7 steps
    let sigma = 3.0;
    let target =
        (spent_epsilon(sigma, 7, 1e-3).unwrap() + spent_epsilon(sigma, 8, 1e-3).unwrap()) / 2.0;
    let c = DpSgdConfig {
        target_epsilon: target,
        epochs: 3,
        ..cfg(sigma)
    };
    let out = dpsgd_train(p.clone(), &ex, &c).unwrap();
    assert_eq!(out.steps, 7);
    assert!(out.stopped_early);
    assert_eq!(out.spent.epsilon, spent_epsilon(sigma, 7, 1e-3).unwrap());
    assert!(out.spent.epsilon <= target);

    let tight = DpSgdConfig {
        target_epsilon: spent_epsilon(sigma, 3, 1e-3).unwrap(),
        ..c.clone()
    };
    assert_eq!(
        dpsgd_train(p.clone(), &ex, &tight).unwrap_err(),
        Error::BudgetExhaustedBeforeOneEpoch {
            steps: 3,
            per_epoch: 5
        }
    );

    let again = dpsgd_train(p.clone(), &ex, &c).unwrap();
    assert_eq!(again.params, out.params);
    let other = dpsgd_train(p, &ex, &DpSgdConfig { seed: 8, ..c }).unwrap();
    assert_ne!(other.params, out.params);
}

#[test]
fn config_validation() {
    let (ex, dims) = data();
    let p = ModelParams::init(Arch::Ctc, dims, 1).unwrap();
    for bad in [
        DpSgdConfig {
            clip_norm: 0.0,
            ..cfg(1.0)
        },
        DpSgdConfig {
            noise_multiplier: -1.0,
            ..cfg(1.0)
        },
        DpSgdConfig {
            delta: 0.0,
            ..cfg(1.0)
        },
    ] {
        assert!(dpsgd_train(p.clone(), &ex, &bad).is_err());
    }
}
