use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

use super::*;
use crate::linalg::Matrix;

fn dims() -> Dims {
    Dims {
        input: 4,
        hidden: 5,
        vocab: 3,
    }
}

fn features(t: usize, f: usize, seed: u64) -> Matrix {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(
        t,
        f,
        (0..t * f).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn nbest() -> Vec<Hypothesis> {
    vec![
        Hypothesis {
            tokens: vec![0, 2],
            log_prob: -1.0,
            normalized_prob: 0.6,
        },
        Hypothesis {
            tokens: vec![1],
            log_prob: -1.4,
            normalized_prob: 0.3,
        },
        Hypothesis {
            tokens: vec![0, 0, 1],
            log_prob: -3.0,
            normalized_prob: 0.1,
        },
    ]
}

fn soft_frames(t: usize, c: usize) -> PosteriorSeq {
    PosteriorSeq::from_rows(
        (0..t)
            .map(|i| {
                let mut row = vec![0.1 / (c - 1) as f64; c];
                row[i % c] = 0.9;
                row
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn grad_check_is_exact_on_quadratic() {
    // f(w) = ½‖Aw − b‖², ∇f = Aᵀ(Aw − b).
    let a = [[1.0, 2.0, -1.0], [0.5, -3.0, 2.0]];
    let b = [0.3, -1.2];
    let f = |w: &[f64]| -> f64 {
        a.iter()
            .zip(&b)
            .map(|(r, bi)| (r.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() - bi).powi(2) / 2.0)
            .sum()
    };
    let w = [0.7, -0.2, 1.1];
    let mut g = [0.0; 3];
    for (r, bi) in a.iter().zip(&b) {
        let res: f64 = r.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() - bi;
        for j in 0..3 {
            g[j] += r[j] * res;
        }
    }
    assert!(grad_check(&w, &g, f, 1.0, 1) < 1e-8);
    g[1] += 1.0;
    assert!(grad_check(&w, &g, f, 1.0, 1) > 1e-3);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let x = features(7, 4, 2);
    let cases: Vec<(Arch, Target)> = vec![
        (Arch::FrameClassifier, Target::Labels(vec![0, 2, 2])),
        (Arch::FrameClassifier, Target::Frames(soft_frames(7, 4))),
        (Arch::Ctc, Target::Labels(vec![1, 0])),
        (Arch::Ctc, Target::Frames(soft_frames(7, 4))),
        (
            Arch::Ctc,
            Target::Distill {
                labels: vec![0, 2],
                nbest: nbest(),
                kd_weight: 0.5,
            },
        ),
        (Arch::Rnnt, Target::Labels(vec![2, 1, 1])),
        (Arch::Rnnt, Target::Labels(vec![])),
        (
            Arch::Rnnt,
            Target::Distill {
                labels: vec![0, 2],
                nbest: nbest(),
                kd_weight: 0.5,
            },
        ),
    ];
    for (arch, target) in cases {
        let p = ModelParams::init(arch, dims(), 11).unwrap();
        // Full coverage, not just a subsample, on these small models.
        let err = grad_check_model(&p, &x, &target, 1.0, 3).unwrap();
        assert!(err < 1e-4, "{arch:?} {target:?}: {err}");
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    let x = features(6, 4, 5);
    for (arch, target) in [
        (Arch::FrameClassifier, Target::Labels(vec![1])),
        (Arch::Ctc, Target::Labels(vec![1, 2])),
        (Arch::Rnnt, Target::Labels(vec![0, 1])),
    ] {
        let p = ModelParams::init(arch, dims(), 4).unwrap();
        let dx = evaluate(&p, &x, &target, Want::INPUT)
            .unwrap()
            .input_grad
            .unwrap();
        let err = grad_check(
            x.as_slice(),
            dx.as_slice(),
            |v| {
                let m = Matrix::from_vec(6, 4, v.to_vec()).unwrap();
                evaluate(&p, &m, &target, Want::LOSS).unwrap().loss
            },
            1.0,
            0,
        );
        assert!(err < 1e-5, "{arch:?}: {err}");
    }
}

#[test]
fn loss_only_matches_full_evaluation() {
    let x = features(5, 4, 8);
    let p = ModelParams::init(Arch::Rnnt, dims(), 2).unwrap();
    let t = Target::Labels(vec![2, 0]);
    let a = evaluate(&p, &x, &t, Want::LOSS).unwrap();
    let b = evaluate(
        &p,
        &x,
        &t,
        Want {
            params: true,
            input: true,
        },
    )
    .unwrap();
    assert_eq!(a.loss, b.loss);
    assert!(a.grad.is_none() && b.grad.is_some() && b.input_grad.is_some());
}

#[test]
fn transducer_rejects_frame_targets() {
    let p = ModelParams::init(Arch::Rnnt, dims(), 2).unwrap();
    assert!(evaluate(
        &p,
        &features(7, 4, 1),
        &Target::Frames(soft_frames(7, 4)),
        Want::LOSS
    )
    .is_err());
}

#[test]
fn wrong_feature_width_is_rejected() {
    let p = ModelParams::init(Arch::Ctc, dims(), 2).unwrap();
    assert!(matches!(
        forward(&p, &features(3, 5, 1)),
        Err(crate::Error::DimensionMismatch(_))
    ));
}

#[test]
fn frame_posteriors_are_distributions() {
    for arch in [Arch::FrameClassifier, Arch::Ctc, Arch::Rnnt] {
        let p = ModelParams::init(arch, dims(), 9).unwrap();
        let post = forward(&p, &features(8, 4, 3)).unwrap();
        assert_eq!((post.frames(), post.classes()), (8, 4));
        for t in 0..8 {
            assert!((post.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn kd_loss_floor_and_value() {
    let post = soft_frames(4, 4);
    let hyps = nbest();
    let direct: f64 = hyps
        .iter()
        .map(|h| {
            -h.normalized_prob
                * sequence_log_prob(&post.log_probs(), &h.tokens, CollapseRule::Ctc, 3).unwrap()
        })
        .sum();
    assert!((kd_loss(&post, &hyps, CollapseRule::Ctc).unwrap() - direct).abs() < 1e-12);
    let one_hot = PosteriorSeq::from_rows(vec![vec![0.0, 0.0, 0.0, 1.0]; 4]).unwrap();
    let floored = kd_loss(&one_hot, &hyps, CollapseRule::Ctc).unwrap();
    assert!((floored - 700.0).abs() < 1e-9);
}

fn toy_dataset() -> Vec<Example> {
    // Token k is signalled by feature k being high for three frames.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    (0..24)
        .map(|_| {
            let tokens: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
            let mut rows = Vec::new();
            for &k in &tokens {
                for _ in 0..3 {
                    let mut r: Vec<f64> = (0..4).map(|_| rng.random_range(-0.1..0.1)).collect();
                    r[k] += 1.0;
                    rows.push(r);
                }
                rows.push(vec![0.0, 0.0, 0.0, 1.0]);
            }
            let features = Matrix::from_rows(&rows).unwrap();
            Example {
                features,
                target: Target::Labels(tokens),
            }
        })
        .collect()
}

#[test]
fn training_reduces_loss_for_every_architecture() {
    for (arch, opt, lr) in [
        (Arch::FrameClassifier, OptimizerKind::Sgd, 0.1),
        (Arch::Ctc, OptimizerKind::Adam, 0.02),
        (Arch::Rnnt, OptimizerKind::Adam, 0.02),
    ] {
        let data = toy_dataset();
        let cfg = TrainConfig {
            optimizer: opt,
            learning_rate: lr,
            epochs: 15,
            batch_size: 4,
            seed: 3,
        };
        let out = train(ModelParams::init(arch, dims(), 1).unwrap(), &data, &cfg).unwrap();
        assert_eq!(out.loss_trace.len(), 15);
        assert_eq!(out.steps, 15 * 6);
        let (first, last) = (out.loss_trace[0], *out.loss_trace.last().unwrap());
        assert!(last < 0.5 * first, "{arch:?}: {first} -> {last}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    for opt in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let p = ModelParams::init(Arch::Ctc, dims(), 1).unwrap();
        let cfg = TrainConfig {
            optimizer: opt,
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 5,
            seed: 3,
        };
        let out = train(p.clone(), &toy_dataset(), &cfg).unwrap();
        assert_eq!(out.params, p);
    }
}

#[test]
fn training_is_deterministic() {
    let data = toy_dataset();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 0.01,
        epochs: 2,
        batch_size: 3,
        seed: 8,
    };
    let p = ModelParams::init(Arch::Rnnt, dims(), 1).unwrap();
    assert_eq!(
        train(p.clone(), &data, &cfg).unwrap(),
        train(p, &data, &cfg).unwrap()
    );
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let data = toy_dataset();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 1e300,
        epochs: 5,
        batch_size: 4,
        seed: 1,
    };
    let err = train(
        ModelParams::init(Arch::FrameClassifier, dims(), 1).unwrap(),
        &data,
        &cfg,
    )
    .unwrap_err();
    assert!(
        matches!(err, crate::Error::DivergenceDetected { .. }),
        "{err:?}"
    );
}

#[test]
fn step_hook_can_stop_early() {
    let data = toy_dataset();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.1,
        epochs: 3,
        batch_size: 4,
        seed: 1,
    };
    let out = train_with(
        ModelParams::init(Arch::Ctc, dims(), 1).unwrap(),
        &data,
        &cfg,
        |step, g| Ok((step < 4).then(|| mean_gradient(&g))),
    )
    .unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.steps, 4);
}

#[test]
fn trained_models_decode_their_targets() {
    for arch in [Arch::Ctc, Arch::Rnnt] {
        let data = toy_dataset();
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.03,
            epochs: 80,
            batch_size: 4,
            seed: 3,
        };
        let out = train(ModelParams::init(arch, dims(), 1).unwrap(), &data, &cfg).unwrap();
        let correct = data
            .iter()
            .filter(|e| match &e.target {
                Target::Labels(l) => decode(&out.params, &e.features).unwrap() == *l,
                _ => false,
            })
            .count();
        assert!(correct >= 20, "{arch:?}: {correct}/24");
    }
}

#[test]
fn zero_weights_give_uniform_posteriors() {
    for arch in [Arch::FrameClassifier, Arch::Ctc, Arch::Rnnt] {
        let p = ModelParams::zeros(arch, dims()).unwrap();
        let post = forward(&p, &features(5, 4, 1)).unwrap();
        for t in 0..5 {
            assert!(post.row(t).iter().all(|&q| (q - 0.25).abs() < 1e-15));
        }
    }
}

#[test]
fn single_frame_matches_hand_computed_recurrence() {
    let p = ModelParams::init(Arch::Ctc, dims(), 3).unwrap();
    let x = features(1, 4, 2);
    let (wx, b, wo, bo) = (
        p.block(Block::InputWeights),
        p.block(Block::HiddenBias),
        p.block(Block::OutputWeights),
        p.block(Block::OutputBias),
    );
    let h: Vec<f64> = (0..5)
        .map(|i| libm::tanh((0..4).map(|j| wx[i * 4 + j] * x.get(0, j)).sum::<f64>() + b[i]))
        .collect();
    let z: Vec<f64> = (0..4)
        .map(|k| (0..5).map(|i| wo[k * 5 + i] * h[i]).sum::<f64>() + bo[k])
        .collect();
    let s: f64 = z.iter().map(|v| libm::exp(*v)).sum();
    let post = forward(&p, &x).unwrap();
    for (k, zk) in z.iter().enumerate() {
        assert!((post.row(0)[k] - libm::exp(*zk) / s).abs() < 1e-14);
    }
}

#[test]
fn one_sgd_step_on_one_sample_is_a_hand_step() {
    let p = ModelParams::init(Arch::Ctc, dims(), 3).unwrap();
    let x = features(4, 4, 2);
    let target = Target::Labels(vec![1, 2]);
    let g = evaluate(&p, &x, &target, Want::PARAMS)
        .unwrap()
        .grad
        .unwrap();
    let expected: Vec<f64> = p
        .values
        .iter()
        .zip(&g.0)
        .map(|(v, d)| v - 0.05 * d)
        .collect();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.05,
        epochs: 1,
        batch_size: 8,
        seed: 0,
    };
    let out = train(
        p,
        &[Example {
            features: x,
            target,
        }],
        &cfg,
    )
    .unwrap();
    assert_eq!(out.params.values, expected);
}

#[test]
fn widening_the_beam_never_lowers_the_best_score() {
    let p = ModelParams::init(Arch::Ctc, dims(), 5).unwrap();
    let post = forward(&p, &features(9, 4, 7)).unwrap();
    let mut best = f64::NEG_INFINITY;
    for n in 1..8 {
        let top = beam_search(&post, CollapseRule::Ctc, n).unwrap()[0].log_prob;
        assert!(top >= best);
        best = top;
    }
}

#[test]
fn one_hot_correct_posteriors_have_zero_loss() {
    let rows = [1usize, 3, 0, 0, 3, 0]
        .iter()
        .map(|&k| (0..4).map(|j| f64::from(u8::from(j == k))).collect())
        .collect();
    let post = PosteriorSeq::from_rows(rows).unwrap();
    assert!(ctc_loss(&post, &[1, 0, 0]).unwrap().abs() < 1e-9);
}

#[test]
fn kd_against_own_full_distribution_is_its_entropy() {
    let post = PosteriorSeq::from_rows(vec![
        vec![0.5, 0.2, 0.3],
        vec![0.1, 0.6, 0.3],
        vec![0.3, 0.3, 0.4],
    ])
    .unwrap();
    let all = beam_search(&post, CollapseRule::Ctc, 100).unwrap();
    let mass: f64 = all.iter().map(|h| libm::exp(h.log_prob)).sum();
    assert!((mass - 1.0).abs() < 1e-12, "beam must cover every sequence");
    let entropy: f64 = all
        .iter()
        .map(|h| -h.normalized_prob * libm::log(h.normalized_prob))
        .sum();
    let kd = kd_loss(&post, &all, CollapseRule::Ctc).unwrap();
    assert!((kd - entropy).abs() < 1e-12, "{kd} vs {entropy}");
}

#[test]
fn kd_with_single_certain_hypothesis_is_sequence_nll() {
    let p = ModelParams::init(Arch::Ctc, dims(), 5).unwrap();
    let x = features(6, 4, 7);
    let h = Hypothesis {
        tokens: vec![2, 1],
        log_prob: -0.3,
        normalized_prob: 1.0,
    };
    let kd = Target::Distill {
        labels: vec![],
        nbest: vec![h],
        kd_weight: 1.0,
    };
    let blank_only = evaluate(&p, &x, &Target::Labels(vec![]), Want::LOSS)
        .unwrap()
        .loss;
    let nll = evaluate(&p, &x, &Target::Labels(vec![2, 1]), Want::LOSS)
        .unwrap()
        .loss;
    assert!((evaluate(&p, &x, &kd, Want::LOSS).unwrap().loss - (blank_only + nll)).abs() < 1e-12);
}
