use alloc::vec;
use alloc::vec::Vec;

use super::PosteriorSeq;
use crate::linalg::Matrix;
use crate::math::{exp, log_add};
use crate::{Error, Result};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Minimum frames a CTC alignment of `labels` needs: one per label plus a
/// separating blank between adjacent repeats.
pub(crate) fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood of `labels` under frame posteriors.
pub fn ctc_loss(posteriors: &PosteriorSeq, labels: &[usize]) -> Result<f64> {
    let blank = posteriors.classes() - 1;
    ctc_loss_log(&posteriors.log_probs(), labels, blank).map(|(loss, _)| loss)
}

/// CTC loss over `T × C` log-probabilities, with its gradient with respect to
/// the pre-softmax logits (`log_probs` is assumed to be a log-softmax).
///
/// Returns `(loss, grad)`. If the labels are supported by no path the loss is
/// `+inf` and the gradient is zero.
pub fn ctc_loss_log(log_probs: &Matrix, labels: &[usize], blank: usize) -> Result<(f64, Matrix)> {
    let (t_len, classes) = (log_probs.rows(), log_probs.cols());
    if blank >= classes || labels.iter().any(|&l| l >= classes || l == blank) {
        return Err(Error::DimensionMismatch(
            "label outside the token range".into(),
        ));
    }
    if min_frames(labels) > t_len {
        return Err(Error::InfeasibleAlignment {
            labels: labels.len(),
            frames: t_len,
        });
    }
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[0] = log_probs.get(0, blank);
    if s_len > 1 {
        alpha[1] = log_probs.get(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let lp = log_probs.row(t);
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = a + lp[ext[s]];
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    let mut grad = Matrix::zeros(t_len, classes);
    if log_p == NEG_INF {
        return Ok((f64::INFINITY, grad));
    }

    // beta[t][s]: log-prob of completing from state s at t, excluding frame t's emission.
    let mut beta = vec![NEG_INF; t_len * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let lp = log_probs.row(t + 1);
        for s in 0..s_len {
            let mut b = next[s] + lp[ext[s]];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1] + lp[ext[s + 1]]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, next[s + 2] + lp[ext[s + 2]]);
            }
            cur[s] = b;
        }
    }

    for t in 0..t_len {
        let g = grad.row_mut(t);
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = exp(log_probs.get(t, k));
        }
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > NEG_INF {
                g[ext[s]] -= exp(occ);
            }
        }
    }
    Ok((-log_p, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{ln, log_softmax_in_place};
    use crate::seqmodel::decode::{collapse, CollapseRule};
    use rand::{Rng, SeedableRng};

    fn random_log_probs(t: usize, c: usize, seed: u64) -> Matrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(t, c);
        for r in 0..t {
            let row = m.row_mut(r);
            for v in row.iter_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
            log_softmax_in_place(row);
        }
        m
    }

    /// Sum over every length-T path whose collapse equals the labels.
    fn brute_force(lp: &Matrix, labels: &[usize], blank: usize) -> f64 {
        let (t, c) = (lp.rows(), lp.cols());
        let mut total = 0.0;
        let mut path = vec![0usize; t];
        for code in 0..c.pow(t as u32) {
            let mut x = code;
            for p in path.iter_mut() {
                *p = x % c;
                x /= c;
            }
            if collapse(&path, CollapseRule::Ctc, blank) == labels {
                total += path
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| exp(lp.get(i, k)))
                    .product::<f64>();
            }
        }
        total
    }

    #[test]
    fn matches_path_enumeration() {
        let cases: &[&[usize]] = &[&[], &[0], &[1, 0], &[0, 0], &[1, 1, 0], &[0, 1, 0]];
        for (i, labels) in cases.iter().enumerate() {
            for t in 1..=6 {
                let lp = random_log_probs(t, 3, 10 + i as u64 * 7 + t as u64);
                let oracle = brute_force(&lp, labels, 2);
                match ctc_loss_log(&lp, labels, 2) {
                    Ok((loss, _)) => {
                        assert!(oracle > 0.0);
                        assert!(
                            (loss - (-ln(oracle))).abs() < 1e-9,
                            "{labels:?} T={t}: {loss} vs {}",
                            -ln(oracle)
                        );
                    }
                    Err(Error::InfeasibleAlignment { .. }) => {
                        assert_eq!(oracle, 0.0, "{labels:?} T={t}")
                    }
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_logits() {
        let labels = [0usize, 1, 1];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (t, c) = (7, 3);
        let logits: Vec<f64> = (0..t * c).map(|_| rng.random_range(-1.5..1.5)).collect();
        let loss_of = |z: &[f64]| {
            let mut m = Matrix::from_vec(t, c, z.to_vec()).unwrap();
            for r in 0..t {
                log_softmax_in_place(m.row_mut(r));
            }
            ctc_loss_log(&m, &labels, 2).unwrap()
        };
        let (_, grad) = loss_of(&logits);
        let h = 1e-5;
        for i in 0..t * c {
            let mut zp = logits.clone();
            zp[i] += h;
            let mut zm = logits.clone();
            zm[i] -= h;
            let fd = (loss_of(&zp).0 - loss_of(&zm).0) / (2.0 * h);
            assert!(
                (fd - grad.as_slice()[i]).abs() < 1e-7,
                "{i}: {fd} vs {}",
                grad.as_slice()[i]
            );
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let lp = random_log_probs(9, 4, 1);
        let (_, g) = ctc_loss_log(&lp, &[2, 0, 2], 3).unwrap();
        for r in g.iter_rows() {
            assert!(r.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_and_unsupported() {
        let lp = random_log_probs(2, 3, 1);
        assert_eq!(
            ctc_loss_log(&lp, &[0, 0], 2).unwrap_err(),
            Error::InfeasibleAlignment {
                labels: 2,
                frames: 2
            }
        );
        assert!(ctc_loss_log(&lp, &[2], 2).is_err());
        let one_hot = PosteriorSeq::from_rows(vec![vec![0.0, 0.0, 1.0]; 3]).unwrap();
        assert_eq!(ctc_loss(&one_hot, &[0]).unwrap(), f64::INFINITY);
        assert_eq!(ctc_loss(&one_hot, &[]).unwrap(), 0.0);
    }
}
