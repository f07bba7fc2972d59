use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use super::ctc::{ctc_loss_log, min_frames};
use super::PosteriorSeq;
use crate::linalg::Matrix;
use crate::math::{argmax, exp, log_add};
use crate::{Error, Result};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Smallest internal beam width used by [`beam_search`].
pub const BEAM_FLOOR: usize = 16;

/// How a frame-level symbol sequence maps to a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CollapseRule {
    /// Merge consecutive repeats, then drop blanks.
    Ctc,
    /// Drop blanks only; every non-blank frame is one token.
    DropBlanks,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Exact log-probability of the token sequence under the posteriors.
    pub log_prob: f64,
    /// Softmax of `log_prob` over the returned list.
    pub normalized_prob: f64,
}

pub fn collapse(symbols: &[usize], rule: CollapseRule, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in symbols {
        let keep = s != blank && (rule == CollapseRule::DropBlanks || prev != Some(s));
        if keep {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Per-frame argmax symbols.
pub fn greedy_frames(posteriors: &PosteriorSeq) -> Vec<usize> {
    (0..posteriors.frames())
        .map(|t| argmax(posteriors.row(t)))
        .collect()
}

pub fn greedy_decode(posteriors: &PosteriorSeq, rule: CollapseRule) -> Vec<usize> {
    collapse(&greedy_frames(posteriors), rule, posteriors.classes() - 1)
}

/// Log of the total probability of all frame paths that collapse to `labels`;
/// `-inf` when none does.
pub fn sequence_log_prob(
    log_probs: &Matrix,
    labels: &[usize],
    rule: CollapseRule,
    blank: usize,
) -> Result<f64> {
    let t_len = log_probs.rows();
    if labels.iter().any(|&l| l >= log_probs.cols() || l == blank) {
        return Err(Error::DimensionMismatch(
            "label outside the token range".into(),
        ));
    }
    match rule {
        CollapseRule::Ctc => {
            if min_frames(labels) > t_len {
                return Ok(NEG_INF);
            }
            Ok(-ctc_loss_log(log_probs, labels, blank)?.0)
        }
        CollapseRule::DropBlanks => {
            let u_len = labels.len();
            if u_len > t_len {
                return Ok(NEG_INF);
            }
            // a[u]: log-prob of the first t frames producing exactly labels[..u].
            let mut a = vec![NEG_INF; u_len + 1];
            a[0] = 0.0;
            for t in 0..t_len {
                let lp = log_probs.row(t);
                for u in (0..=u_len).rev() {
                    let stay = a[u] + lp[blank];
                    a[u] = if u > 0 {
                        log_add(stay, a[u - 1] + lp[labels[u - 1]])
                    } else {
                        stay
                    };
                }
            }
            Ok(a[u_len])
        }
    }
}

/// Top-`n` token sequences by exact probability.
///
/// `n == 1` returns the greedy decode. Otherwise a prefix beam search of width
/// `max(n, BEAM_FLOOR)` proposes candidates, the greedy decode is always added,
/// and every candidate is rescored exactly with [`sequence_log_prob`].
/// Zero-probability sequences are never returned; ties are broken
/// lexicographically.
pub fn beam_search(
    posteriors: &PosteriorSeq,
    rule: CollapseRule,
    n: usize,
) -> Result<Vec<Hypothesis>> {
    if n == 0 {
        return Err(Error::InvalidConfig("beam size must be at least 1".into()));
    }
    let blank = posteriors.classes() - 1;
    let log_probs = posteriors.log_probs();
    let greedy = greedy_decode(posteriors, rule);
    let mut candidates = BTreeSet::new();
    if n > 1 {
        candidates.extend(prefix_beam(&log_probs, rule, blank, n.max(BEAM_FLOOR)));
    }
    candidates.insert(greedy);

    let mut scored = Vec::with_capacity(candidates.len());
    for tokens in candidates {
        let lp = sequence_log_prob(&log_probs, &tokens, rule, blank)?;
        if lp == NEG_INF {
            continue;
        }
        scored.push(Hypothesis {
            tokens,
            log_prob: lp,
            normalized_prob: 0.0,
        });
    }
    // BTreeSet order is lexicographic; a stable sort keeps it among ties.
    scored.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
    scored.truncate(n);
    let top = scored[0].log_prob;
    let z: f64 = scored.iter().map(|h| exp(h.log_prob - top)).sum();
    for h in &mut scored {
        h.normalized_prob = exp(h.log_prob - top) / z;
    }
    Ok(scored)
}

/// Prefix probabilities split by whether the last frame was blank.
#[derive(Clone, Copy)]
struct PrefixScore {
    blank: f64,
    label: f64,
}

impl PrefixScore {
    const ZERO: Self = Self {
        blank: NEG_INF,
        label: NEG_INF,
    };

    fn total(&self) -> f64 {
        log_add(self.blank, self.label)
    }
}

fn prefix_beam(
    log_probs: &Matrix,
    rule: CollapseRule,
    blank: usize,
    width: usize,
) -> Vec<Vec<usize>> {
    let mut beam: Vec<(Vec<usize>, PrefixScore)> = vec![(
        Vec::new(),
        PrefixScore {
            blank: 0.0,
            label: NEG_INF,
        },
    )];
    for t in 0..log_probs.rows() {
        let lp = log_probs.row(t);
        let mut next: BTreeMap<Vec<usize>, PrefixScore> = BTreeMap::new();
        for (prefix, score) in &beam {
            let total = score.total();
            let e = next.entry(prefix.clone()).or_insert(PrefixScore::ZERO);
            e.blank = log_add(e.blank, total + lp[blank]);
            for (k, &lk) in lp.iter().enumerate() {
                if k == blank || lk == NEG_INF {
                    continue;
                }
                let repeat = rule == CollapseRule::Ctc && prefix.last() == Some(&k);
                let mut extended = prefix.clone();
                extended.push(k);
                let via = if repeat {
                    let same = next.entry(prefix.clone()).or_insert(PrefixScore::ZERO);
                    same.label = log_add(same.label, score.label + lk);
                    score.blank + lk
                } else {
                    total + lk
                };
                if via > NEG_INF {
                    let e = next.entry(extended).or_insert(PrefixScore::ZERO);
                    e.label = log_add(e.label, via);
                }
            }
        }
        let mut ranked: Vec<_> = next.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total().total_cmp(&a.1.total()));
        ranked.truncate(width);
        beam = ranked;
    }
    beam.into_iter().map(|(p, _)| p).collect()
}

/// Most probable single frame path collapsing to `labels`, given per frame as
/// the index into `labels` of the emitted symbol, or `None` for blank.
pub fn forced_alignment(
    log_probs: &Matrix,
    labels: &[usize],
    rule: CollapseRule,
    blank: usize,
) -> Result<Vec<Option<usize>>> {
    let (t_len, u_len) = (log_probs.rows(), labels.len());
    let infeasible = Error::InfeasibleAlignment {
        labels: u_len,
        frames: t_len,
    };
    match rule {
        CollapseRule::Ctc => {
            if t_len < min_frames(labels) {
                return Err(infeasible);
            }
            let s_len = 2 * u_len + 1;
            let sym = |s: usize| {
                if s.is_multiple_of(2) {
                    blank
                } else {
                    labels[s / 2]
                }
            };
            let mut score = vec![f64::NEG_INFINITY; t_len * s_len];
            let mut from = vec![0usize; t_len * s_len];
            score[0] = log_probs.get(0, blank);
            if u_len > 0 {
                score[1] = log_probs.get(0, labels[0]);
            }
            for t in 1..t_len {
                for s in 0..s_len {
                    let mut best = (score[(t - 1) * s_len + s], s);
                    if s >= 1 && score[(t - 1) * s_len + s - 1] > best.0 {
                        best = (score[(t - 1) * s_len + s - 1], s - 1);
                    }
                    if s >= 2
                        && sym(s) != blank
                        && sym(s) != sym(s - 2)
                        && score[(t - 1) * s_len + s - 2] > best.0
                    {
                        best = (score[(t - 1) * s_len + s - 2], s - 2);
                    }
                    score[t * s_len + s] = best.0 + log_probs.get(t, sym(s));
                    from[t * s_len + s] = best.1;
                }
            }
            let last = (t_len - 1) * s_len;
            let mut s = if u_len > 0 && score[last + s_len - 2] > score[last + s_len - 1] {
                s_len - 2
            } else {
                s_len - 1
            };
            if score[last + s] == f64::NEG_INFINITY {
                return Err(infeasible);
            }
            let mut out = vec![None; t_len];
            for t in (0..t_len).rev() {
                out[t] = (s % 2 == 1).then_some(s / 2);
                s = from[t * s_len + s];
            }
            Ok(out)
        }
        CollapseRule::DropBlanks => {
            if t_len < u_len {
                return Err(infeasible);
            }
            // score[t][u]: best log-prob of emitting the first u labels in t frames
            let w = u_len + 1;
            let mut score = vec![f64::NEG_INFINITY; (t_len + 1) * w];
            score[0] = 0.0;
            for t in 0..t_len {
                for u in 0..w {
                    let stay = score[t * w + u] + log_probs.get(t, blank);
                    let emit = if u > 0 {
                        score[t * w + u - 1] + log_probs.get(t, labels[u - 1])
                    } else {
                        f64::NEG_INFINITY
                    };
                    score[(t + 1) * w + u] = stay.max(emit);
                }
            }
            if score[t_len * w + u_len] == f64::NEG_INFINITY {
                return Err(infeasible);
            }
            let mut out = vec![None; t_len];
            let mut u = u_len;
            for t in (0..t_len).rev() {
                let emit = if u > 0 {
                    score[t * w + u - 1] + log_probs.get(t, labels[u - 1])
                } else {
                    f64::NEG_INFINITY
                };
                if u > 0 && emit >= score[t * w + u] + log_probs.get(t, blank) {
                    u -= 1;
                    out[t] = Some(u);
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::ln;
    use rand::{Rng, SeedableRng};

    fn random_posteriors(t: usize, c: usize, seed: u64, peaky: f64) -> PosteriorSeq {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..t)
            .map(|_| {
                let w: Vec<f64> = (0..c)
                    .map(|_| exp(peaky * rng.random_range(0.0..1.0)))
                    .collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            })
            .collect();
        PosteriorSeq::from_rows(rows).unwrap()
    }

    /// Probability of every collapsed sequence, by enumerating all frame paths.
    fn exhaustive(p: &PosteriorSeq, rule: CollapseRule) -> BTreeMap<Vec<usize>, f64> {
        let (t, c) = (p.frames(), p.classes());
        let mut out = BTreeMap::new();
        let mut path = vec![0usize; t];
        for code in 0..c.pow(t as u32) {
            let mut x = code;
            for s in path.iter_mut() {
                *s = x % c;
                x /= c;
            }
            let prob: f64 = path.iter().enumerate().map(|(i, &k)| p.row(i)[k]).product();
            *out.entry(collapse(&path, rule, c - 1)).or_insert(0.0) += prob;
        }
        out
    }

    #[test]
    fn forced_alignment_is_the_best_path() {
        for rule in [CollapseRule::Ctc, CollapseRule::DropBlanks] {
            for seed in 0..60u64 {
                let (t, c) = (1 + (seed % 5) as usize, 3);
                let p = random_posteriors(t, c, seed, 4.0);
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1000);
                let labels: Vec<usize> = (0..rng.random_range(0..=t.min(3)))
                    .map(|_| rng.random_range(0..c - 1))
                    .collect();
                // brute force: best path among those collapsing to the labels
                let mut best = f64::NEG_INFINITY;
                let mut path = vec![0usize; t];
                for code in 0..c.pow(t as u32) {
                    let mut x = code;
                    for s in path.iter_mut() {
                        *s = x % c;
                        x /= c;
                    }
                    if collapse(&path, rule, c - 1) == labels {
                        best =
                            best.max(path.iter().enumerate().map(|(i, &k)| ln(p.row(i)[k])).sum());
                    }
                }
                match forced_alignment(&p.log_probs(), &labels, rule, c - 1) {
                    Ok(a) => {
                        let frames: Vec<usize> =
                            a.iter().map(|o| o.map_or(c - 1, |i| labels[i])).collect();
                        assert_eq!(collapse(&frames, rule, c - 1), labels);
                        let score: f64 = frames
                            .iter()
                            .enumerate()
                            .map(|(i, &k)| ln(p.row(i)[k]))
                            .sum();
                        assert!((score - best).abs() < 1e-12, "{rule:?} seed {seed}");
                    }
                    Err(_) => assert_eq!(best, f64::NEG_INFINITY),
                }
            }
        }
    }

    #[test]
    fn collapse_rules() {
        assert_eq!(
            collapse(&[0, 0, 2, 0, 1, 1, 2], CollapseRule::Ctc, 2),
            vec![0, 0, 1]
        );
        assert_eq!(
            collapse(&[0, 0, 2, 0, 1, 1, 2], CollapseRule::DropBlanks, 2),
            vec![0, 0, 0, 1, 1]
        );
        assert!(collapse(&[2, 2], CollapseRule::Ctc, 2).is_empty());
    }

    #[test]
    fn sequence_log_prob_matches_enumeration() {
        for rule in [CollapseRule::Ctc, CollapseRule::DropBlanks] {
            for seed in 0..4 {
                let p = random_posteriors(5, 3, seed, 2.0);
                let all = exhaustive(&p, rule);
                for (seq, prob) in &all {
                    let lp = sequence_log_prob(&p.log_probs(), seq, rule, 2).unwrap();
                    assert!((lp - ln(*prob)).abs() < 1e-10, "{rule:?} {seq:?}");
                }
                let total: f64 = all.values().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        let p = random_posteriors(2, 3, 0, 1.0);
        assert_eq!(
            sequence_log_prob(&p.log_probs(), &[0, 1, 0], CollapseRule::DropBlanks, 2).unwrap(),
            NEG_INF
        );
        assert_eq!(
            sequence_log_prob(&p.log_probs(), &[0, 0], CollapseRule::Ctc, 2).unwrap(),
            NEG_INF
        );
    }

    #[test]
    fn beam_matches_exhaustive_top_n() {
        for rule in [CollapseRule::Ctc, CollapseRule::DropBlanks] {
            for seed in 0..6 {
                let p = random_posteriors(6, 3, 100 + seed, 4.0);
                let mut oracle: Vec<_> = exhaustive(&p, rule).into_iter().collect();
                oracle.sort_by(|a, b| b.1.total_cmp(&a.1));
                let hyps = beam_search(&p, rule, 4).unwrap();
                assert_eq!(hyps.len(), 4);
                for (h, (seq, prob)) in hyps.iter().zip(&oracle) {
                    assert_eq!(&h.tokens, seq, "{rule:?} seed {seed}");
                    assert!((h.log_prob - ln(*prob)).abs() < 1e-10);
                }
                let z: f64 = hyps.iter().map(|h| h.normalized_prob).sum();
                assert!((z - 1.0).abs() < 1e-12);
                assert!(hyps.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
            }
        }
    }

    #[test]
    fn single_best_is_greedy() {
        let p = random_posteriors(8, 4, 7, 3.0);
        let h = beam_search(&p, CollapseRule::Ctc, 1).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].tokens, greedy_decode(&p, CollapseRule::Ctc));
        assert_eq!(h[0].normalized_prob, 1.0);
        assert!(beam_search(&p, CollapseRule::Ctc, 0).is_err());
    }

    #[test]
    fn list_shorter_than_n_when_few_sequences_exist() {
        let p = PosteriorSeq::from_rows(vec![vec![0.7, 0.3]]).unwrap();
        let h = beam_search(&p, CollapseRule::Ctc, 5).unwrap();
        let tokens: Vec<_> = h.iter().map(|h| h.tokens.clone()).collect();
        assert_eq!(tokens, vec![vec![0], vec![]]);
    }
}
