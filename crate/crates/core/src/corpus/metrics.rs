use alloc::vec;

use crate::{Error, Result};

/// Counts of a minimal unit-cost alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditOps {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditOps {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Levenshtein alignment of `hyp` against `reference`. Among minimal
/// alignments the one with the fewest substitutions is reported.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hyp.len());
    // (cost, substitutions, insertions, deletions) per cell, one row at a time
    type Cell = (usize, usize, usize, usize);
    let better = |a: Cell, b: Cell| if (b.0, b.1) < (a.0, a.1) { b } else { a };
    let mut prev: alloc::vec::Vec<Cell> = (0..=m).map(|j| (j, 0, j, 0)).collect();
    let mut cur = vec![(0, 0, 0, 0); m + 1];
    for i in 1..=n {
        cur[0] = (i, 0, 0, i);
        for j in 1..=m {
            let diag = prev[j - 1];
            let mut best = if reference[i - 1] == hyp[j - 1] {
                diag
            } else {
                (diag.0 + 1, diag.1 + 1, diag.2, diag.3)
            };
            let up = prev[j];
            best = better(best, (up.0 + 1, up.1, up.2, up.3 + 1));
            let left = cur[j - 1];
            best = better(best, (left.0 + 1, left.1, left.2 + 1, left.3));
            cur[j] = best;
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    let (_, substitutions, insertions, deletions) = prev[m];
    EditOps {
        substitutions,
        insertions,
        deletions,
    }
}

/// `(S + I + D) / len(reference)`.
pub fn token_error_rate<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(reference, hyp).total() as f64 / reference.len() as f64)
}

/// Corpus-level accumulator: total errors over total reference tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorTally {
    pub errors: usize,
    pub reference_tokens: usize,
}

impl ErrorTally {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hyp: &[T]) {
        self.errors += edit_distance(reference, hyp).total();
        self.reference_tokens += reference.len();
    }

    pub fn rate(&self) -> Result<f64> {
        if self.reference_tokens == 0 {
            return Err(Error::EmptyReference);
        }
        Ok(self.errors as f64 / self.reference_tokens as f64)
    }
}

/// Corpus-level token error rate of a model's greedy decodes.
pub fn model_error_rate(
    params: &crate::seqmodel::ModelParams,
    utterances: &[super::Utterance],
) -> Result<f64> {
    let decoded = crate::par::map(utterances, |u| crate::seqmodel::decode(params, &u.features));
    let mut tally = ErrorTally::default();
    for (u, hyp) in utterances.iter().zip(decoded) {
        tally.add(&u.tokens, &hyp?);
    }
    tally.rate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    /// Minimal cost over every alignment, by exhaustive recursion.
    fn brute(r: &[u8], h: &[u8]) -> usize {
        match (r.split_first(), h.split_first()) {
            (None, _) => h.len(),
            (_, None) => r.len(),
            (Some((a, rr)), Some((b, hh))) => {
                let sub = brute(rr, hh) + usize::from(a != b);
                sub.min(brute(rr, h) + 1).min(brute(r, hh) + 1)
            }
        }
    }

    #[test]
    fn examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), EditOps::default());
        assert_eq!(
            edit_distance(&[1, 2, 3], &[]),
            EditOps {
                substitutions: 0,
                insertions: 0,
                deletions: 3
            }
        );
        assert_eq!(
            edit_distance::<u8>(&[], &[4, 4]),
            EditOps {
                substitutions: 0,
                insertions: 2,
                deletions: 0
            }
        );
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 5, 3, 4]).total(), 2);
        assert_eq!(
            token_error_rate::<u8>(&[], &[1]),
            Err(Error::EmptyReference)
        );
        assert_eq!(token_error_rate(&[1, 2], &[2]).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn matches_exhaustive_alignment(r in proptest::collection::vec(0u8..3, 0..=6), h in proptest::collection::vec(0u8..3, 0..=6)) {
            let ops = edit_distance(&r, &h);
            prop_assert_eq!(ops.total(), brute(&r, &h));
            // counts are consistent with the lengths
            prop_assert_eq!(r.len() + ops.insertions, h.len() + ops.deletions);
        }

        #[test]
        fn is_a_metric(a in proptest::collection::vec(0u8..4, 0..8), b in proptest::collection::vec(0u8..4, 0..8), c in proptest::collection::vec(0u8..4, 0..8)) {
            let d = |x: &Vec<u8>, y: &Vec<u8>| edit_distance(x, y).total();
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
            prop_assert_eq!(d(&a, &a), 0);
        }
    }
}
