use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::Corpus;
use crate::rng::{purpose, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PartitionStrategy {
    /// Whole speakers are assigned to teachers.
    BySpeaker,
    /// Shuffled utterances are dealt to teachers in turn.
    RoundRobin,
}

/// Disjoint private subsets (one per teacher) plus the public set.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorpusPartition {
    /// Sorted utterance ids per teacher.
    pub subsets: Vec<Vec<usize>>,
    /// Sorted public utterance ids.
    pub public_set: Vec<usize>,
}

impl CorpusPartition {
    pub fn teachers(&self) -> usize {
        self.subsets.len()
    }

    pub fn private_ids(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.subsets.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }
}

/// Split `corpus` into `teachers` disjoint private subsets and a public set
/// holding `round(public_fraction · N)` utterances (at least one, and at most
/// `N − teachers` so every teacher gets data).
pub fn partition(
    corpus: &Corpus,
    teachers: usize,
    strategy: PartitionStrategy,
    public_fraction: f64,
    seed: u64,
) -> Result<CorpusPartition> {
    let n = corpus.len();
    if teachers == 0 || n < teachers + 1 {
        return Err(Error::InvalidConfig(alloc::format!(
            "{n} utterances cannot cover {teachers} teachers plus a public set"
        )));
    }
    if !(public_fraction > 0.0 && public_fraction < 1.0) {
        return Err(Error::InvalidRange(alloc::format!(
            "public_fraction = {public_fraction}"
        )));
    }
    let mut rng = stream(seed, purpose::PARTITION, 0, 0);
    let mut ids: Vec<usize> = corpus.utterances.iter().map(|u| u.id).collect();
    ids.shuffle(&mut rng);

    let public_count = (libm::round(public_fraction * n as f64) as usize).clamp(1, n - teachers);
    let mut public_set = ids[..public_count].to_vec();
    let private = &ids[public_count..];
    public_set.sort_unstable();

    let mut subsets = vec![Vec::new(); teachers];
    match strategy {
        PartitionStrategy::RoundRobin => {
            for (k, &id) in private.iter().enumerate() {
                subsets[k % teachers].push(id);
            }
        }
        PartitionStrategy::BySpeaker => {
            // group private utterances by speaker, in shuffled speaker order
            let mut speakers: Vec<(usize, Vec<usize>)> = Vec::new();
            for &id in private {
                let spk = corpus.get(id).expect("id from corpus").speaker;
                match speakers.iter_mut().find(|(s, _)| *s == spk) {
                    Some((_, v)) => v.push(id),
                    None => speakers.push((spk, vec![id])),
                }
            }
            if speakers.len() < teachers {
                return Err(Error::TooFewSpeakers {
                    needed: teachers,
                    found: speakers.len(),
                });
            }
            // largest speakers first, each to the currently smallest subset
            speakers.sort_by_key(|s| core::cmp::Reverse(s.1.len()));
            for (_, utts) in speakers {
                let target = (0..teachers)
                    .min_by_key(|&i| (subsets[i].len(), i))
                    .expect("teachers >= 1");
                subsets[target].extend(utts);
            }
        }
    }
    for s in subsets.iter_mut() {
        s.sort_unstable();
    }
    Ok(CorpusPartition {
        subsets,
        public_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use alloc::collections::BTreeSet;

    fn corpus(n: usize, speakers: usize) -> Corpus {
        generate_corpus(&CorpusConfig {
            utterances: n,
            speakers,
            ..Default::default()
        })
        .unwrap()
    }

    fn check_invariants(c: &Corpus, p: &CorpusPartition) {
        let mut seen = BTreeSet::new();
        for s in p.subsets.iter().chain(core::iter::once(&p.public_set)) {
            assert!(!s.is_empty());
            for &id in s {
                assert!(seen.insert(id), "utterance {id} appears twice");
            }
        }
        let all: BTreeSet<usize> = c.utterances.iter().map(|u| u.id).collect();
        assert_eq!(seen, all);
    }

    #[test]
    fn single_teacher_gets_all_private_data() {
        let c = corpus(30, 4);
        let p = partition(&c, 1, PartitionStrategy::RoundRobin, 0.2, 3).unwrap();
        assert_eq!(p.subsets.len(), 1);
        assert_eq!(p.subsets[0].len() + p.public_set.len(), 30);
    }

    #[test]
    fn default_split_is_fifteen_by_eighty_plus_240_public() {
        let c = corpus(1440, 24);
        let p = partition(&c, 15, PartitionStrategy::RoundRobin, 1.0 / 6.0, 0).unwrap();
        assert_eq!(p.public_set.len(), 240);
        assert!(p.subsets.iter().all(|s| s.len() == 80));
        check_invariants(&c, &p);
    }

    #[test]
    fn exhaustive_disjointness_on_small_corpus() {
        let c = corpus(100, 12);
        for teachers in [1, 2, 5, 10] {
            for strategy in [PartitionStrategy::RoundRobin, PartitionStrategy::BySpeaker] {
                for seed in 0..5 {
                    let p = partition(&c, teachers, strategy, 0.25, seed).unwrap();
                    check_invariants(&c, &p);
                }
            }
        }
    }

    #[test]
    fn by_speaker_keeps_speakers_whole() {
        let c = corpus(200, 12);
        let p = partition(&c, 5, PartitionStrategy::BySpeaker, 0.2, 9).unwrap();
        let mut owner = alloc::collections::BTreeMap::new();
        for (i, s) in p.subsets.iter().enumerate() {
            for &id in s {
                let spk = c.get(id).unwrap().speaker;
                assert_eq!(*owner.entry(spk).or_insert(i), i);
            }
        }
    }

    #[test]
    fn too_few_speakers() {
        let c = corpus(100, 3);
        let e = partition(&c, 5, PartitionStrategy::BySpeaker, 0.2, 0);
        assert_eq!(
            e,
            Err(Error::TooFewSpeakers {
                needed: 5,
                found: 3
            })
        );
    }

    #[test]
    fn rejects_bad_fraction_and_size() {
        let c = corpus(10, 3);
        assert!(partition(&c, 2, PartitionStrategy::RoundRobin, 0.0, 0).is_err());
        assert!(partition(&c, 2, PartitionStrategy::RoundRobin, 1.0, 0).is_err());
        assert!(partition(&c, 10, PartitionStrategy::RoundRobin, 0.5, 0).is_err());
    }
}
