//! Released student label sets.
//!
//! ```text
//! labels.csv       utterance_id,frame,label    (one row per frame, blank included)
//! nbest.json       {format_version, rule, blank, entries: [{utterance_id, nbest: [{tokens, log_prob, normalized_prob}]}]}
//! accounting.json  {spent: {epsilon, delta}, report: {mechanism, scale, sensitivity, K, orders, rdp, epsilon, delta, lambda_k_over_2eps}}
//! ```
//!
//! `log_prob` is `null` for a hypothesis of probability zero; an unbounded
//! `spent.epsilon` is written as `null`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dpseq_core::accountant::{AccountingReport, PrivacyBudget};
use dpseq_core::pate::{LabeledUtterance, StudentLabelSet};
use dpseq_core::seqmodel::{CollapseRule, Hypothesis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LABELS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NbestFile {
    format_version: u32,
    rule: CollapseRule,
    blank: usize,
    entries: Vec<NbestEntry>,
}

#[derive(Serialize, Deserialize)]
struct NbestEntry {
    utterance_id: usize,
    nbest: Vec<HypothesisRecord>,
}

#[derive(Serialize, Deserialize)]
struct HypothesisRecord {
    tokens: Vec<usize>,
    log_prob: Option<f64>,
    normalized_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub spent: Budget,
    pub report: AccountingReport,
}

/// A budget whose unbounded ε is serialized as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub epsilon: Option<f64>,
    pub delta: f64,
}

impl From<PrivacyBudget> for Budget {
    fn from(b: PrivacyBudget) -> Self {
        Budget {
            epsilon: b.epsilon.is_finite().then_some(b.epsilon),
            delta: b.delta,
        }
    }
}

impl From<Budget> for PrivacyBudget {
    fn from(b: Budget) -> Self {
        PrivacyBudget {
            epsilon: b.epsilon.unwrap_or(f64::INFINITY),
            delta: b.delta,
        }
    }
}

pub fn write_label_set(dir: &Path, labels: &StudentLabelSet) -> Result<Vec<PathBuf>> {
    let path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e))?;
    w.write_record(["utterance_id", "frame", "label"])
        .map_err(|e| Error::format(&path, e))?;
    for e in &labels.entries {
        for (t, l) in e.frame_labels.iter().enumerate() {
            w.write_record([e.utterance_id.to_string(), t.to_string(), l.to_string()])
                .map_err(|e| Error::format(&path, e))?;
        }
    }
    w.flush().map_err(Error::io(&path))?;

    let nbest = NbestFile {
        format_version: LABELS_FORMAT_VERSION,
        rule: labels.rule,
        blank: labels.blank,
        entries: labels
            .entries
            .iter()
            .map(|e| NbestEntry {
                utterance_id: e.utterance_id,
                nbest: e
                    .nbest
                    .iter()
                    .map(|h| HypothesisRecord {
                        tokens: h.tokens.clone(),
                        log_prob: h.log_prob.is_finite().then_some(h.log_prob),
                        normalized_prob: h.normalized_prob,
                    })
                    .collect(),
            })
            .collect(),
    };
    let nbest_path = dir.join("nbest.json");
    crate::write_json(&nbest_path, &nbest)?;
    let acc_path = dir.join("accounting.json");
    crate::write_json(
        &acc_path,
        &Accounting {
            spent: labels.spent.into(),
            report: labels.report.clone(),
        },
    )?;
    Ok(vec![path, nbest_path, acc_path])
}

pub fn read_label_set(dir: &Path) -> Result<StudentLabelSet> {
    let path = dir.join("nbest.json");
    let nbest: NbestFile = crate::read_json(&path)?;
    if nbest.format_version != LABELS_FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported label format version {}", nbest.format_version),
        ));
    }
    let acc: Accounting = crate::read_json(&dir.join("accounting.json"))?;

    let path = dir.join("labels.csv");
    let mut frames: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::format(&path, e))?;
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(&path, e))?;
        let parse = |i: usize| {
            rec.get(i)
                .ok_or_else(|| Error::format(&path, "short row"))?
                .parse::<usize>()
                .map_err(|e| Error::format(&path, e))
        };
        let (id, t, label) = (parse(0)?, parse(1)?, parse(2)?);
        let f = frames.entry(id).or_default();
        if f.len() != t {
            return Err(Error::format(
                &path,
                format!("utterance {id}: frame {t} out of order"),
            ));
        }
        f.push(label);
    }
    if frames.len() != nbest.entries.len() {
        return Err(Error::format(
            &path,
            format!(
                "{} labeled utterances, nbest.json has {}",
                frames.len(),
                nbest.entries.len()
            ),
        ));
    }
    let entries = nbest
        .entries
        .into_iter()
        .map(|e| {
            let frame_labels = frames.remove(&e.utterance_id).ok_or_else(|| {
                Error::format(
                    &path,
                    format!("no frame labels for utterance {}", e.utterance_id),
                )
            })?;
            let nbest = e
                .nbest
                .into_iter()
                .map(|h| Hypothesis {
                    tokens: h.tokens,
                    log_prob: h.log_prob.unwrap_or(f64::NEG_INFINITY),
                    normalized_prob: h.normalized_prob,
                })
                .collect();
            Ok(LabeledUtterance {
                utterance_id: e.utterance_id,
                frame_labels,
                nbest,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StudentLabelSet {
        entries,
        rule: nbest.rule,
        blank: nbest.blank,
        spent: acc.spent.into(),
        report: acc.report,
    })
}
