//! Corpus directory format.
//!
//! ```text
//! <dir>/manifest.json          {format_version, config, seed, utterances, class_means, speaker_offsets}
//! <dir>/labels.csv             utterance_id,speaker_id,tokens   (tokens space separated)
//! <dir>/features/utt_NNNNNN.csv  one row per frame, columns f0..f{F-1}
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading a
//! written corpus gives back bit-identical values.

use std::fs;
use std::path::{Path, PathBuf};

use dpseq_core::corpus::{Corpus, CorpusConfig, Utterance};
use dpseq_core::linalg::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    format_version: u32,
    config: CorpusConfig,
    seed: u64,
    utterances: usize,
    class_means: Vec<Vec<f64>>,
    speaker_offsets: Vec<Vec<f64>>,
}

pub fn feature_file(dir: &Path, id: usize) -> PathBuf {
    dir.join("features").join(format!("utt_{id:06}.csv"))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Write `corpus` into `dir`, returning every file written.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir.join("features")).map_err(Error::io(dir))?;
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        config: corpus.config.clone(),
        seed: corpus.config.seed,
        utterances: corpus.len(),
        class_means: rows(&corpus.class_means),
        speaker_offsets: rows(&corpus.speaker_offsets),
    };
    let mut written = Vec::new();
    let path = dir.join("manifest.json");
    crate::write_json(&path, &manifest)?;
    written.push(path);

    let path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e))?;
    w.write_record(["utterance_id", "speaker_id", "tokens"])
        .map_err(|e| Error::format(&path, e))?;
    for u in &corpus.utterances {
        let tokens: Vec<String> = u.tokens.iter().map(usize::to_string).collect();
        w.write_record([u.id.to_string(), u.speaker.to_string(), tokens.join(" ")])
            .map_err(|e| Error::format(&path, e))?;
    }
    w.flush().map_err(Error::io(&path))?;
    written.push(path);

    for u in &corpus.utterances {
        let path = feature_file(dir, u.id);
        write_features(&path, &u.features)?;
        written.push(path);
    }
    Ok(written)
}

/// One CSV row per frame, header `f0,f1,…`.
pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record((0..m.cols()).map(|d| format!("f{d}")))
        .map_err(|e| Error::format(path, e))?;
    for row in m.iter_rows() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))
            .map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let cols = r.headers().map_err(|e| Error::format(path, e))?.len();
    let mut data = Vec::new();
    let mut frames = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        if rec.len() != cols {
            return Err(Error::format(
                path,
                format!("row {frames} has {} columns, expected {cols}", rec.len()),
            ));
        }
        for field in &rec {
            data.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::format(path, format!("row {frames}: {e}")))?,
            );
        }
        frames += 1;
    }
    Ok(Matrix::from_vec(frames, cols, data)?)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("manifest.json");
    let m: CorpusManifest = crate::read_json(&path)?;
    if m.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported corpus format version {}", m.format_version),
        ));
    }
    let class_means = Matrix::from_rows(&m.class_means).map_err(|e| Error::format(&path, e))?;
    let speaker_offsets =
        Matrix::from_rows(&m.speaker_offsets).map_err(|e| Error::format(&path, e))?;

    let path = dir.join("labels.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::format(&path, e))?;
    let mut utterances = Vec::with_capacity(m.utterances);
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(&path, e))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::format(&path, "short row"));
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::format(&path, format!("`{s}`: {e}")))
        };
        let id = parse(field(0)?)?;
        let speaker = parse(field(1)?)?;
        let tokens = field(2)?
            .split_whitespace()
            .map(parse)
            .collect::<Result<Vec<_>>>()?;
        let features = read_features(&feature_file(dir, id))?;
        if features.cols() != m.config.feat_dim {
            return Err(Error::format(
                feature_file(dir, id),
                format!(
                    "{} columns, expected {}",
                    features.cols(),
                    m.config.feat_dim
                ),
            ));
        }
        utterances.push(Utterance {
            id,
            speaker,
            tokens,
            features,
        });
    }
    if utterances.len() != m.utterances {
        return Err(Error::format(
            &path,
            format!(
                "{} utterances, manifest says {}",
                utterances.len(),
                m.utterances
            ),
        ));
    }
    Ok(Corpus {
        config: m.config,
        class_means,
        speaker_offsets,
        utterances,
    })
}
