//! File formats, experiment pipelines and the `dpseq` command line on top of
//! [`dpseq_core`].
//!
//! Every stage writes its outputs plus a `manifest.json` into a run directory;
//! [`manifest::verify`] re-executes a stage from its manifest and checks that
//! every output is reproduced byte for byte. Schemas are described in
//! `docs/formats.md`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub mod checkpoint;
pub mod config;
pub mod corpus_io;
mod error;
pub mod labels;
pub mod manifest;
pub mod pipeline;
pub mod stages;
pub mod sweep;
pub mod table;

pub use config::Config;
pub use error::{Error, Result};

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(Error::io(path))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
