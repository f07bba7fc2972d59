//! Run manifests and regeneration checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::labels::Budget;
use crate::stages::Stage;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub stage: Stage,
    pub config: Config,
    pub config_hash: String,
    pub seed: u64,
    /// Files read, by the path they were read from.
    pub inputs: Vec<FileHash>,
    /// Files written, relative to the run directory.
    pub outputs: Vec<FileHash>,
    /// Privacy spent by the released artifacts; absent for stages that release nothing.
    pub spent: Option<Budget>,
    pub metrics: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let m: Manifest = crate::read_json(&run_dir.join(MANIFEST_FILE))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                run_dir.join(MANIFEST_FILE),
                format!("unsupported manifest version {}", m.format_version),
            ));
        }
        Ok(m)
    }
}

pub fn hash_files(root: &Path, files: &[PathBuf]) -> Result<Vec<FileHash>> {
    files
        .iter()
        .map(|f| {
            let rel = f.strip_prefix(root).unwrap_or(f).to_path_buf();
            Ok(FileHash {
                path: rel,
                sha256: crate::sha256_file(f)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checked: usize,
    pub mismatched: Vec<PathBuf>,
}

/// Re-execute the run recorded in `run_dir` into `scratch` and compare every
/// output hash. Inputs must still hash as recorded.
pub fn verify(run_dir: &Path, scratch: &Path) -> Result<VerifyReport> {
    let m = Manifest::read(run_dir)?;
    for input in &m.inputs {
        if crate::sha256_file(&input.path)? != input.sha256 {
            return Err(Error::Mismatch(format!(
                "input {} changed since the run",
                input.path.display()
            )));
        }
    }
    if m.config.hash() != m.config_hash {
        return Err(Error::Mismatch(
            "config does not match its recorded hash".into(),
        ));
    }
    let again = crate::stages::run(&m.stage, &m.config, scratch)?;
    let fresh: BTreeMap<&PathBuf, &String> =
        again.outputs.iter().map(|f| (&f.path, &f.sha256)).collect();
    let mismatched = m
        .outputs
        .iter()
        .filter(|f| {
            fresh.get(&f.path) != Some(&&f.sha256)
                || crate::sha256_file(&run_dir.join(&f.path)).ok().as_ref() != Some(&f.sha256)
        })
        .map(|f| f.path.clone())
        .collect();
    Ok(VerifyReport {
        checked: m.outputs.len(),
        mismatched,
    })
}
