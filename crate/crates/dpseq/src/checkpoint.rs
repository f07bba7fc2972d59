//! Model checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset | size | field                                    |
//! |--------|------|------------------------------------------|
//! | 0      | 8    | magic `DPSEQCKP`                         |
//! | 8      | 4    | format version (u32, currently 1)        |
//! | 12     | 1    | arch tag (0 frame classifier, 1 CTC, 2 RNN-T) |
//! | 13     | 3    | reserved, zero                           |
//! | 16     | 8    | input dim (u64)                          |
//! | 24     | 8    | hidden dim (u64)                         |
//! | 32     | 8    | vocab size (u64)                         |
//! | 40     | 8    | seed (u64)                               |
//! | 48     | 8    | parameter count `n` (u64)                |
//! | 56     | 8·n  | parameters (f64)                         |

use std::path::Path;

use dpseq_core::seqmodel::{Arch, Dims, ModelParams};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DPSEQCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: usize = 56;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Seed of the run that produced the model.
    pub seed: u64,
}

pub fn encode(params: &ModelParams, seed: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * params.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&[params.arch.tag(), 0, 0, 0]);
    for v in [params.dims.input, params.dims.hidden, params.dims.vocab] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < HEADER {
        return Err(format!("{} bytes is shorter than the header", bytes.len()));
    }
    if &bytes[..8] != MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let arch =
        Arch::from_tag(bytes[12]).ok_or_else(|| format!("unknown arch tag {}", bytes[12]))?;
    if bytes[13..16] != [0, 0, 0] {
        return Err("reserved header bytes are not zero".into());
    }
    let dim =
        |o: usize| usize::try_from(u64_at(o)).map_err(|_| "dimension overflows usize".to_string());
    let dims = Dims {
        input: dim(16)?,
        hidden: dim(24)?,
        vocab: dim(32)?,
    };
    let seed = u64_at(40);
    let n = dim(48)?;
    if bytes.len() != HEADER + 8 * n {
        return Err(format!(
            "{} parameter bytes, header says {n} values",
            bytes.len() - HEADER
        ));
    }
    let values = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ModelParams::from_values(arch, dims, values).map_err(|e| e.to_string())?;
    Ok(Checkpoint { params, seed })
}

pub fn write(path: &Path, params: &ModelParams, seed: u64) -> Result<()> {
    std::fs::write(path, encode(params, seed)).map_err(Error::io(path))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}
