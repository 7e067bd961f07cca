//! Parameter checkpoint files.
//!
//! Layout: the magic line `NETFX-CKPT\n`, one line of JSON header, then the
//! concatenated parameter blocks as little-endian `f64`. The header records
//! every block's name and shape, the payload length and its SHA-256, plus
//! free-form metadata supplied by the caller.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::params::ParamSet;

const MAGIC: &str = "NETFX-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint ({detail})")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: payload checksum mismatch (file is corrupt)")]
    Checksum { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub group: String,
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub blocks: Vec<BlockHeader>,
    pub payload_bytes: usize,
    pub payload_sha256: String,
    pub meta: serde_json::Value,
}

/// Serializes groups of parameter sets into checkpoint bytes.
pub fn encode(meta: &serde_json::Value, groups: &[(&str, &ParamSet)]) -> Vec<u8> {
    let mut blocks = Vec::new();
    let mut payload = Vec::new();
    for (group, set) in groups {
        for p in set.iter() {
            blocks.push(BlockHeader {
                group: group.to_string(),
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
            });
            for v in p.value.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        blocks,
        payload_bytes: payload.len(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        meta: meta.clone(),
    };
    let mut out = Vec::with_capacity(payload.len() + 1024);
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(serde_json::to_string(&header).expect("header").as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

pub fn write(
    path: &Path,
    meta: &serde_json::Value,
    groups: &[(&str, &ParamSet)],
) -> Result<(), CheckpointError> {
    let bytes = encode(meta, groups);
    let mut f = std::fs::File::create(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(&bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// A decoded checkpoint: header plus one `ParamSet` per group, in order.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub header: Header,
    pub groups: Vec<(String, ParamSet)>,
}

impl Decoded {
    pub fn group(&self, name: &str) -> Option<&ParamSet> {
        self.groups.iter().find(|(g, _)| g == name).map(|(_, s)| s)
    }
}

pub fn read(path: &Path) -> Result<Decoded, CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let format = |detail: &str| CheckpointError::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let f = std::fs::File::open(path).map_err(io)?;
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(io)?;
    if line.trim_end() != MAGIC {
        return Err(format("missing magic line"));
    }
    line.clear();
    reader.read_line(&mut line).map_err(io)?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| format(&e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            found: header.version,
        });
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(io)?;
    if payload.len() != header.payload_bytes
        || hex::encode(Sha256::digest(&payload)) != header.payload_sha256
    {
        return Err(CheckpointError::Checksum {
            path: path.to_path_buf(),
        });
    }
    let expected: usize = header.blocks.iter().map(|b| b.shape[0] * b.shape[1] * 8).sum();
    if expected != payload.len() {
        return Err(format("block shapes disagree with payload length"));
    }
    let mut groups: Vec<(String, ParamSet)> = Vec::new();
    let mut offset = 0;
    for b in &header.blocks {
        let len = b.shape[0] * b.shape[1];
        let values: Vec<f64> = payload[offset..offset + len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += len * 8;
        let m = Array2::from_shape_vec((b.shape[0], b.shape[1]), values)
            .map_err(|e| format(&e.to_string()))?;
        match groups.last_mut() {
            Some((g, set)) if *g == b.group => {
                set.add(b.name.clone(), m);
            }
            _ => {
                let mut set = ParamSet::new();
                set.add(b.name.clone(), m);
                groups.push((b.group.clone(), set));
            }
        }
    }
    Ok(Decoded { header, groups })
}
