//! Head file format.
//!
//! ```text
//! <header JSON object>\n
//! repeated for each tensor in declaration order:
//!     rows: u64 LE | cols: u64 LE | rows·cols × f64 LE (row-major)
//! ```
//!
//! The header carries `format`, `version`, the full `config`, its
//! `config_hash`, the init `seed`, the tensor manifest and free-form
//! `metadata`. Floats are stored as raw bits, so round trips are exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::HeadConfig;
use super::params::{build_head, HeadParams};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};

pub const HEAD_FORMAT: &str = "latelab-head";
pub const HEAD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: HeadConfig,
    config_hash: String,
    seed: u64,
    tensors: Vec<TensorEntry>,
    metadata: BTreeMap<String, String>,
}

pub fn serialize_head(params: &HeadParams) -> Vec<u8> {
    let tensors = params.tensors();
    let header = Header {
        format: HEAD_FORMAT.to_string(),
        version: HEAD_FORMAT_VERSION,
        config: params.config.clone(),
        config_hash: params.config.config_hash(),
        seed: params.seed,
        tensors: tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                rows: t.value.rows(),
                cols: t.value.cols(),
            })
            .collect(),
        metadata: params.metadata.clone(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for t in &tensors {
        out.extend_from_slice(&(t.value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.value.cols() as u64).to_le_bytes());
        for v in t.value.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated payload while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a head file. With `expected`, the stored config must hash identically.
pub fn deserialize_head(bytes: &[u8], expected: Option<&HeadConfig>) -> Result<HeadParams> {
    let header_end = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format {
        offset: bytes.len(),
        message: "missing header terminator".into(),
    })?;
    let header: Header = serde_json::from_slice(&bytes[..header_end]).map_err(|e| Error::Format {
        offset: e.column().saturating_sub(1),
        message: format!("bad header: {e}"),
    })?;
    if header.format != HEAD_FORMAT || header.version != HEAD_FORMAT_VERSION {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "unsupported format {} v{} (expected {HEAD_FORMAT} v{HEAD_FORMAT_VERSION})",
                header.format, header.version
            ),
        });
    }
    let stored_hash = header.config.config_hash();
    if stored_hash != header.config_hash {
        return Err(Error::Format {
            offset: 0,
            message: "config_hash does not match the embedded config".into(),
        });
    }
    if let Some(exp) = expected {
        let want = exp.config_hash();
        if want != stored_hash {
            return Err(Error::ConfigMismatch {
                expected: want,
                found: stored_hash,
            });
        }
    }

    let mut params = build_head(&header.config, header.seed).map_err(|e| Error::Format {
        offset: 0,
        message: format!("invalid embedded config: {e}"),
    })?;
    params.metadata = header.metadata;

    let mut reader = Reader {
        bytes,
        pos: header_end + 1,
    };
    let names: Vec<String> = params.tensors().into_iter().map(|t| t.name).collect();
    if names.len() != header.tensors.len() {
        return Err(Error::Format {
            offset: 0,
            message: format!("header lists {} tensors, config implies {}", header.tensors.len(), names.len()),
        });
    }
    for ((_, slot), name) in params.tensors_mut().into_iter().zip(&names) {
        let at = reader.pos;
        let rows = reader.u64(name)? as usize;
        let cols = reader.u64(name)? as usize;
        if (rows, cols) != slot.shape() {
            return Err(Error::Format {
                offset: at,
                message: format!("tensor {name} has shape {rows}x{cols}, expected {:?}", slot.shape()),
            });
        }
        let raw = reader.take(rows * cols * 8, name)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *slot = Matrix::from_vec(rows, cols, values).map_err(|e| Error::Format {
            offset: at,
            message: format!("tensor {name}: {e}"),
        })?;
    }
    if reader.pos != bytes.len() {
        return Err(Error::Format {
            offset: reader.pos,
            message: format!("{} trailing bytes", bytes.len() - reader.pos),
        });
    }
    Ok(params)
}

pub fn write_head(path: &Path, params: &HeadParams) -> Result<()> {
    std::fs::write(path, serialize_head(params)).map_err(|e| Error::io(path, e))
}

pub fn read_head(path: &Path, expected: Option<&HeadConfig>) -> Result<HeadParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_head(&bytes, expected)
}
