//! Single-file checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset      | size | content                                         |
//! |-------------|------|-------------------------------------------------|
//! | 0           | 8    | magic `PDCKPT\0\0`                              |
//! | 8           | 4    | format version (`u32`, currently 1)             |
//! | 12          | 8    | header length `H` (`u64`)                       |
//! | 20          | H    | UTF-8 JSON header, see [`Header`]               |
//! | 20+H        | 8·Σ  | tensor data, `f64` row-major, in header order   |
//! | end-32      | 32   | SHA-256 of every preceding byte                 |
//!
//! The header carries the model kind, its config, the vocabulary (tokens and
//! hash) and a tensor index of `{name, rows, cols}` entries.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Matrix, ParamStore};
use crate::corpus::Vocab;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PDCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab_hash: String,
    pub vocab_min_freq: usize,
    pub vocab: Vec<String>,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to rebuild a model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab: Vocab,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            vocab_hash: self.vocab.hash(),
            vocab_min_freq: self.vocab.min_freq(),
            vocab: self.vocab.tokens().to_vec(),
            meta: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, name, m)| TensorEntry {
                    name: name.to_string(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(header.len() + 8 * self.params.num_scalars() + 64);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (_, _, m) in self.params.iter() {
            for v in m.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic or too short)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body_end = bytes.len() - 32;
        if 20 + header_len > body_end {
            return Err(corrupt(format!(
                "version {version} file truncated: header claims {header_len} bytes"
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[20..20 + header_len])
            .map_err(|e| corrupt(format!("version {version} header unreadable: {e}")))?;
        let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
        let data = &bytes[20 + header_len..body_end];
        if data.len() != expected {
            return Err(corrupt(format!(
                "version {version} file truncated or padded: {} tensor bytes, header expects {expected}",
                data.len()
            )));
        }
        let digest = Sha256::digest(&bytes[..body_end]);
        if digest.as_slice() != &bytes[body_end..] {
            return Err(corrupt(format!("version {version} checksum mismatch")));
        }

        let vocab = Vocab::from_tokens(header.vocab, header.vocab_min_freq)?;
        if vocab.hash() != header.vocab_hash {
            return Err(corrupt("vocabulary does not match its recorded hash".into()));
        }
        let mut params = ParamStore::new();
        let mut at = 0;
        for t in header.tensors {
            let n = t.rows * t.cols;
            let values: Vec<f64> = data[at..at + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            at += 8 * n;
            let m = Matrix::from_shape_vec((t.rows, t.cols), values).expect("sizes checked");
            if params.id(&t.name).is_some() {
                return Err(corrupt(format!("duplicate tensor '{}'", t.name)));
            }
            params.add(t.name, m);
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            vocab,
            meta: header.meta,
            params,
        })
    }

    /// Writes via a temporary sibling file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint; with `expected_vocab` the vocabulary hash must match.
    pub fn load(path: &Path, expected_vocab: Option<&str>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::from_bytes(&bytes)?;
        if let Some(expected) = expected_vocab {
            let found = ckpt.vocab.hash();
            if found != expected {
                return Err(Error::VocabMismatch {
                    expected: expected.to_string(),
                    found,
                });
            }
        }
        Ok(ckpt)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a '{kind}' checkpoint, found '{}'",
                self.kind
            )));
        }
        Ok(())
    }

    /// SHA-256 over the serialized bytes, for "unchanged" checks.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

/// Stable digest of parameter values.
pub fn params_fingerprint(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (_, name, m) in params.iter() {
        h.update(name.as_bytes());
        for v in m.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
