//! Binary checkpoint: magic, version, a JSON header describing the
//! configuration, vocabularies and tensor layout, then the tensor data as
//! little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, Parameters, TransducerModel};
use crate::corpus::{LanguageTable, Vocabulary};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RFXCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in values.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    input_vocab: Vocabulary,
    output_vocab: Vocabulary,
    languages: LanguageTable,
    tensors: Vec<TensorEntry>,
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8], CheckpointError> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(CheckpointError::Truncated {
        expected: at.saturating_add(n),
        found: bytes.len(),
    })?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

impl TransducerModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = Parameters::NAMES
            .iter()
            .zip(self.params.tensors())
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            input_vocab: self.input_vocab.clone(),
            output_vocab: self.output_vocab.clone(),
            languages: self.languages.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut at = 0;
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        at += MAGIC.len();
        let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes"));
        let header_len = usize::try_from(header_len).map_err(|_| CheckpointError::Corrupt("header length".into()))?;
        let header: Header = serde_json::from_slice(take(bytes, &mut at, header_len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let payload = &bytes[at..];

        let names: Vec<&str> = header.tensors.iter().map(|e| e.name.as_str()).collect();
        if names != Parameters::NAMES {
            return Err(CheckpointError::Corrupt(format!("unexpected tensor manifest {names:?}")));
        }
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() < total * 8 {
            return Err(CheckpointError::Truncated {
                expected: at + total * 8,
                found: bytes.len(),
            });
        }
        if payload.len() > total * 8 {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes after tensor data",
                payload.len() - total * 8
            )));
        }
        let mut model = TransducerModel::with_vocabularies(
            header.config,
            header.input_vocab,
            header.output_vocab,
            header.languages,
        )
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        for (entry, slot) in header.tensors.iter().zip(model.params.tensors_mut()) {
            if entry.shape != slot.shape() {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {} has shape {:?}, configuration implies {:?}",
                    entry.name,
                    entry.shape,
                    slot.shape()
                )));
            }
            let n = slot.numel();
            let raw = payload
                .get(entry.offset * 8..(entry.offset + n) * 8)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {} offset out of range", entry.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            *slot = Tensor::from_vec(data, &entry.shape).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
