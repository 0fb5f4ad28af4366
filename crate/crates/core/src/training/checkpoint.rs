//! Single-file checkpoint: `"XTCK"`, u32 version, u64 header length, JSON
//! header, then every parameter tensor as little-endian f64 in header
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CaptionModel, ModelConfig};
use crate::tensor::{ParamGroup, ParameterSet, Tensor};
use crate::text::Vocabulary;

const MAGIC: &[u8; 4] = b"XTCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CaptionModel,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub best_val_bleu4: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_fingerprint: String,
    vocab: Vec<String>,
    epoch: usize,
    best_val_bleu4: Option<f64>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let ps = &self.model.params;
        let header = Header {
            config: self.model.config.clone(),
            vocab_fingerprint: self.vocab.fingerprint(),
            vocab: self.vocab.tokens().to_vec(),
            epoch: self.epoch,
            best_val_bleu4: self.best_val_bleu4,
            tensors: ps
                .ids()
                .map(|id| TensorEntry {
                    name: ps.name(id).to_string(),
                    group: ps.group(id),
                    shape: ps.value(id).shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + ps.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for id in ps.ids() {
            for v in ps.value(id).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corruption {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "not a checkpoint (bad magic)".into(),
            });
        }
        if bytes.len() < 16 {
            return Err(corrupt("truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported checkpoint version {version}"),
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| corrupt(format!("header: {e}")))?;
        let vocab = Vocabulary::from_tokens(header.vocab)?;
        if vocab.fingerprint() != header.vocab_fingerprint {
            return Err(corrupt("vocabulary fingerprint mismatch".into()));
        }
        let mut params = ParameterSet::new();
        let mut at = body;
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let end = at + n * 8;
            if end > bytes.len() {
                return Err(corrupt(format!("tensor {} truncated", t.name)));
            }
            let data = bytes[at..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(t.name, Tensor::new(t.shape, data)?, t.group)?;
            at = end;
        }
        if at != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - at)));
        }
        header.config.check()?;
        // The parameter layout must match what the config would create.
        let reference = CaptionModel::new(header.config.clone(), 0)?;
        let same_layout = reference.params.len() == params.len()
            && reference
                .params
                .ids()
                .zip(params.ids())
                .all(|(a, b)| reference.params.name(a) == params.name(b) && reference.params.value(a).shape() == params.value(b).shape());
        if !same_layout {
            return Err(corrupt("parameters do not match the stored configuration".into()));
        }
        Ok(Self {
            model: CaptionModel {
                config: header.config,
                params,
            },
            vocab,
            epoch: header.epoch,
            best_val_bleu4: header.best_val_bleu4,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:x}", Sha256::digest(self.to_bytes()?)))
    }
}
