//! Exact flat vector index: linear-scan top-k search under cosine similarity
//! or Euclidean distance, merging of stores, and a bit-exact binary format.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"XTDS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Inner product over unit-normalized vectors; higher is closer.
    Cosine,
    /// L2 distance; lower is closer.
    Euclidean,
}

impl Metric {
    fn code(self) -> u8 {
        match self {
            Metric::Cosine => 0,
            Metric::Euclidean => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Metric::Cosine),
            1 => Some(Metric::Euclidean),
            _ => None,
        }
    }

    /// Orders two scores so that the better one comes first.
    pub fn rank(self, a: f64, b: f64) -> Ordering {
        match self {
            Metric::Cosine => b.total_cmp(&a),
            Metric::Euclidean => a.total_cmp(&b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatastoreEntry {
    pub entry_id: u64,
    pub image_id: String,
    /// Empty for image entries.
    pub caption_text: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub entry_id: u64,
    pub image_id: String,
    pub caption_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub entry_id: u64,
    pub image_id: String,
    pub caption_text: String,
    /// Cosine similarity or Euclidean distance, depending on the metric.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    metric: Metric,
    dim: usize,
    vectors: Vec<f64>,
    meta: Vec<EntryMeta>,
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl VectorIndex {
    pub fn empty(metric: Metric, dim: usize) -> Self {
        Self {
            metric,
            dim,
            vectors: Vec::new(),
            meta: Vec::new(),
        }
    }

    /// Indexes `entries`. Under cosine the stored vectors are normalized
    /// copies; zero vectors are rejected.
    pub fn build(entries: Vec<DatastoreEntry>, metric: Metric) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::InvalidInput("cannot build an index from zero entries".into()));
        };
        let dim = first.vector.len();
        if dim == 0 {
            return Err(Error::shape("zero-dimensional vectors"));
        }
        let mut index = Self::empty(metric, dim);
        let mut seen = HashSet::with_capacity(entries.len());
        index.vectors.reserve(entries.len() * dim);
        for e in entries {
            if e.vector.len() != dim {
                return Err(Error::shape(format!(
                    "entry {} has dimension {}, index has {dim}",
                    e.entry_id,
                    e.vector.len()
                )));
            }
            if !seen.insert(e.entry_id) {
                return Err(Error::InvalidInput(format!("duplicate entry id {}", e.entry_id)));
            }
            if e.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("entry {} has a non-finite component", e.entry_id)));
            }
            match metric {
                Metric::Cosine => {
                    let norm = l2_norm(&e.vector);
                    if norm == 0.0 {
                        return Err(Error::InvalidInput(format!(
                            "entry {} is a zero vector; cosine similarity is undefined",
                            e.entry_id
                        )));
                    }
                    index.vectors.extend(e.vector.iter().map(|v| v / norm));
                }
                Metric::Euclidean => index.vectors.extend_from_slice(&e.vector),
            }
            index.meta.push(EntryMeta {
                entry_id: e.entry_id,
                image_id: e.image_id,
                caption_text: e.caption_text,
            });
        }
        Ok(index)
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn entries(&self) -> &[EntryMeta] {
        &self.meta
    }

    /// Stored (possibly normalized) vector at position `i`.
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    fn prepare_query(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::shape(format!(
                "query dimension {} != index dimension {}",
                query.len(),
                self.dim
            )));
        }
        match self.metric {
            Metric::Cosine => {
                let norm = l2_norm(query);
                if norm == 0.0 || !norm.is_finite() {
                    return Err(Error::InvalidInput("cosine query must be a finite non-zero vector".into()));
                }
                Ok(query.iter().map(|v| v / norm).collect())
            }
            Metric::Euclidean => Ok(query.to_vec()),
        }
    }

    fn score(&self, q: &[f64], i: usize) -> f64 {
        let v = self.vector(i);
        match self.metric {
            Metric::Cosine => q.iter().zip(v).map(|(a, b)| a * b).sum(),
            Metric::Euclidean => q.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        }
    }

    /// Exact top-`k` by linear scan. Ties go to the smaller entry id; entries
    /// whose image id equals `exclude_image_id` are skipped.
    pub fn search(&self, query: &[f64], k: usize, exclude_image_id: Option<&str>) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::InvalidInput("search k must be at least 1".into()));
        }
        let q = self.prepare_query(query)?;
        let mut scored: Vec<(f64, u64, usize)> = (0..self.len())
            .filter(|&i| exclude_image_id != Some(self.meta[i].image_id.as_str()))
            .map(|i| (self.score(&q, i), self.meta[i].entry_id, i))
            .collect();
        let metric = self.metric;
        let cmp = |a: &(f64, u64, usize), b: &(f64, u64, usize)| metric.rank(a.0, b.0).then(a.1.cmp(&b.1));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(score, entry_id, i)| SearchHit {
                entry_id,
                image_id: self.meta[i].image_id.clone(),
                caption_text: self.meta[i].caption_text.clone(),
                score,
            })
            .collect())
    }

    /// Concatenates two stores. Entry ids of `extra` are shifted past the
    /// largest id in `self` so they stay unique. An empty `extra` returns a
    /// copy of `self` whatever its dimension.
    pub fn merge(&self, extra: &VectorIndex) -> Result<VectorIndex> {
        if self.metric != extra.metric {
            return Err(Error::InvalidInput(format!(
                "cannot merge {:?} store into {:?} store",
                extra.metric, self.metric
            )));
        }
        if extra.is_empty() {
            return Ok(self.clone());
        }
        if self.is_empty() {
            return Ok(extra.clone());
        }
        if self.dim != extra.dim {
            return Err(Error::shape(format!(
                "cannot merge dimension {} store into dimension {}",
                extra.dim, self.dim
            )));
        }
        let offset = self.meta.iter().map(|m| m.entry_id + 1).max().unwrap_or(0);
        let mut out = self.clone();
        out.vectors.extend_from_slice(&extra.vectors);
        out.meta.extend(extra.meta.iter().map(|m| EntryMeta {
            entry_id: m.entry_id + offset,
            ..m.clone()
        }));
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.vectors.len() * 8 + 8 + meta.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.metric.code());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corruption {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let format = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 4 {
            return Err(corrupt("file shorter than its magic number"));
        }
        if &bytes[..4] != MAGIC {
            return Err(format(format!("bad magic {:?}", &bytes[..4])));
        }
        if bytes.len() < HEADER_LEN {
            return Err(corrupt("truncated header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(format(format!("unsupported version {version}")));
        }
        let metric = Metric::from_code(bytes[8]).ok_or_else(|| format(format!("unknown metric code {}", bytes[8])))?;
        let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[13..21].try_into().unwrap()) as usize;
        let n_values = count
            .checked_mul(dim)
            .ok_or_else(|| corrupt("entry count overflows"))?;
        let vec_end = n_values
            .checked_mul(8)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| corrupt("entry count overflows"))?;
        if bytes.len() < vec_end + 8 {
            return Err(corrupt("truncated vector block"));
        }
        let vectors: Vec<f64> = bytes[HEADER_LEN..vec_end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let meta_len = u64::from_le_bytes(bytes[vec_end..vec_end + 8].try_into().unwrap()) as usize;
        let meta_start = vec_end + 8;
        if bytes.len() != meta_start + meta_len {
            return Err(corrupt("metadata block length does not match file size"));
        }
        let meta: Vec<EntryMeta> =
            serde_json::from_slice(&bytes[meta_start..]).map_err(|e| corrupt(&format!("metadata: {e}")))?;
        if meta.len() != count {
            return Err(corrupt("metadata entry count differs from header"));
        }
        Ok(Self {
            metric,
            dim,
            vectors,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
