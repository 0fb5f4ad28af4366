//! How the decoder splits cross-attention between visual and textual
//! encoder rows, and how good the single nearest retrieved caption is.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::AttentionRecord;
use crate::error::{Error, Result};
use crate::metrics::CiderD;
use crate::retrieval::{retrieve_context, QueryImage, RetrievalConfig, RetrievalMode, RetrievalStores};

/// Attention mass of one decoder layer; `textual` is `1 − visual`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerMass {
    pub visual: f64,
    pub textual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub layers: Vec<LayerMass>,
    pub captions: usize,
}

fn check_record(r: &AttentionRecord, visual_len: usize, text_len: usize, layers: usize) -> Result<()> {
    if r.visual_len != visual_len || r.text_len != text_len {
        return Err(Error::shape(format!(
            "record for {} has {}+{} positions, expected {visual_len}+{text_len}",
            r.image_id, r.visual_len, r.text_len
        )));
    }
    if r.weights.len() != layers {
        return Err(Error::shape(format!(
            "record for {} has {} layers, expected {layers}",
            r.image_id,
            r.weights.len()
        )));
    }
    for heads in &r.weights {
        if heads.is_empty() {
            return Err(Error::shape("layer without heads"));
        }
        for steps in heads {
            if steps.is_empty() {
                return Err(Error::shape(format!("record for {} has no steps", r.image_id)));
            }
            if steps.iter().any(|a| a.len() != visual_len + text_len) {
                return Err(Error::shape(format!(
                    "attention vector length differs from {}",
                    visual_len + text_len
                )));
            }
        }
    }
    Ok(())
}

/// Per layer: mean over heads of the mean over steps of the weight on the
/// first `visual_len` positions, then a uniform mean over captions.
pub fn attention_mass(records: &[AttentionRecord], visual_len: usize, text_len: usize) -> Result<AttentionSummary> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidInput("no attention records".into()))?;
    let layers = first.weights.len();
    let mut visual = vec![0.0; layers];
    for r in records {
        check_record(r, visual_len, text_len, layers)?;
        for (l, heads) in r.weights.iter().enumerate() {
            let mut per_head = 0.0;
            for steps in heads {
                let mass: f64 = steps.iter().map(|a| a[..visual_len].iter().sum::<f64>()).sum();
                per_head += mass / steps.len() as f64;
            }
            visual[l] += per_head / heads.len() as f64;
        }
    }
    let layers = visual
        .into_iter()
        .map(|v| {
            let visual = v / records.len() as f64;
            LayerMass {
                visual,
                textual: 1.0 - visual,
            }
        })
        .collect();
    Ok(AttentionSummary {
        layers,
        captions: records.len(),
    })
}

/// Textual mass summed directly over the textual positions, averaged like
/// [`attention_mass`]; agrees with the complement when every α sums to 1.
pub fn direct_textual_mass(records: &[AttentionRecord], visual_len: usize, text_len: usize) -> Result<Vec<f64>> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidInput("no attention records".into()))?;
    let layers = first.weights.len();
    let mut textual = vec![0.0; layers];
    for r in records {
        check_record(r, visual_len, text_len, layers)?;
        for (l, heads) in r.weights.iter().enumerate() {
            let mut per_head = 0.0;
            for steps in heads {
                let mass: f64 = steps.iter().map(|a| a[visual_len..].iter().sum::<f64>()).sum();
                per_head += mass / steps.len() as f64;
            }
            textual[l] += per_head / heads.len() as f64;
        }
    }
    Ok(textual.into_iter().map(|t| t / records.len() as f64).collect())
}

pub fn write_attention_records(path: &Path, records: &[AttentionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_attention_records(path: &Path) -> Result<Vec<AttentionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

impl AttentionSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,visual,textual,captions\n");
        for (i, m) in self.layers.iter().enumerate() {
            s.push_str(&format!("{},{},{},{}\n", i + 1, m.visual, m.textual, self.captions));
        }
        s
    }
}

pub const HISTOGRAM_BUCKETS: usize = 20;

/// CIDEr-D of the nearest retrieved caption per query, bucketed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub mode: RetrievalMode,
    /// `HISTOGRAM_BUCKETS + 1` uniform edges over `[0, 10]`.
    pub edges: Vec<f64>,
    /// Scores in `(0, 10]`; the top bucket is closed on the right.
    pub counts: Vec<usize>,
    /// Scores of exactly 0.
    pub zero_count: usize,
    pub total: usize,
    pub zero_fraction: f64,
    pub scores: Vec<f64>,
}

impl HistogramReport {
    pub fn from_scores(mode: RetrievalMode, scores: Vec<f64>) -> Self {
        let width = 10.0 / HISTOGRAM_BUCKETS as f64;
        let edges = (0..=HISTOGRAM_BUCKETS).map(|i| i as f64 * width).collect();
        let mut counts = vec![0; HISTOGRAM_BUCKETS];
        let mut zero_count = 0;
        for &s in &scores {
            if s == 0.0 {
                zero_count += 1;
            } else {
                let b = ((s / width).floor() as usize).min(HISTOGRAM_BUCKETS - 1);
                counts[b] += 1;
            }
        }
        let total = scores.len();
        Self {
            mode,
            edges,
            counts,
            zero_count,
            total,
            zero_fraction: if total == 0 { 0.0 } else { zero_count as f64 / total as f64 },
            scores,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,lower,upper,count\n");
        let mode = match self.mode {
            RetrievalMode::ImageText => "image_text",
            RetrievalMode::ImageImage => "image_image",
        };
        s.push_str(&format!("{mode},0,0,{}\n", self.zero_count));
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{mode},{},{},{c}\n", self.edges[i], self.edges[i + 1]));
        }
        s
    }
}

/// Retrieves the single nearest caption for each query and scores it with
/// per-image CIDEr-D against that query's references (idf over all
/// queries' references).
pub fn retrieval_quality_histogram(
    queries: &[QueryImage<'_>],
    stores: &RetrievalStores,
    config: &RetrievalConfig,
    references: &[Vec<String>],
) -> Result<HistogramReport> {
    if queries.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} queries with {} reference lists",
            queries.len(),
            references.len()
        )));
    }
    let store_empty = match config.mode {
        RetrievalMode::ImageText => stores.captions.is_empty(),
        RetrievalMode::ImageImage => stores.images.as_ref().is_none_or(|s| s.is_empty()),
    };
    if store_empty {
        return Err(Error::InvalidInput("datastore is empty".into()));
    }
    let scorer = CiderD::new(references)?;
    let cfg = RetrievalConfig {
        k: 1,
        ..config.clone()
    };
    let mut scores = Vec::with_capacity(queries.len());
    for (q, refs) in queries.iter().zip(references) {
        let ctx = retrieve_context(q, stores, &cfg)?;
        let caption = ctx.captions.first().ok_or_else(|| {
            Error::InvalidInput(format!("no caption retrievable for image {}", q.image_id))
        })?;
        scores.push(scorer.score_or_zero(caption, refs)?);
    }
    Ok(HistogramReport::from_scores(config.mode, scores))
}
