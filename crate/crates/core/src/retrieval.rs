//! Turning a query image into an ordered list of context captions, plus the
//! ablation variants of that context (empty, random, oracle).

use std::collections::{BTreeMap, HashSet};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{Metric, VectorIndex};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// Image embedding against caption embeddings in a shared space.
    ImageText,
    /// Pooled region features against other images, one caption per neighbour.
    ImageImage,
}

impl RetrievalMode {
    pub fn default_metric(self) -> Metric {
        match self {
            RetrievalMode::ImageText => Metric::Cosine,
            RetrievalMode::ImageImage => Metric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub mode: RetrievalMode,
    pub k: usize,
    /// Overrides the mode's default metric when building stores.
    #[serde(default)]
    pub metric: Option<Metric>,
    #[serde(default = "default_true")]
    pub exclude_self: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            mode: RetrievalMode::ImageText,
            k: DEFAULT_K,
            metric: None,
            exclude_self: true,
            seed: 0,
        }
    }
}

impl RetrievalConfig {
    pub fn metric(&self) -> Metric {
        self.metric.unwrap_or_else(|| self.mode.default_metric())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Retrieved,
    Empty,
    Random,
    OracleMixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    /// Best-ranked first.
    pub captions: Vec<String>,
    /// Datastore entry behind each caption; `None` for injected references.
    pub source_entry_ids: Vec<Option<u64>>,
    /// Retrieval score per caption (`None` when not retrieved).
    pub scores: Vec<Option<f64>>,
    pub provenance: Provenance,
    /// Set when the store could not supply the requested captions.
    pub warning: Option<String>,
}

impl RetrievedContext {
    pub fn empty() -> Self {
        Self {
            captions: Vec::new(),
            source_entry_ids: Vec::new(),
            scores: Vec::new(),
            provenance: Provenance::Empty,
            warning: None,
        }
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

/// Column mean over region rows.
pub fn pool_regions(regions: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = regions.require_matrix("region features")?;
    if n == 0 {
        return Err(Error::InvalidInput("cannot pool an empty region set".into()));
    }
    let mut out = vec![0.0; d];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(regions.row(i)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    Ok(out)
}

/// What retrieval needs to know about a query image.
#[derive(Debug, Clone, Copy)]
pub struct QueryImage<'a> {
    pub image_id: &'a str,
    /// Shared-space embedding for image–text retrieval.
    pub embedding: Option<&'a [f64]>,
    /// Region features, pooled for image–image retrieval.
    pub regions: Option<&'a Tensor>,
}

/// Caption store, optional image store, and each image's captions in
/// caption order.
#[derive(Debug, Clone)]
pub struct RetrievalStores {
    pub captions: VectorIndex,
    pub images: Option<VectorIndex>,
    image_captions: BTreeMap<String, Vec<String>>,
}

impl RetrievalStores {
    pub fn new(captions: VectorIndex, images: Option<VectorIndex>) -> Self {
        let mut by_image: BTreeMap<String, Vec<(u64, String)>> = BTreeMap::new();
        for e in captions.entries() {
            by_image
                .entry(e.image_id.clone())
                .or_default()
                .push((e.entry_id, e.caption_text.clone()));
        }
        let image_captions = by_image
            .into_iter()
            .map(|(img, mut caps)| {
                caps.sort_by_key(|(id, _)| *id);
                (img, caps.into_iter().map(|(_, c)| c).collect())
            })
            .collect();
        Self {
            captions,
            images,
            image_captions,
        }
    }

    /// Captions of `image_id`, lowest caption index first.
    pub fn captions_of(&self, image_id: &str) -> &[String] {
        self.image_captions.get(image_id).map_or(&[], Vec::as_slice)
    }

    /// Hot-swap: augment both stores with an extra collection.
    pub fn merge(&self, extra: &RetrievalStores) -> Result<RetrievalStores> {
        let captions = self.captions.merge(&extra.captions)?;
        let images = match (&self.images, &extra.images) {
            (Some(a), Some(b)) => Some(a.merge(b)?),
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(b.clone()),
            (None, None) => None,
        };
        Ok(Self::new(captions, images))
    }
}

/// Retrieves `config.k` context captions for `query`, best first.
pub fn retrieve_context(query: &QueryImage<'_>, stores: &RetrievalStores, config: &RetrievalConfig) -> Result<RetrievedContext> {
    let mut ctx = RetrievedContext {
        provenance: Provenance::Retrieved,
        ..RetrievedContext::empty()
    };
    if config.k == 0 {
        return Ok(ctx);
    }
    let exclude = config.exclude_self.then_some(query.image_id);
    match config.mode {
        RetrievalMode::ImageText => {
            let embedding = query.embedding.ok_or_else(|| {
                Error::InvalidInput(format!("image {} has no retrieval embedding", query.image_id))
            })?;
            if stores.captions.is_empty() {
                ctx.warning = Some("caption store is empty".into());
                warn!("caption store is empty; image {} gets an empty context", query.image_id);
                return Ok(ctx);
            }
            for hit in stores.captions.search(embedding, config.k, exclude)? {
                ctx.captions.push(hit.caption_text);
                ctx.source_entry_ids.push(Some(hit.entry_id));
                ctx.scores.push(Some(hit.score));
            }
        }
        RetrievalMode::ImageImage => {
            let regions = query.regions.ok_or_else(|| {
                Error::InvalidInput(format!("image {} has no region features", query.image_id))
            })?;
            let images = match &stores.images {
                Some(images) if !images.is_empty() => images,
                _ => {
                    ctx.warning = Some("image store is empty".into());
                    warn!("image store is empty; image {} gets an empty context", query.image_id);
                    return Ok(ctx);
                }
            };
            let pooled = pool_regions(regions)?;
            let mut seen = HashSet::new();
            // Over-fetch so neighbours without captions can be skipped.
            for hit in images.search(&pooled, config.k * 2 + 1, exclude)? {
                if ctx.captions.len() == config.k {
                    break;
                }
                if !seen.insert(hit.image_id.clone()) {
                    continue;
                }
                if let Some(first) = stores.captions_of(&hit.image_id).first() {
                    ctx.captions.push(first.clone());
                    ctx.source_entry_ids.push(Some(hit.entry_id));
                    ctx.scores.push(Some(hit.score));
                }
            }
        }
    }
    if ctx.captions.len() < config.k {
        ctx.warning = Some(format!(
            "store supplied {} of {} requested captions",
            ctx.captions.len(),
            config.k
        ));
    }
    Ok(ctx)
}

/// Context ablations applied on top of a retrieved context.
#[derive(Debug, Clone, Copy)]
pub enum ContextVariant<'a> {
    /// No captions at all: the encoder sees `[CLS, SEP]`.
    Empty,
    /// `k` captions drawn uniformly (with replacement) from `pool`.
    Random { pool: &'a VectorIndex, k: usize, seed: u64 },
    /// The last `replace_count` retrieved captions are swapped for the first
    /// `replace_count` reference captions.
    Oracle { references: &'a [String], replace_count: usize },
}

pub fn make_variant_context(base: &RetrievedContext, variant: ContextVariant<'_>) -> Result<RetrievedContext> {
    match variant {
        ContextVariant::Empty => Ok(RetrievedContext::empty()),
        ContextVariant::Random { pool, k, seed } => {
            let mut ctx = RetrievedContext {
                provenance: Provenance::Random,
                ..RetrievedContext::empty()
            };
            if pool.is_empty() {
                ctx.warning = Some("random pool is empty".into());
                return Ok(ctx);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..k {
                let e = &pool.entries()[rng.random_range(0..pool.len())];
                ctx.captions.push(e.caption_text.clone());
                ctx.source_entry_ids.push(Some(e.entry_id));
                ctx.scores.push(None);
            }
            Ok(ctx)
        }
        ContextVariant::Oracle {
            references,
            replace_count,
        } => {
            if replace_count > base.len() {
                return Err(Error::InvalidInput(format!(
                    "oracle replace_count {replace_count} exceeds context of {} captions",
                    base.len()
                )));
            }
            if references.len() < replace_count {
                return Err(Error::InvalidInput(format!(
                    "oracle needs {replace_count} references, image has {}",
                    references.len()
                )));
            }
            let keep = base.len() - replace_count;
            let mut ctx = RetrievedContext {
                captions: base.captions[..keep].to_vec(),
                source_entry_ids: base.source_entry_ids[..keep].to_vec(),
                scores: base.scores[..keep].to_vec(),
                provenance: Provenance::OracleMixed,
                warning: base.warning.clone(),
            };
            for r in &references[..replace_count] {
                ctx.captions.push(r.clone());
                ctx.source_entry_ids.push(None);
                ctx.scores.push(None);
            }
            Ok(ctx)
        }
    }
}
