//! From a loaded dataset to stores, prepared examples, trained models and
//! evaluations under a given context condition.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, ImageData};
use crate::datastore::{DatastoreEntry, Metric, VectorIndex};
use crate::encoder::RegionFeatures;
use crate::error::{Error, Result};
use crate::model::{CaptionModel, ModelConfig};
use crate::retrieval::{
    make_variant_context, pool_regions, retrieve_context, ContextVariant, QueryImage, RetrievalConfig, RetrievalMode,
    RetrievalStores, RetrievedContext,
};
use crate::training::{evaluate, train_xe, Checkpoint, Evaluation, Example, TrainConfig, TrainOutcome};
use crate::text::{encode_context, Vocabulary};

/// How the textual context is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VariantKind {
    Retrieved,
    Empty,
    Random,
    /// The last `replace_count` retrieved captions become references.
    Oracle { replace_count: usize },
}

/// Everything that determines the encoder inputs of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextCondition {
    pub mode: RetrievalMode,
    pub k: usize,
    pub variant: VariantKind,
    #[serde(default)]
    pub blacked_out: bool,
}

impl ContextCondition {
    pub fn retrieved(k: usize) -> Self {
        Self {
            mode: RetrievalMode::ImageText,
            k,
            variant: VariantKind::Retrieved,
            blacked_out: false,
        }
    }

    pub fn with_variant(self, variant: VariantKind) -> Self {
        Self { variant, ..self }
    }

    pub fn blacked(self) -> Self {
        Self {
            blacked_out: true,
            ..self
        }
    }

    pub fn with_mode(self, mode: RetrievalMode) -> Self {
        Self { mode, ..self }
    }

    pub fn with_k(self, k: usize) -> Self {
        Self { k, ..self }
    }
}

impl fmt::Display for ContextCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            RetrievalMode::ImageText => "image_text",
            RetrievalMode::ImageImage => "image_image",
        };
        match self.variant {
            VariantKind::Retrieved => write!(f, "{mode}/k={}", self.k)?,
            VariantKind::Empty => write!(f, "empty")?,
            VariantKind::Random => write!(f, "random/k={}", self.k)?,
            VariantKind::Oracle { replace_count } => write!(f, "{mode}/k={}/oracle={replace_count}", self.k)?,
        }
        if self.blacked_out {
            write!(f, "/blacked_out")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub max_context_len: usize,
    /// Distinct random contexts per image, cycled over epochs.
    pub random_contexts: usize,
    pub exclude_self: bool,
    pub beam_width: usize,
    /// Drop context padding before encoding (same outputs, less work).
    pub trim_padding: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_context_len: 64,
            random_contexts: 8,
            exclude_self: true,
            beam_width: crate::decoder::DEFAULT_BEAM_WIDTH,
            trim_padding: true,
        }
    }
}

/// Caption store (cosine, over caption embeddings) and image store
/// (Euclidean, over pooled region features) for `images`.
pub fn build_stores(images: &[ImageData]) -> Result<RetrievalStores> {
    build_stores_with(images, Metric::Cosine, Metric::Euclidean)
}

pub fn build_stores_with(images: &[ImageData], caption_metric: Metric, image_metric: Metric) -> Result<RetrievalStores> {
    let mut caption_entries = Vec::new();
    let mut image_entries = Vec::with_capacity(images.len());
    for img in images {
        let emb = img.caption_embeddings.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!(
                "image {} has no caption embeddings; image–text retrieval needs them",
                img.image_id
            ))
        })?;
        for (c, caption) in img.captions.iter().enumerate() {
            caption_entries.push(DatastoreEntry {
                entry_id: caption_entries.len() as u64,
                image_id: img.image_id.clone(),
                caption_text: caption.clone(),
                vector: emb.row(c).to_vec(),
            });
        }
        image_entries.push(DatastoreEntry {
            entry_id: image_entries.len() as u64,
            image_id: img.image_id.clone(),
            caption_text: String::new(),
            vector: pool_regions(&img.regions)?,
        });
    }
    let captions = if caption_entries.is_empty() {
        VectorIndex::empty(caption_metric, 0)
    } else {
        VectorIndex::build(caption_entries, caption_metric)?
    };
    let images = if image_entries.is_empty() {
        VectorIndex::empty(image_metric, 0)
    } else {
        VectorIndex::build(image_entries, image_metric)?
    };
    Ok(RetrievalStores::new(captions, Some(images)))
}

/// Saves `stores` as `captions.xtds` and `images.xtds` in `dir`.
pub fn save_stores(stores: &RetrievalStores, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    stores.captions.save(&dir.join("captions.xtds"))?;
    if let Some(images) = &stores.images {
        images.save(&dir.join("images.xtds"))?;
    }
    Ok(())
}

pub fn load_stores(dir: &Path) -> Result<RetrievalStores> {
    let captions = VectorIndex::load(&dir.join("captions.xtds"))?;
    let image_path = dir.join("images.xtds");
    let images = if image_path.exists() {
        Some(VectorIndex::load(&image_path)?)
    } else {
        None
    };
    Ok(RetrievalStores::new(captions, images))
}

/// Vocabulary over the training captions.
pub fn build_vocabulary(dataset: &Dataset, min_frequency: usize) -> Result<Vocabulary> {
    let corpus: Vec<&str> = dataset
        .train
        .iter()
        .flat_map(|img| img.captions.iter().map(String::as_str))
        .collect();
    Vocabulary::build(&corpus, min_frequency)
}

/// Model shape for `dataset` and `vocab` at toy scale.
pub fn toy_model_config(dataset: &Dataset, vocab: &Vocabulary, pipeline: &PipelineConfig) -> ModelConfig {
    let mut cfg = ModelConfig::toy(vocab.len(), dataset.region_dim());
    cfg.encoder.max_text_len = pipeline.max_context_len;
    cfg
}

fn context_for(
    img: &ImageData,
    index: usize,
    stores: &RetrievalStores,
    condition: &ContextCondition,
    pipeline: &PipelineConfig,
    seed: u64,
) -> Result<Vec<RetrievedContext>> {
    let retrieval = RetrievalConfig {
        mode: condition.mode,
        k: condition.k,
        metric: None,
        exclude_self: pipeline.exclude_self,
        seed,
    };
    let query = QueryImage {
        image_id: &img.image_id,
        embedding: Some(&img.embedding),
        regions: Some(&img.regions),
    };
    let base = || retrieve_context(&query, stores, &retrieval);
    Ok(match condition.variant {
        VariantKind::Retrieved => vec![base()?],
        VariantKind::Empty => vec![make_variant_context(&RetrievedContext::empty(), ContextVariant::Empty)?],
        VariantKind::Random => (0..pipeline.random_contexts.max(1))
            .map(|e| {
                let s = seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add((index as u64) << 16)
                    .wrapping_add(e as u64);
                make_variant_context(
                    &RetrievedContext::empty(),
                    ContextVariant::Random {
                        pool: &stores.captions,
                        k: condition.k,
                        seed: s,
                    },
                )
            })
            .collect::<Result<_>>()?,
        VariantKind::Oracle { replace_count } => {
            if img.captions.len() < replace_count {
                return Err(Error::InvalidInput(format!(
                    "oracle needs {replace_count} references but image {} has {}",
                    img.image_id,
                    img.captions.len()
                )));
            }
            vec![make_variant_context(
                &base()?,
                ContextVariant::Oracle {
                    references: &img.captions,
                    replace_count,
                },
            )?]
        }
    })
}

/// Encoder inputs and references for every image under `condition`.
pub fn prepare_examples(
    images: &[ImageData],
    stores: &RetrievalStores,
    vocab: &Vocabulary,
    condition: &ContextCondition,
    pipeline: &PipelineConfig,
    seed: u64,
) -> Result<Vec<Example>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let contexts = context_for(img, i, stores, condition, pipeline, seed)?
                .iter()
                .map(|ctx| {
                    let mut tc = encode_context(&ctx.captions, vocab, pipeline.max_context_len)?;
                    if pipeline.trim_padding {
                        tc.ids.truncate(tc.len());
                    }
                    Ok(tc)
                })
                .collect::<Result<Vec<_>>>()?;
            let regions = RegionFeatures::new(img.regions.clone())?;
            Ok(Example {
                image_id: img.image_id.clone(),
                regions: if condition.blacked_out {
                    regions.blacked_out()
                } else {
                    regions
                },
                contexts,
                references: img.captions.clone(),
            })
        })
        .collect()
}

/// Trains a fresh model (initialized from `train.seed`) under `condition`,
/// retrieving from `stores` for both splits.
pub fn train_condition(
    dataset: &Dataset,
    stores: &RetrievalStores,
    vocab: &Vocabulary,
    condition: &ContextCondition,
    model_config: &ModelConfig,
    train: &TrainConfig,
    pipeline: &PipelineConfig,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    let train_ex = prepare_examples(&dataset.train, stores, vocab, condition, pipeline, train.seed)?;
    let val_ex = prepare_examples(&dataset.val, stores, vocab, condition, pipeline, train.seed ^ 0x5eed)?;
    let model = CaptionModel::new(model_config.clone(), train.seed)?;
    train_xe(model, vocab, &train_ex, &val_ex, train, log_path)
}

/// Beam-search evaluation of `checkpoint` on `images` under `condition`.
pub fn evaluate_condition(
    checkpoint: &Checkpoint,
    images: &[ImageData],
    stores: &RetrievalStores,
    condition: &ContextCondition,
    pipeline: &PipelineConfig,
    seed: u64,
) -> Result<Evaluation> {
    let examples = prepare_examples(images, stores, &checkpoint.vocab, condition, pipeline, seed)?;
    evaluate(&checkpoint.model, &checkpoint.vocab, &examples, pipeline.beam_width)
}
