//! Dataset manifest schema and validated loading.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::read_feature_file;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One image entry. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub captions: Vec<String>,
    pub region_feature_file: String,
    pub retrieval_embedding_file: String,
    /// One row per caption, in caption order, in the retrieval space.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_embedding_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Regions per image.
    pub regions: usize,
    pub region_dim: usize,
    pub embedding_dim: usize,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[ImageRecord] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A loaded, cross-checked image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageData {
    pub image_id: String,
    pub captions: Vec<String>,
    /// `[N × d_v]`
    pub regions: Tensor,
    pub embedding: Vec<f64>,
    /// `[captions × embedding_dim]`, when provided.
    pub caption_embeddings: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub train: Vec<ImageData>,
    pub val: Vec<ImageData>,
    pub test: Vec<ImageData>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[ImageData] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn regions(&self) -> usize {
        self.manifest.regions
    }

    pub fn region_dim(&self) -> usize {
        self.manifest.region_dim
    }
}

fn load_matrix(
    root: &Path,
    rel: &str,
    rows: Option<usize>,
    cols: usize,
    what: &str,
    issues: &mut Vec<String>,
) -> Option<Tensor> {
    let path = root.join(rel);
    match read_feature_file(&path) {
        Ok(t) => {
            let (r, c) = (t.rows(), t.cols());
            if rows.is_some_and(|n| n != r) || c != cols {
                let want = rows.map_or("any".to_string(), |n| n.to_string());
                issues.push(format!(
                    "{}: {what} is {r}x{c}, expected {want}x{cols}",
                    path.display()
                ));
                None
            } else {
                Some(t)
            }
        }
        Err(e) => {
            issues.push(format!("{what}: {e}"));
            None
        }
    }
}

/// Loads every file referenced by the manifest at `path` and checks it.
/// All problems are reported together as `Error::Validation`.
pub fn ingest_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let root = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let mut issues = Vec::new();
    if manifest.regions == 0 || manifest.region_dim == 0 || manifest.embedding_dim == 0 {
        issues.push("manifest regions, region_dim and embedding_dim must be positive".to_string());
    }
    let mut seen = HashSet::new();
    let mut loaded: Vec<Vec<ImageData>> = Vec::new();
    for split in Split::ALL {
        let mut images = Vec::new();
        for rec in manifest.split(split) {
            if !seen.insert(rec.image_id.clone()) {
                issues.push(format!("duplicate image_id {} (in {split})", rec.image_id));
            }
            if rec.captions.is_empty() {
                issues.push(format!("image {} has no captions", rec.image_id));
            }
            if rec.captions.iter().any(|c| crate::text::tokenize(c).is_empty()) {
                issues.push(format!("image {} has an empty caption", rec.image_id));
            }
            let regions = load_matrix(
                &root,
                &rec.region_feature_file,
                Some(manifest.regions),
                manifest.region_dim,
                "region features",
                &mut issues,
            );
            let embedding = load_matrix(
                &root,
                &rec.retrieval_embedding_file,
                Some(1),
                manifest.embedding_dim,
                "retrieval embedding",
                &mut issues,
            );
            let caption_embeddings = rec.caption_embedding_file.as_ref().and_then(|f| {
                load_matrix(
                    &root,
                    f,
                    Some(rec.captions.len()),
                    manifest.embedding_dim,
                    "caption embeddings",
                    &mut issues,
                )
            });
            if let (Some(regions), Some(embedding)) = (regions, embedding) {
                images.push(ImageData {
                    image_id: rec.image_id.clone(),
                    captions: rec.captions.clone(),
                    regions,
                    embedding: embedding.into_data(),
                    caption_embeddings,
                });
            }
        }
        loaded.push(images);
    }
    if !issues.is_empty() {
        return Err(Error::Validation(issues));
    }
    let test = loaded.pop().expect("three splits");
    let val = loaded.pop().expect("three splits");
    let train = loaded.pop().expect("three splits");
    Ok(Dataset {
        manifest,
        root,
        train,
        val,
        test,
    })
}
