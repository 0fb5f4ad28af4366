//! Synthetic captioning data.
//!
//! A scene is 1..=`max_concepts` distinct (attribute, object) concepts plus
//! one setting. Each concept occupies one region whose latent vector is
//! `onehot(object) ++ onehot(attribute) ++ [0]` plus Gaussian noise; the
//! remaining regions are background (`[0 … 0, 1]` plus noise). Latents go
//! through one fixed random projection to `region_dim`. The setting has no
//! region; it appears only in captions and retrieval embeddings.
//!
//! Retrieval embeddings live in a shared space with one axis per concept
//! and one per setting. Images and captions both embed their bag of
//! concepts (and setting, at `setting_weight`), add noise, and normalize.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetManifest, ImageRecord, Splits};
use super::features::write_feature_file;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const OBJECTS: [&str; 12] = [
    "cube", "ball", "cone", "ring", "star", "disc", "cup", "vase", "lamp", "book", "shoe", "kite",
];
pub const ATTRIBUTES: [&str; 8] = ["red", "blue", "green", "yellow", "black", "white", "small", "large"];
pub const SETTINGS: [&str; 6] = [
    "on a table",
    "on the grass",
    "in the snow",
    "on a shelf",
    "by the window",
    "on the floor",
];
pub const TEMPLATES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub num_images: usize,
    pub regions: usize,
    pub region_dim: usize,
    pub num_objects: usize,
    pub num_attributes: usize,
    pub num_settings: usize,
    pub max_concepts: usize,
    pub captions_per_image: usize,
    pub region_noise: f64,
    pub embedding_noise: f64,
    pub setting_weight: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Image ids are `{id_prefix}{index:05}`.
    pub id_prefix: String,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_images: 100,
            regions: 8,
            region_dim: 32,
            num_objects: 8,
            num_attributes: 4,
            num_settings: 4,
            max_concepts: 3,
            captions_per_image: 3,
            region_noise: 0.1,
            embedding_noise: 0.05,
            setting_weight: 0.5,
            val_fraction: 0.1,
            test_fraction: 0.1,
            id_prefix: "img".into(),
        }
    }
}

impl ToyConfig {
    pub fn check(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.num_images < 10 {
            issues.push(format!("num_images {} < 10", self.num_images));
        }
        if self.num_objects == 0 || self.num_objects > OBJECTS.len() {
            issues.push(format!("num_objects must be in 1..={}", OBJECTS.len()));
        }
        if self.num_attributes == 0 || self.num_attributes > ATTRIBUTES.len() {
            issues.push(format!("num_attributes must be in 1..={}", ATTRIBUTES.len()));
        }
        if self.num_settings == 0 || self.num_settings > SETTINGS.len() {
            issues.push(format!("num_settings must be in 1..={}", SETTINGS.len()));
        }
        if self.max_concepts == 0 || self.max_concepts > self.num_objects {
            issues.push("max_concepts must be in 1..=num_objects".into());
        }
        if self.regions < self.max_concepts {
            issues.push("regions must be at least max_concepts".into());
        }
        if self.captions_per_image == 0 || self.captions_per_image > TEMPLATES {
            issues.push(format!("captions_per_image must be in 1..={TEMPLATES}"));
        }
        if self.region_dim == 0 {
            issues.push("region_dim must be positive".into());
        }
        for (name, v) in [
            ("region_noise", self.region_noise),
            ("embedding_noise", self.embedding_noise),
            ("setting_weight", self.setting_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                issues.push(format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&(self.val_fraction + self.test_fraction)) || self.val_fraction < 0.0 || self.test_fraction < 0.0 {
            issues.push("val_fraction + test_fraction must lie in [0, 1)".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn num_concepts(&self) -> usize {
        self.num_objects * self.num_attributes
    }

    pub fn embedding_dim(&self) -> usize {
        self.num_concepts() + self.num_settings
    }

    /// `(train, val, test)` sizes.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let val = (self.num_images as f64 * self.val_fraction).round() as usize;
        let test = (self.num_images as f64 * self.test_fraction).round() as usize;
        (self.num_images - val - test, val, test)
    }
}

/// `(object, attribute)` index pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Concept {
    pub object: usize,
    pub attribute: usize,
}

impl Concept {
    fn phrase(self) -> String {
        format!("a {} {}", ATTRIBUTES[self.attribute], OBJECTS[self.object])
    }

    fn axis(self, cfg: &ToyConfig) -> usize {
        self.object * cfg.num_attributes + self.attribute
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    /// Distinct objects, sorted.
    pub concepts: Vec<Concept>,
    pub setting: usize,
}

fn list_phrase(concepts: &[Concept]) -> String {
    let parts: Vec<String> = concepts.iter().map(|c| c.phrase()).collect();
    match parts.len() {
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    }
}

/// Caption `template` (0-based) for `scene`. Template 0 lists the concepts
/// in canonical order followed by the setting.
pub fn caption(scene: &Scene, template: usize) -> String {
    let fwd = list_phrase(&scene.concepts);
    let mut rev_concepts = scene.concepts.clone();
    rev_concepts.reverse();
    let rev = list_phrase(&rev_concepts);
    let setting = SETTINGS[scene.setting];
    match template % TEMPLATES {
        0 => format!("{fwd} {setting}"),
        1 => format!("{setting} there is {fwd}"),
        2 => format!("a photo of {rev} {setting}"),
        3 => format!("we can see {rev} {setting}"),
        _ => format!("an image showing {fwd} {setting}"),
    }
}

pub fn sample_scene<R: Rng>(cfg: &ToyConfig, rng: &mut R) -> Scene {
    let count = rng.random_range(1..=cfg.max_concepts);
    let objects: Vec<usize> = (0..cfg.num_objects).collect();
    let mut concepts: Vec<Concept> = objects
        .choose_multiple(rng, count)
        .map(|&object| Concept {
            object,
            attribute: rng.random_range(0..cfg.num_attributes),
        })
        .collect();
    concepts.sort();
    Scene {
        concepts,
        setting: rng.random_range(0..cfg.num_settings),
    }
}

fn noisy_normalized<R: Rng>(mut v: Vec<f64>, noise: &Normal<f64>, rng: &mut R) -> Vec<f64> {
    for x in &mut v {
        *x += noise.sample(rng);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Everything generated for one image, before it is written to disk.
#[derive(Debug, Clone)]
pub struct ToyImage {
    pub image_id: String,
    pub scene: Scene,
    pub captions: Vec<String>,
    pub regions: Tensor,
    pub embedding: Vec<f64>,
    pub caption_embeddings: Tensor,
}

/// Generates all images in memory.
pub fn generate_toy_images(cfg: &ToyConfig) -> Result<Vec<ToyImage>> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent = cfg.num_objects + cfg.num_attributes + 1;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let projection: Vec<f64> = (0..latent * cfg.region_dim)
        .map(|_| std_normal.sample(&mut rng))
        .collect();
    let region_noise = Normal::new(0.0, cfg.region_noise).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let emb_noise = Normal::new(0.0, cfg.embedding_noise).map_err(|e| Error::InvalidInput(e.to_string()))?;

    let mut images = Vec::with_capacity(cfg.num_images);
    for index in 0..cfg.num_images {
        let scene = sample_scene(cfg, &mut rng);

        let mut latents: Vec<Vec<f64>> = Vec::with_capacity(cfg.regions);
        for c in &scene.concepts {
            let mut z = vec![0.0; latent];
            z[c.object] = 1.0;
            z[cfg.num_objects + c.attribute] = 1.0;
            latents.push(z);
        }
        while latents.len() < cfg.regions {
            let mut z = vec![0.0; latent];
            z[latent - 1] = 1.0;
            latents.push(z);
        }
        latents.shuffle(&mut rng);
        let mut regions = Vec::with_capacity(cfg.regions * cfg.region_dim);
        for z in &mut latents {
            for x in z.iter_mut() {
                *x += region_noise.sample(&mut rng);
            }
            for j in 0..cfg.region_dim {
                regions.push((0..latent).map(|i| z[i] * projection[i * cfg.region_dim + j]).sum());
            }
        }

        let mut bag = vec![0.0; cfg.embedding_dim()];
        for c in &scene.concepts {
            bag[c.axis(cfg)] = 1.0;
        }
        bag[cfg.num_concepts() + scene.setting] = cfg.setting_weight;
        let embedding = noisy_normalized(bag.clone(), &emb_noise, &mut rng);
        let captions: Vec<String> = (0..cfg.captions_per_image).map(|t| caption(&scene, t)).collect();
        let mut cap_emb = Vec::with_capacity(captions.len() * bag.len());
        for _ in &captions {
            cap_emb.extend(noisy_normalized(bag.clone(), &emb_noise, &mut rng));
        }
        images.push(ToyImage {
            image_id: format!("{}{index:05}", cfg.id_prefix),
            scene,
            captions,
            regions: Tensor::matrix(cfg.regions, cfg.region_dim, regions)?,
            embedding,
            caption_embeddings: Tensor::matrix(cfg.captions_per_image, cfg.embedding_dim(), cap_emb)?,
        });
    }
    Ok(images)
}

/// Writes feature files under `out_dir/features/` and `out_dir/manifest.json`.
pub fn generate_toy_dataset(cfg: &ToyConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let images = generate_toy_images(cfg)?;
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut records = Vec::with_capacity(images.len());
    for img in &images {
        let rel = |kind: &str| format!("features/{}.{kind}.xtft", img.image_id);
        let (r, e, c) = (rel("regions"), rel("embedding"), rel("captions"));
        write_feature_file(&out_dir.join(&r), &img.regions)?;
        write_feature_file(&out_dir.join(&e), &Tensor::matrix(1, img.embedding.len(), img.embedding.clone())?)?;
        write_feature_file(&out_dir.join(&c), &img.caption_embeddings)?;
        records.push(ImageRecord {
            image_id: img.image_id.clone(),
            captions: img.captions.clone(),
            region_feature_file: r,
            retrieval_embedding_file: e,
            caption_embedding_file: Some(c),
        });
    }
    let (n_train, n_val, _) = cfg.split_sizes();
    let test = records.split_off(n_train + n_val);
    let val = records.split_off(n_train);
    let manifest = DatasetManifest {
        name: format!("toy-{}", cfg.seed),
        regions: cfg.regions,
        region_dim: cfg.region_dim,
        embedding_dim: cfg.embedding_dim(),
        splits: Splits {
            train: records,
            val,
            test,
        },
    };
    let path = out_dir.join("manifest.json");
    fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
