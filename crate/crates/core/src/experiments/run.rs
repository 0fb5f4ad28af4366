//! Ablation experiments and their JSON/CSV reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Split};
use super::pipeline::{
    evaluate_condition, prepare_examples, train_condition, ContextCondition, PipelineConfig, VariantKind,
};
use crate::analysis::{attention_mass, direct_textual_mass, retrieval_quality_histogram, AttentionSummary, HistogramReport};
use crate::decoder::attention_record;
use crate::error::{Error, Result};
use crate::retrieval::{QueryImage, RetrievalConfig, RetrievalMode, RetrievalStores};
use crate::training::{caption_example, Checkpoint, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentKind {
    KSweep { ks: Vec<usize> },
    ContextVariant { variants: Vec<VariantKind> },
    BlackedImage,
    RetrievalMode { modes: Vec<RetrievalMode> },
    Oracle { replace_counts: Vec<usize> },
    /// Evaluates with the base stores, then with base merged with the extra
    /// stores; the checkpoint is never modified.
    DatastoreSwap,
    AttentionAnalysis,
    Histogram { modes: Vec<RetrievalMode> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: ExperimentKind,
    /// Base condition; each kind varies one aspect of it.
    pub condition: ContextCondition,
    pub split: Split,
    pub seeds: Vec<u64>,
    /// When set, every condition gets its own model per seed instead of
    /// using the given checkpoint.
    #[serde(default)]
    pub retrain: Option<TrainConfig>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl ExperimentSpec {
    pub fn new(id: impl Into<String>, kind: ExperimentKind) -> Self {
        Self {
            id: id.into(),
            kind,
            condition: ContextCondition::retrieved(crate::retrieval::DEFAULT_K),
            split: Split::Val,
            seeds: vec![0],
            retrain: None,
            pipeline: PipelineConfig::default(),
        }
    }

    /// Every problem with the parameters of this kind.
    pub fn validate(&self) -> Vec<String> {
        let mut issues = Vec::new();
        if self.seeds.is_empty() {
            issues.push("at least one seed is required".into());
        }
        match &self.kind {
            ExperimentKind::KSweep { ks } if ks.is_empty() => issues.push("k_sweep needs a k list".into()),
            ExperimentKind::ContextVariant { variants } if variants.is_empty() => {
                issues.push("context_variant needs variants".into())
            }
            ExperimentKind::RetrievalMode { modes } | ExperimentKind::Histogram { modes } if modes.is_empty() => {
                issues.push("at least one retrieval mode is required".into())
            }
            ExperimentKind::Oracle { replace_counts } => {
                if replace_counts.is_empty() {
                    issues.push("oracle needs replace counts".into());
                }
                if let Some(rc) = replace_counts.iter().find(|&&rc| rc > self.condition.k) {
                    issues.push(format!("replace_count {rc} exceeds k = {}", self.condition.k));
                }
            }
            ExperimentKind::DatastoreSwap if self.retrain.is_some() => {
                issues.push("datastore_swap never retrains".into())
            }
            _ => {}
        }
        issues
    }

    fn conditions(&self) -> Vec<ContextCondition> {
        let base = self.condition;
        match &self.kind {
            ExperimentKind::KSweep { ks } => ks.iter().map(|&k| base.with_k(k)).collect(),
            ExperimentKind::ContextVariant { variants } => variants.iter().map(|&v| base.with_variant(v)).collect(),
            ExperimentKind::BlackedImage => vec![base, base.blacked()],
            ExperimentKind::RetrievalMode { modes } => modes.iter().map(|&m| base.with_mode(m)).collect(),
            ExperimentKind::Oracle { replace_counts } => replace_counts
                .iter()
                .map(|&replace_count| base.with_variant(VariantKind::Oracle { replace_count }))
                .collect(),
            ExperimentKind::DatastoreSwap | ExperimentKind::AttentionAnalysis | ExperimentKind::Histogram { .. } => {
                vec![base]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub bleu4: f64,
    pub cider_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub histograms: Vec<HistogramReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub summary: AttentionSummary,
    /// Textual mass summed directly over unpadded positions, per layer.
    pub direct_textual: Vec<f64>,
}

impl ExperimentReport {
    /// Mean CIDEr-D over seeds for each condition label, in first-seen order.
    pub fn mean_cider(&self) -> Vec<(String, f64)> {
        let mut order: Vec<String> = Vec::new();
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = sums.entry(r.condition.clone()).or_insert_with(|| {
                order.push(r.condition.clone());
                (0.0, 0)
            });
            e.0 += r.cider_d;
            e.1 += 1;
        }
        order
            .into_iter()
            .map(|c| {
                let (s, n) = sums[&c];
                (c, s / n as f64)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("experiment,condition,seed,checkpoint_hash,bleu4,cider_d\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.spec.id, r.condition, r.seed, r.checkpoint_hash, r.bleu4, r.cider_d
            ));
        }
        s
    }

    /// Writes `{id}.json` and `{id}.csv` (plus analysis CSVs) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{}.json", self.spec.id));
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{}.csv", self.spec.id));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        if let Some(a) = &self.attention {
            let p = dir.join(format!("{}.attention.csv", self.spec.id));
            fs::write(&p, a.summary.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
        for h in &self.histograms {
            let mode = match h.mode {
                RetrievalMode::ImageText => "image_text",
                RetrievalMode::ImageImage => "image_image",
            };
            let p = dir.join(format!("{}.histogram.{mode}.csv", self.spec.id));
            fs::write(&p, h.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Runs `spec`. Without `spec.retrain`, every condition is evaluated with
/// `checkpoint`; `extra` is required by `DatastoreSwap` only.
pub fn run_experiment(
    spec: &ExperimentSpec,
    checkpoint: Option<&Checkpoint>,
    dataset: &Dataset,
    stores: &RetrievalStores,
    extra: Option<&RetrievalStores>,
) -> Result<ExperimentReport> {
    let issues = spec.validate();
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    let images = dataset.split(spec.split);
    let mut report = ExperimentReport {
        spec: spec.clone(),
        rows: Vec::new(),
        attention: None,
        histograms: Vec::new(),
    };
    let need_checkpoint = || {
        checkpoint.ok_or_else(|| Error::InvalidInput(format!("experiment {} needs a checkpoint", spec.id)))
    };

    match &spec.kind {
        ExperimentKind::Histogram { modes } => {
            let references: Vec<Vec<String>> = images.iter().map(|i| i.captions.clone()).collect();
            let queries: Vec<QueryImage<'_>> = images
                .iter()
                .map(|i| QueryImage {
                    image_id: &i.image_id,
                    embedding: Some(&i.embedding),
                    regions: Some(&i.regions),
                })
                .collect();
            for &mode in modes {
                let cfg = RetrievalConfig {
                    mode,
                    k: 1,
                    metric: None,
                    exclude_self: spec.pipeline.exclude_self,
                    seed: spec.seeds[0],
                };
                report
                    .histograms
                    .push(retrieval_quality_histogram(&queries, stores, &cfg, &references)?);
            }
        }
        ExperimentKind::AttentionAnalysis => {
            let ck = need_checkpoint()?;
            let examples = prepare_examples(images, stores, &ck.vocab, &spec.condition, &spec.pipeline, spec.seeds[0])?;
            let mut records = Vec::with_capacity(examples.len());
            for ex in &examples {
                let encoded = ck.model.encode(&ex.regions, ex.context(1))?;
                let hyp = caption_example(&ck.model, ex, spec.pipeline.beam_width)?;
                let mut rec = attention_record(&encoded, &hyp, &ck.model.params, &ck.model.config.decoder)?;
                rec.image_id = ex.image_id.clone();
                records.push(rec);
            }
            // Contexts differ in length once padding is trimmed; summarize
            // per length group and combine weighted by caption count.
            let summary = summarize_mixed(&records)?;
            report.attention = Some(summary);
        }
        ExperimentKind::DatastoreSwap => {
            let ck = need_checkpoint()?;
            let extra =
                extra.ok_or_else(|| Error::InvalidInput("datastore_swap needs an extra datastore".into()))?;
            let merged = stores.merge(extra)?;
            let hash = ck.hash()?;
            for &seed in &spec.seeds {
                for (label, s) in [("base", stores), ("base+extra", &merged)] {
                    let ev = evaluate_condition(ck, images, s, &spec.condition, &spec.pipeline, seed)?;
                    report.rows.push(ReportRow {
                        condition: format!("{}/{label}", spec.condition),
                        seed,
                        checkpoint_hash: hash.clone(),
                        bleu4: ev.report.bleu4,
                        cider_d: ev.report.cider_d,
                    });
                }
            }
        }
        _ => {
            for &seed in &spec.seeds {
                let base_model = match &spec.retrain {
                    // Oracle conditions are inference-time only: one model
                    // trained with plain retrieval serves all of them.
                    Some(tc) if matches!(spec.kind, ExperimentKind::Oracle { .. }) => Some(retrain(
                        spec,
                        dataset,
                        stores,
                        &spec.condition,
                        tc,
                        seed,
                        checkpoint,
                    )?),
                    _ => None,
                };
                for condition in spec.conditions() {
                    let owned;
                    let ck = match (&spec.retrain, &base_model) {
                        (_, Some(m)) => m,
                        (Some(tc), None) => {
                            owned = retrain(spec, dataset, stores, &condition, tc, seed, checkpoint)?;
                            &owned
                        }
                        (None, None) => need_checkpoint()?,
                    };
                    let ev = evaluate_condition(ck, images, stores, &condition, &spec.pipeline, seed)?;
                    report.rows.push(ReportRow {
                        condition: condition.to_string(),
                        seed,
                        checkpoint_hash: ck.hash()?,
                        bleu4: ev.report.bleu4,
                        cider_d: ev.report.cider_d,
                    });
                }
            }
        }
    }
    Ok(report)
}

fn retrain(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    stores: &RetrievalStores,
    condition: &ContextCondition,
    train: &TrainConfig,
    seed: u64,
    template: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    let vocab = match template {
        Some(ck) => ck.vocab.clone(),
        None => super::pipeline::build_vocabulary(dataset, 1)?,
    };
    let model_config = match template {
        Some(ck) => ck.model.config.clone(),
        None => super::pipeline::toy_model_config(dataset, &vocab, &spec.pipeline),
    };
    let tc = TrainConfig {
        seed,
        ..train.clone()
    };
    let outcome = train_condition(dataset, stores, &vocab, condition, &model_config, &tc, &spec.pipeline, None)?;
    Ok(outcome.checkpoint)
}

/// Attention summary over records whose textual lengths may differ: each
/// length group is summarized on its own and groups are combined weighted
/// by caption count.
pub fn summarize_mixed(records: &[crate::decoder::AttentionRecord]) -> Result<AttentionReport> {
    let mut groups: BTreeMap<(usize, usize), Vec<crate::decoder::AttentionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.visual_len, r.text_len)).or_default().push(r.clone());
    }
    let total = records.len();
    if total == 0 {
        return Err(Error::InvalidInput("no attention records".into()));
    }
    let mut visual: Vec<f64> = Vec::new();
    let mut direct: Vec<f64> = Vec::new();
    for ((n, l), recs) in &groups {
        let s = attention_mass(recs, *n, *l)?;
        let d = direct_textual_mass(recs, *n, *l)?;
        if visual.is_empty() {
            visual = vec![0.0; s.layers.len()];
            direct = vec![0.0; s.layers.len()];
        }
        if s.layers.len() != visual.len() {
            return Err(Error::shape("records disagree on the number of layers"));
        }
        let w = recs.len() as f64 / total as f64;
        for (i, m) in s.layers.iter().enumerate() {
            visual[i] += w * m.visual;
            direct[i] += w * d[i];
        }
    }
    Ok(AttentionReport {
        summary: AttentionSummary {
            layers: visual
                .into_iter()
                .map(|v| crate::analysis::LayerMass {
                    visual: v,
                    textual: 1.0 - v,
                })
                .collect(),
            captions: total,
        },
        direct_textual: direct,
    })
}
