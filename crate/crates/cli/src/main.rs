use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use recap_core::analysis::write_attention_records;
use recap_core::decoder::attention_record;
use recap_core::experiments::{
    build_stores, build_vocabulary, evaluate_condition, generate_toy_dataset, ingest_dataset, load_stores,
    prepare_examples, run_experiment, save_stores, toy_model_config, train_condition, ContextCondition, Dataset,
    ExperimentKind, ExperimentSpec, PipelineConfig, Split, ToyConfig, VariantKind,
};
use recap_core::metrics::write_caption_file;
use recap_core::model::ModelConfig;
use recap_core::retrieval::{RetrievalMode, DEFAULT_K};
use recap_core::training::{caption_example, train_scst, Checkpoint, ScstConfig, TrainConfig};
use recap_core::{Error, Result};

#[derive(Parser)]
#[command(name = "recap", version, about = "Retrieval-augmented image captioning")]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic toy dataset into --out.
    GenData {
        #[arg(long)]
        num_images: Option<usize>,
    },
    /// Build caption and image datastores from the training split.
    BuildStore {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Merge an extra datastore into a base one.
    MergeStore {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        extra: PathBuf,
    },
    /// Cross-entropy training under one context condition.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        stores: PathBuf,
        #[command(flatten)]
        condition: ConditionArgs,
    },
    /// Self-critical fine-tuning of a checkpoint (decoder only).
    Scst {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        stores: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        condition: ConditionArgs,
    },
    /// Beam-search evaluation; writes metrics and captions.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        stores: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[command(flatten)]
        condition: ConditionArgs,
    },
    /// Run an experiment spec (JSON) and write its report.
    Ablate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        stores: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Extra datastore directory for datastore_swap.
        #[arg(long)]
        extra_stores: Option<PathBuf>,
    },
    /// Attention allocation and retrieved-caption quality histograms.
    Analyze {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        stores: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[command(flatten)]
        condition: ConditionArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    ImageText,
    ImageImage,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Retrieved,
    Empty,
    Random,
    Oracle,
}

#[derive(clap::Args)]
struct ConditionArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Captions replaced by references under the oracle variant.
    #[arg(long, default_value_t = 0)]
    replace_count: usize,
    #[arg(long)]
    blacked_out: bool,
}

impl ConditionArgs {
    fn apply(&self, base: ContextCondition) -> ContextCondition {
        let mut c = base;
        if let Some(k) = self.k {
            c = c.with_k(k);
        }
        if let Some(m) = self.mode {
            c = c.with_mode(match m {
                ModeArg::ImageText => RetrievalMode::ImageText,
                ModeArg::ImageImage => RetrievalMode::ImageImage,
            });
        }
        if let Some(v) = self.variant {
            c = c.with_variant(match v {
                VariantArg::Retrieved => VariantKind::Retrieved,
                VariantArg::Empty => VariantKind::Empty,
                VariantArg::Random => VariantKind::Random,
                VariantArg::Oracle => VariantKind::Oracle {
                    replace_count: self.replace_count,
                },
            });
        }
        if self.blacked_out {
            c = c.blacked();
        }
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    toy: ToyConfig,
    pipeline: PipelineConfig,
    train: TrainConfig,
    scst: ScstConfig,
    condition: ContextCondition,
    /// Defaults to the toy shape derived from the dataset and vocabulary.
    model: Option<ModelConfig>,
    min_frequency: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            toy: ToyConfig::default(),
            pipeline: PipelineConfig::default(),
            train: TrainConfig::default(),
            scst: ScstConfig::default(),
            condition: ContextCondition::retrieved(DEFAULT_K),
            model: None,
            min_frequency: 1,
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Format {
                    path: p.to_path_buf(),
                    reason: e.to_string(),
                })?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.toy.seed = s;
            cfg.train.seed = s;
            cfg.scst.seed = s;
        }
        Ok(cfg)
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| io_error(path, e))
}

fn checkpoint_for(dataset: &Dataset, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.model.config.encoder.region_dim != dataset.region_dim() {
        return Err(Error::InvalidInput(format!(
            "checkpoint expects region_dim {}, dataset has {}",
            ck.model.config.encoder.region_dim,
            dataset.region_dim()
        )));
    }
    Ok(ck)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    let out = &cli.out;
    match cli.command {
        Command::GenData { num_images } => {
            let mut toy = cfg.toy.clone();
            if let Some(n) = num_images {
                toy.num_images = n;
            }
            let manifest = generate_toy_dataset(&toy, out)?;
            info!(
                "wrote {} / {} / {} images to {}",
                manifest.splits.train.len(),
                manifest.splits.val.len(),
                manifest.splits.test.len(),
                out.display()
            );
        }
        Command::BuildStore { manifest, split } => {
            let dataset = ingest_dataset(&manifest)?;
            let stores = build_stores(dataset.split(split.into()))?;
            save_stores(&stores, out)?;
            info!("caption store: {} entries", stores.captions.len());
        }
        Command::MergeStore { base, extra } => {
            let merged = load_stores(&base)?.merge(&load_stores(&extra)?)?;
            save_stores(&merged, out)?;
            info!("merged store: {} caption entries", merged.captions.len());
        }
        Command::Train {
            manifest,
            stores,
            condition,
        } => {
            let dataset = ingest_dataset(&manifest)?;
            let stores = load_stores(&stores)?;
            let vocab = build_vocabulary(&dataset, cfg.min_frequency)?;
            let model_config = cfg
                .model
                .clone()
                .unwrap_or_else(|| toy_model_config(&dataset, &vocab, &cfg.pipeline));
            let condition = condition.apply(cfg.condition);
            fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
            let outcome = train_condition(
                &dataset,
                &stores,
                &vocab,
                &condition,
                &model_config,
                &cfg.train,
                &cfg.pipeline,
                Some(&out.join("train_log.jsonl")),
            )?;
            outcome.checkpoint.save(&out.join("checkpoint.xtck"))?;
            info!(
                "trained {} epochs ({} steps), best val BLEU-4 {:?}",
                outcome.epochs_run, outcome.steps_run, outcome.checkpoint.best_val_bleu4
            );
        }
        Command::Scst {
            manifest,
            stores,
            checkpoint,
            condition,
        } => {
            let dataset = ingest_dataset(&manifest)?;
            let stores = load_stores(&stores)?;
            let ck = checkpoint_for(&dataset, &checkpoint)?;
            let condition = condition.apply(cfg.condition);
            let train = prepare_examples(&dataset.train, &stores, &ck.vocab, &condition, &cfg.pipeline, cfg.scst.seed)?;
            fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
            let outcome = train_scst(ck.model.clone(), &ck.vocab, &train, &cfg.scst, Some(&out.join("scst_log.jsonl")))?;
            Checkpoint {
                model: outcome.model,
                ..ck
            }
            .save(&out.join("checkpoint_scst.xtck"))?;
        }
        Command::Eval {
            manifest,
            stores,
            checkpoint,
            split,
            condition,
        } => {
            let dataset = ingest_dataset(&manifest)?;
            let stores = load_stores(&stores)?;
            let ck = checkpoint_for(&dataset, &checkpoint)?;
            let condition = condition.apply(cfg.condition);
            let seed = cfg.train.seed;
            let ev = evaluate_condition(&ck, dataset.split(split.into()), &stores, &condition, &cfg.pipeline, seed)?;
            write_json(&out.join("eval.json"), &ev.report)?;
            write_caption_file(&out.join("captions.jsonl"), &ev.pairs)?;
            println!("{}", serde_json::json!({"bleu4": ev.report.bleu4, "cider_d": ev.report.cider_d}));
        }
        Command::Ablate {
            spec,
            manifest,
            stores,
            checkpoint,
            extra_stores,
        } => {
            let text = fs::read_to_string(&spec).map_err(|e| io_error(&spec, e))?;
            let mut spec: ExperimentSpec = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: spec.clone(),
                reason: e.to_string(),
            })?;
            if let Some(s) = cli.seed {
                spec.seeds = vec![s];
            }
            let dataset = ingest_dataset(&manifest)?;
            let stores = load_stores(&stores)?;
            let ck = checkpoint.map(|p| checkpoint_for(&dataset, &p)).transpose()?;
            let extra = extra_stores.map(|p| load_stores(&p)).transpose()?;
            let report = run_experiment(&spec, ck.as_ref(), &dataset, &stores, extra.as_ref())?;
            report.write(out)?;
            for (condition, cider) in report.mean_cider() {
                println!("{condition}\tCIDEr-D {cider:.4}");
            }
        }
        Command::Analyze {
            manifest,
            stores,
            checkpoint,
            split,
            condition,
        } => {
            let dataset = ingest_dataset(&manifest)?;
            let stores = load_stores(&stores)?;
            let ck = checkpoint_for(&dataset, &checkpoint)?;
            let condition = condition.apply(cfg.condition);
            let split: Split = split.into();
            let seed = cfg.train.seed;

            let examples = prepare_examples(dataset.split(split), &stores, &ck.vocab, &condition, &cfg.pipeline, seed)?;
            let mut records = Vec::with_capacity(examples.len());
            for ex in &examples {
                let encoded = ck.model.encode(&ex.regions, ex.context(1))?;
                let hyp = caption_example(&ck.model, ex, cfg.pipeline.beam_width)?;
                let mut rec = attention_record(&encoded, &hyp, &ck.model.params, &ck.model.config.decoder)?;
                rec.image_id = ex.image_id.clone();
                records.push(rec);
            }
            fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
            write_attention_records(&out.join("attention_records.jsonl"), &records)?;

            let mut spec = ExperimentSpec::new("attention", ExperimentKind::AttentionAnalysis);
            spec.condition = condition;
            spec.split = split;
            spec.seeds = vec![seed];
            spec.pipeline = cfg.pipeline.clone();
            run_experiment(&spec, Some(&ck), &dataset, &stores, None)?.write(out)?;

            let mut spec = ExperimentSpec::new(
                "histogram",
                ExperimentKind::Histogram {
                    modes: vec![RetrievalMode::ImageText, RetrievalMode::ImageImage],
                },
            );
            spec.split = split;
            spec.seeds = vec![seed];
            spec.pipeline = cfg.pipeline.clone();
            run_experiment(&spec, None, &dataset, &stores, None)?.write(out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
