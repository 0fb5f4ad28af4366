//! Data ingestion, synthetic data, and the ablation suite.

mod dataset;
mod features;
mod pipeline;
mod run;
mod toy;

pub use dataset::{ingest_dataset, Dataset, DatasetManifest, ImageData, ImageRecord, Split, Splits};
pub use features::{feature_bytes, parse_feature_bytes, read_feature_file, write_feature_file};
pub use pipeline::{
    build_stores, build_stores_with, build_vocabulary, evaluate_condition, load_stores, prepare_examples, save_stores,
    toy_model_config, train_condition, ContextCondition, PipelineConfig, VariantKind,
};
pub use run::{run_experiment, summarize_mixed, AttentionReport, ExperimentKind, ExperimentReport, ExperimentSpec, ReportRow};
pub use toy::{caption, generate_toy_dataset, generate_toy_images, sample_scene, Concept, Scene, ToyConfig, ToyImage};
