//! Command-line front end and the reproducible pipeline runner.
//!
//! Every stage reads and writes plain files under one output directory, so a
//! run can be resumed stage by stage with `--only`.

pub mod artifacts;
pub mod cli;
pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::{ConfigError, RunConfig};
pub use pipeline::{run_pipeline, PipelineStage, RunReport, StageReport, StageStatus};

use vulnforge_annotate::AnnotateError;
use vulnforge_core::augment::GateError;
use vulnforge_core::embed::EmbedError;
use vulnforge_core::model::ManifestError;
use vulnforge_core::refine::RefineError;
use vulnforge_seq2seq::{CheckpointError, GenerateError, ModelError, TrainError};
use vulnforge_tokenize::TokenizeError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("feed: {0}")]
    Feed(#[from] vulnforge_core::acquire::FeedError),
    #[error("fetch: {0}")]
    Fetch(#[from] vulnforge_core::acquire::FetchError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}
