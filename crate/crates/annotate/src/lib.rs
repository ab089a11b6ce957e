//! Annotation service: label writing for the label-guided dataset and human
//! grading of generated summaries, persisted in an append-only ledger.

pub mod api;
pub mod ledger;
pub mod sample;
pub mod state;

pub use api::{router, serve, AppState, TOKEN_ENV};
pub use ledger::{replay, Ledger, LedgerEvent};
pub use sample::{extractive_ratio, sample_batch};
pub use state::{Aggregates, AnnotationState, SampleStatus, SampleSummary, SampleView};

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("no instance with id {0}")]
    NotFound(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("{0}")]
    Conflict(String),
    #[error("missing or wrong bearer token")]
    Unauthorized,
    #[error("cannot sample {n} of {count} instances")]
    SampleSize { n: usize, count: usize },
    #[error("ledger line {line} is not a valid event: {source}")]
    Corrupt { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
