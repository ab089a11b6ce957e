//! A desk-scale encoder-decoder transformer in `f64`: reverse-mode autodiff,
//! learned absolute or clipped relative positions, Adam training under
//! teacher-forced cross-entropy, and beam/greedy/sampled decoding.

pub mod checkpoint;
pub mod generate;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use generate::{generate, generate_ids, DecodeConfig, Strategy};
pub use model::{decode_step, encode_src, Activation, ModelConfig, Offsets, PosKind, Seq2SeqParams};
pub use tensor::{attention, Tensor};
pub use train::{train, train_pairs, EpochLoss, Pair, TargetField, TrainConfig, TrainReport};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token id {id} is outside the vocabulary of {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("sequence of {len} tokens exceeds the limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("decoder prefix must begin with the start token")]
    MissingStart,
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset has no usable instances")]
    EmptyDataset,
    #[error("no instance carries a label")]
    NoLabels,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error("invalid decoding configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a model checkpoint (format {0:?})")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("vocabulary has {vocab} ids but the model expects {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
