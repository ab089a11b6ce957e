//! JSON checkpoint: format tag, version, config header, optional vocabulary
//! and named tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, Seq2SeqParams};
use crate::tensor::Tensor;
use crate::CheckpointError;
use vulnforge_tokenize::SubwordVocab;

pub const FORMAT: &str = "vulnforge-seq2seq";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    #[serde(flatten)]
    tensor: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<SubwordVocab>,
    tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Seq2SeqParams,
    pub vocab: Option<SubwordVocab>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, CheckpointError> {
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            config: self.params.config().clone(),
            vocab: self.vocab.clone(),
            tensors: self
                .params
                .names()
                .iter()
                .zip(&self.params.tensors)
                .map(|(n, t)| NamedTensor {
                    name: n.clone(),
                    tensor: t.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self, CheckpointError> {
        let file: CheckpointFile = serde_json::from_str(s)?;
        if file.format != FORMAT {
            return Err(CheckpointError::Format(file.format));
        }
        if file.version != VERSION {
            return Err(CheckpointError::Version(file.version));
        }
        if let Some(v) = &file.vocab {
            if v.id_count() != file.config.vocab_size {
                return Err(CheckpointError::VocabMismatch {
                    vocab: v.id_count(),
                    model: file.config.vocab_size,
                });
            }
        }
        for t in &file.tensors {
            if t.tensor.data.len() != t.tensor.rows * t.tensor.cols {
                return Err(crate::ModelError::Shape(format!("{} has the wrong number of values", t.name)).into());
            }
        }
        let named = file.tensors.into_iter().map(|t| (t.name, t.tensor)).collect();
        let params = Seq2SeqParams::from_named(&file.config, named)?;
        Ok(Checkpoint {
            params,
            vocab: file.vocab,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
