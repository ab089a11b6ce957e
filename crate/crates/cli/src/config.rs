//! The run configuration: one TOML document with a table per stage.
//!
//! Relative paths are resolved against the directory holding the config
//! file. The config hash is taken over the document as written (before path
//! resolution, without `out_dir`), so the same config produces the same hash
//! wherever the run lands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::artifacts::sha256_hex;
use vulnforge_core::acquire::FetchPolicy;
use vulnforge_core::augment::GatePolicy;
use vulnforge_core::embed::EncoderSpec;
use vulnforge_core::refine::{FreqNormalization, RefinePolicy};
use vulnforge_core::textprep::CleanPolicy;
use vulnforge_seq2seq::{Activation, DecodeConfig, ModelConfig, PosKind, Strategy, TargetField, TrainConfig};
use vulnforge_tokenize::VocabKind;

/// Set to `1` to forbid network access: scraping must use fixtures.
pub const OFFLINE_ENV: &str = "VULNFORGE_OFFLINE";

pub fn offline() -> bool {
    std::env::var(OFFLINE_ENV).is_ok_and(|v| v == "1")
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("{field}: path {path} does not exist")]
    MissingPath { field: &'static str, path: String },
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
}

fn invalid(field: &'static str, message: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    SingleUse,
    SingleMpnet,
    Dual,
}

impl PolicyName {
    pub fn policy(self) -> GatePolicy {
        match self {
            PolicyName::SingleUse => GatePolicy::single_use(),
            PolicyName::SingleMpnet => GatePolicy::single_mpnet(),
            PolicyName::Dual => GatePolicy::dual(),
        }
    }
}

impl std::str::FromStr for PolicyName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single-use" => Ok(PolicyName::SingleUse),
            "single-mpnet" => Ok(PolicyName::SingleMpnet),
            "dual" => Ok(PolicyName::Dual),
            _ => Err(format!(
                "unknown policy {s:?}; expected single-use, single-mpnet or dual"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteEncoder {
    pub endpoint: String,
    pub dimension: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquireConfig {
    /// NVD JSON feed file.
    pub feed: PathBuf,
    /// Fixture directory with `fixtures.json`; scraping goes live without it.
    pub fixtures: Option<PathBuf>,
    pub year_lo: i32,
    pub year_hi: i32,
    pub max_paragraphs_per_page: usize,
    pub min_words: usize,
    pub require_valid_tls: bool,
    pub timeout_ms: u64,
    pub max_concurrent_fetches: usize,
    pub politeness_delay_ms: u64,
}

impl Default for AcquireConfig {
    fn default() -> Self {
        let f = FetchPolicy::default();
        AcquireConfig {
            feed: PathBuf::new(),
            fixtures: None,
            year_lo: f.year_lo,
            year_hi: f.year_hi,
            max_paragraphs_per_page: f.max_paragraphs_per_page,
            min_words: CleanPolicy::default().min_words,
            require_valid_tls: f.require_valid_tls,
            timeout_ms: f.timeout_ms,
            max_concurrent_fetches: f.max_concurrent_fetches,
            politeness_delay_ms: f.politeness_delay_ms,
        }
    }
}

impl AcquireConfig {
    pub fn fetch_policy(&self) -> FetchPolicy {
        FetchPolicy {
            year_lo: self.year_lo,
            year_hi: self.year_hi,
            max_paragraphs_per_page: self.max_paragraphs_per_page,
            require_valid_tls: self.require_valid_tls,
            timeout_ms: self.timeout_ms,
            max_concurrent_fetches: self.max_concurrent_fetches,
            politeness_delay_ms: self.politeness_delay_ms,
        }
    }

    pub fn clean_policy(&self) -> CleanPolicy {
        CleanPolicy {
            min_words: self.min_words,
            ..CleanPolicy::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub policy: PolicyName,
    /// Encoder id → embedding service. Ids not listed use the builtin encoder.
    pub remote: BTreeMap<String, RemoteEncoder>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            policy: PolicyName::SingleUse,
            remote: BTreeMap::new(),
        }
    }
}

impl AugmentConfig {
    pub fn encoder_spec(&self, id: &str) -> EncoderSpec {
        match self.remote.get(id) {
            Some(r) => EncoderSpec::remote(id, &r.endpoint, r.dimension),
            None => EncoderSpec::builtin(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub cap_words: Option<usize>,
    pub dedup_threshold: f64,
    pub diversity_threshold: f64,
    pub normalization: FreqNormalization,
}

impl Default for RefineConfig {
    fn default() -> Self {
        let p = RefinePolicy::default();
        RefineConfig {
            cap_words: p.cap_words,
            dedup_threshold: p.dedup_threshold,
            diversity_threshold: p.diversity_threshold,
            normalization: p.normalization,
        }
    }
}

impl RefineConfig {
    pub fn policy(&self) -> RefinePolicy {
        RefinePolicy {
            dedup_threshold: self.dedup_threshold,
            diversity_threshold: self.diversity_threshold,
            cap_words: self.cap_words,
            normalization: self.normalization,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizeConfig {
    pub kind: VocabKind,
    pub size: usize,
}

impl Default for TokenizeConfig {
    fn default() -> Self {
        TokenizeConfig {
            kind: VocabKind::Bpe,
            size: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainStageConfig {
    pub target: TargetField,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub test_frac: f64,
    pub val_frac: f64,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub pos_kind: PosKind,
    pub rel_clip: usize,
    pub activation: Activation,
}

impl Default for TrainStageConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::new(0);
        TrainStageConfig {
            target: TargetField::Description,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            max_steps: t.max_steps,
            test_frac: t.test_frac,
            val_frac: t.val_frac,
            d_model: m.d_model,
            heads: m.heads,
            layers: m.layers,
            ffn_dim: m.ffn_dim,
            max_src_len: m.max_src_len,
            max_tgt_len: m.max_tgt_len,
            pos_kind: m.pos_kind,
            rel_clip: m.rel_clip,
            activation: m.activation,
        }
    }
}

impl TrainStageConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            ffn_dim: self.ffn_dim,
            max_src_len: self.max_src_len,
            max_tgt_len: self.max_tgt_len,
            pos_kind: self.pos_kind,
            rel_clip: self.rel_clip,
            activation: self.activation,
        }
    }

    pub fn train_config(&self, seed: u64, eval: &EvalConfig) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            length_penalty: eval.length_penalty,
            repetition_penalty: eval.repetition_penalty,
            beams: eval.beams,
            test_frac: self.test_frac,
            val_frac: self.val_frac,
            seed,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub strategy: Strategy,
    pub beams: usize,
    pub length_penalty: f64,
    pub repetition_penalty: f64,
    pub max_len: Option<usize>,
    pub top_trigrams: usize,
    /// Entity list, one per line; the bundled one when absent.
    pub gazetteer: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let d = DecodeConfig::default();
        EvalConfig {
            strategy: d.strategy,
            beams: d.beams,
            length_penalty: d.length_penalty,
            repetition_penalty: d.repetition_penalty,
            max_len: d.max_len,
            top_trigrams: 20,
            gazetteer: None,
        }
    }
}

impl EvalConfig {
    pub fn decode_config(&self, seed: u64) -> DecodeConfig {
        DecodeConfig {
            strategy: self.strategy,
            beams: self.beams,
            length_penalty: self.length_penalty,
            repetition_penalty: self.repetition_penalty,
            seed,
            max_len: self.max_len,
        }
    }
}

fn default_seed() -> u64 {
    42
}

fn default_name() -> String {
    "vulnforge".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Feeds every stochastic stage: the data split, batch order and sampling.
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_name")]
    pub name: String,
    /// Pinned manifest timestamp; the current time when absent.
    #[serde(default)]
    pub created_at: Option<DateTime<Utc>>,
    pub acquire: AcquireConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub tokenize: TokenizeConfig,
    #[serde(default)]
    pub train: TrainStageConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(skip)]
    hash: String,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Parses a config document. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.hash = cfg.compute_hash();
        cfg.out_dir = resolve(base, &cfg.out_dir);
        cfg.acquire.feed = resolve(base, &cfg.acquire.feed);
        cfg.acquire.fixtures = cfg.acquire.fixtures.as_deref().map(|p| resolve(base, p));
        cfg.eval.gazetteer = cfg.eval.gazetteer.as_deref().map(|p| resolve(base, p));
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn compute_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("out_dir");
        }
        sha256_hex(v.to_string().as_bytes())
    }

    /// Hex SHA-256 of the config as written, ignoring `out_dir`.
    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn created_at(&self) -> DateTime<Utc> {
        self.created_at.unwrap_or_else(Utc::now)
    }

    /// Checks every path and every stage's parameters, before any work starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.acquire.feed.as_os_str().is_empty() {
            return Err(invalid("acquire.feed", "a feed path is required"));
        }
        if !self.acquire.feed.is_file() {
            return Err(ConfigError::MissingPath {
                field: "acquire.feed",
                path: self.acquire.feed.display().to_string(),
            });
        }
        match &self.acquire.fixtures {
            Some(dir) if !dir.join("fixtures.json").is_file() => {
                return Err(ConfigError::MissingPath {
                    field: "acquire.fixtures",
                    path: dir.join("fixtures.json").display().to_string(),
                });
            }
            None if offline() => {
                return Err(invalid(
                    "acquire.fixtures",
                    format!("{OFFLINE_ENV}=1 requires a fixture directory"),
                ));
            }
            _ => {}
        }
        if let Some(g) = &self.eval.gazetteer {
            if !g.is_file() {
                return Err(ConfigError::MissingPath {
                    field: "eval.gazetteer",
                    path: g.display().to_string(),
                });
            }
        }
        self.acquire
            .fetch_policy()
            .validate()
            .map_err(|m| invalid("acquire", m))?;
        let gate = self.augment.policy.policy();
        gate.validate().map_err(|e| invalid("augment.policy", e))?;
        for id in self.augment.remote.keys() {
            if !gate.encoder_ids().contains(&id.as_str()) {
                return Err(invalid(
                    "augment.remote",
                    format!("encoder `{id}` is not used by the policy"),
                ));
            }
        }
        for r in self.augment.remote.values() {
            if r.dimension == 0 {
                return Err(invalid("augment.remote", "dimension must be positive"));
            }
        }
        self.refine.policy().validate().map_err(|e| invalid("refine", e))?;
        if self.tokenize.size == 0 {
            return Err(invalid("tokenize.size", "must be positive"));
        }
        self.train
            .train_config(self.seed, &self.eval)
            .validate()
            .map_err(|e| invalid("train", e))?;
        // The vocabulary size is only known after tokenization; any valid
        // size will do for the structural checks.
        self.train
            .model_config(self.tokenize.size + 4)
            .validate()
            .map_err(|e| invalid("train", e))?;
        self.eval
            .decode_config(self.seed)
            .validate()
            .map_err(|e| invalid("eval", e))?;
        Ok(())
    }

    /// Encoder used for refinement dedup and for eval similarity: the first
    /// encoder of the gate policy.
    pub fn primary_encoder(&self) -> EncoderSpec {
        let gate = self.augment.policy.policy();
        self.augment.encoder_spec(gate.encoder_ids()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
out_dir = "out"
[acquire]
feed = "feed.json"
"#;

    #[test]
    fn defaults_fill_every_table() {
        let cfg = RunConfig::parse(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.out_dir, PathBuf::from("/base/out"));
        assert_eq!(cfg.acquire.feed, PathBuf::from("/base/feed.json"));
        assert_eq!(cfg.acquire.min_words, 20);
        assert_eq!(cfg.augment.policy, PolicyName::SingleUse);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.eval.strategy, Strategy::Beam);
    }

    #[test]
    fn enum_keys_parse_from_toml() {
        let text = format!(
            "{MINIMAL}[augment]\npolicy = \"dual\"\n[augment.remote.mpnet]\nendpoint = \"http://127.0.0.1:9/embed\"\ndimension = 768\n\
             [refine]\nnormalization = \"corpus\"\n[tokenize]\nkind = \"unigram\"\n\
             [train]\ntarget = \"label\"\npos_kind = \"relative\"\nactivation = \"identity\"\n\
             [eval]\nstrategy = {{ kind = \"top_k\", value = 5 }}\n"
        );
        let cfg = RunConfig::parse(&text, Path::new("/base")).unwrap();
        assert_eq!(cfg.augment.policy, PolicyName::Dual);
        assert_eq!(cfg.augment.remote["mpnet"].dimension, 768);
        assert_eq!(cfg.refine.normalization, FreqNormalization::Corpus);
        assert_eq!(cfg.tokenize.kind, VocabKind::Unigram);
        assert_eq!(cfg.train.target, TargetField::Label);
        assert_eq!(cfg.train.pos_kind, PosKind::Relative);
        assert_eq!(cfg.train.activation, Activation::Identity);
        assert_eq!(cfg.eval.strategy, Strategy::TopK(5));
        let greedy = RunConfig::parse(&format!("{MINIMAL}[eval]\nstrategy = {{ kind = \"greedy\" }}\n"), Path::new("/"));
        assert_eq!(greedy.unwrap().eval.strategy, Strategy::Greedy);
    }

    #[test]
    fn hash_ignores_out_dir_and_base() {
        let a = RunConfig::parse(MINIMAL, Path::new("/a")).unwrap();
        let b = RunConfig::parse(&MINIMAL.replace("\"out\"", "\"elsewhere\""), Path::new("/b")).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let c = RunConfig::parse(&format!("seed = 7\n{MINIMAL}"), Path::new("/a")).unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse(&format!("{MINIMAL}typo = 1\n"), Path::new(".")).is_err());
    }

    #[test]
    fn missing_feed_fails_validation() {
        let cfg = RunConfig::parse(MINIMAL, Path::new("/nonexistent")).unwrap();
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::MissingPath {
                field: "acquire.feed",
                ..
            })
        ));
    }
}
