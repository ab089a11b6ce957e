//! Similarity gating of scraped paragraphs and assembly of augmented instances.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Utc};
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, Encoder};
use crate::model::{AugmentedInstance, DatasetManifest, Paragraph, SourceRef, Stage, VulnRecord};

/// Scores strictly above this are near-copies of the description and never accepted.
pub const NEAR_DUPLICATE_CEILING: f64 = 0.90;

/// Slack on the encoder-agreement comparison so that a difference of exactly
/// `max_diff` survives floating-point subtraction.
const DIFF_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("no score for encoder `{0}`")]
    MissingScore(String),
    #[error("invalid gate policy: {0}")]
    InvalidPolicy(String),
    #[error("policy references encoder `{0}` which is not configured")]
    MissingEncoder(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GatePolicy {
    Single {
        encoder_id: String,
        lo: f64,
        hi: f64,
    },
    Dual {
        use_id: String,
        mpnet_id: String,
        use_lo: f64,
        use_hi: f64,
        mpnet_lo: f64,
        mpnet_hi: f64,
        max_diff: f64,
    },
}

impl GatePolicy {
    pub fn single(encoder_id: impl Into<String>, lo: f64, hi: f64) -> Self {
        GatePolicy::Single {
            encoder_id: encoder_id.into(),
            lo,
            hi,
        }
    }

    /// USE-style single-encoder window, [0.60, 0.90].
    pub fn single_use() -> Self {
        Self::single("use", 0.60, 0.90)
    }

    /// MPNet-style single-encoder window, [0.70, 0.90].
    pub fn single_mpnet() -> Self {
        Self::single("mpnet", 0.70, 0.90)
    }

    /// Both encoders must agree: USE in [0.50, 0.90], MPNet in [0.70, 0.90],
    /// scores at most 0.20 apart.
    pub fn dual() -> Self {
        GatePolicy::Dual {
            use_id: "use".into(),
            mpnet_id: "mpnet".into(),
            use_lo: 0.50,
            use_hi: 0.90,
            mpnet_lo: 0.70,
            mpnet_hi: 0.90,
            max_diff: 0.20,
        }
    }

    pub fn encoder_ids(&self) -> Vec<&str> {
        match self {
            GatePolicy::Single { encoder_id, .. } => vec![encoder_id],
            GatePolicy::Dual { use_id, mpnet_id, .. } => vec![use_id, mpnet_id],
        }
    }

    pub fn validate(&self) -> Result<(), GateError> {
        let check_window = |name: &str, lo: f64, hi: f64| {
            if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) {
                return Err(GateError::InvalidPolicy(format!("{name} bounds must lie in [-1, 1]")));
            }
            if lo >= hi {
                return Err(GateError::InvalidPolicy(format!("{name}: lo must be below hi")));
            }
            Ok(())
        };
        match self {
            GatePolicy::Single { encoder_id, lo, hi } => check_window(encoder_id, *lo, *hi),
            GatePolicy::Dual {
                use_id,
                mpnet_id,
                use_lo,
                use_hi,
                mpnet_lo,
                mpnet_hi,
                max_diff,
            } => {
                check_window(use_id, *use_lo, *use_hi)?;
                check_window(mpnet_id, *mpnet_lo, *mpnet_hi)?;
                if use_id == mpnet_id {
                    return Err(GateError::InvalidPolicy("dual mode needs two distinct encoders".into()));
                }
                if max_diff.is_nan() || *max_diff < 0.0 {
                    return Err(GateError::InvalidPolicy("max_diff must be non-negative".into()));
                }
                Ok(())
            }
        }
    }
}

fn in_window(s: f64, lo: f64, hi: f64) -> bool {
    s <= NEAR_DUPLICATE_CEILING && lo <= s && s <= hi
}

fn score_for(scores: &HashMap<String, f64>, id: &str) -> Result<f64, GateError> {
    scores
        .get(id)
        .copied()
        .ok_or_else(|| GateError::MissingScore(id.to_string()))
}

/// Decides whether a paragraph with the given per-encoder scores is kept.
pub fn gate_paragraph(scores: &HashMap<String, f64>, policy: &GatePolicy) -> Result<bool, GateError> {
    match policy {
        GatePolicy::Single { encoder_id, lo, hi } => Ok(in_window(score_for(scores, encoder_id)?, *lo, *hi)),
        GatePolicy::Dual {
            use_id,
            mpnet_id,
            use_lo,
            use_hi,
            mpnet_lo,
            mpnet_hi,
            max_diff,
        } => {
            let s_use = score_for(scores, use_id)?;
            let s_mpnet = score_for(scores, mpnet_id)?;
            Ok(in_window(s_use, *use_lo, *use_hi)
                && in_window(s_mpnet, *mpnet_lo, *mpnet_hi)
                && (s_use - s_mpnet).abs() <= max_diff + DIFF_EPS)
        }
    }
}

/// Encoders available to the gate, keyed by id.
pub type EncoderSet = BTreeMap<String, Box<dyn Encoder>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildWarning {
    pub cve_id: String,
    pub message: String,
}

#[derive(Debug)]
pub struct BuildOutput {
    pub manifest: DatasetManifest,
    pub warnings: Vec<BuildWarning>,
}

fn with_terminal_period(text: &str) -> String {
    let t = text.trim_end();
    if t.ends_with('.') {
        t.to_string()
    } else {
        format!("{t}.")
    }
}

/// Orders paragraphs by the position of their URL in the record's reference
/// list, then by paragraph index.
fn ordered<'a>(rec: &VulnRecord, paragraphs: &'a [Paragraph]) -> Vec<&'a Paragraph> {
    let rank = |url: &str| rec.references.iter().position(|r| r == url).unwrap_or(usize::MAX);
    let mut out: Vec<&Paragraph> = paragraphs.iter().collect();
    out.sort_by(|a, b| {
        (rank(&a.source_url), &a.source_url, a.index).cmp(&(rank(&b.source_url), &b.source_url, b.index))
    });
    out
}

fn build_instance(
    rec: &VulnRecord,
    paragraphs: &[Paragraph],
    policy: &GatePolicy,
    encoders: &EncoderSet,
) -> Result<Option<AugmentedInstance>, String> {
    if rec.references.is_empty() || paragraphs.is_empty() {
        return Ok(None);
    }
    let paragraphs = ordered(rec, paragraphs);
    let mut texts = Vec::with_capacity(paragraphs.len() + 1);
    texts.push(rec.description.clone());
    texts.extend(paragraphs.iter().map(|p| p.cleaned.clone()));

    let mut per_encoder: Vec<(String, Vec<f64>)> = Vec::new();
    for id in policy.encoder_ids() {
        let enc = &encoders[id];
        let vecs = enc.encode(&texts).map_err(|e| format!("encoder `{id}`: {e}"))?;
        let (desc, paras) = vecs.split_first().ok_or("encoder returned no vectors")?;
        let scores = paras
            .iter()
            .map(|v| cosine(v, desc))
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| format!("encoder `{id}`: {e}"))?;
        per_encoder.push((id.to_string(), scores));
    }

    let mut sources = Vec::new();
    let mut parts = Vec::new();
    for (i, p) in paragraphs.iter().enumerate() {
        let scores: HashMap<String, f64> = per_encoder.iter().map(|(id, s)| (id.clone(), s[i])).collect();
        if gate_paragraph(&scores, policy).map_err(|e| e.to_string())? {
            parts.push(with_terminal_period(&p.cleaned));
            sources.push(SourceRef {
                url: p.source_url.clone(),
                paragraph_index: p.index,
                scores: scores.into_iter().collect(),
            });
        }
    }
    if sources.is_empty() {
        return Ok(None);
    }
    Ok(Some(AugmentedInstance {
        cve_id: rec.cve_id.clone(),
        description: rec.description.clone(),
        augmented_text: parts.join(" "),
        sources,
        label: None,
        grades: Vec::new(),
        generated: None,
    }))
}

/// Scores every cleaned paragraph against its CVE description and keeps the
/// ones the policy accepts. CVEs without references or without any accepted
/// paragraph are left out; encoder failures skip the CVE with a warning.
pub fn build_dataset(
    name: &str,
    records: &[VulnRecord],
    paragraphs: &BTreeMap<String, Vec<Paragraph>>,
    policy: &GatePolicy,
    encoders: &EncoderSet,
    created_at: DateTime<Utc>,
) -> Result<BuildOutput, GateError> {
    policy.validate()?;
    for id in policy.encoder_ids() {
        if !encoders.contains_key(id) {
            return Err(GateError::MissingEncoder(id.to_string()));
        }
    }
    let empty = Vec::new();
    let results: Vec<(String, Result<Option<AugmentedInstance>, String>)> = records
        .par_iter()
        .map(|rec| {
            let paras = paragraphs.get(&rec.cve_id).unwrap_or(&empty);
            (rec.cve_id.clone(), build_instance(rec, paras, policy, encoders))
        })
        .collect();

    let mut instances = Vec::new();
    let mut warnings = Vec::new();
    for (cve_id, r) in results {
        match r {
            Ok(Some(inst)) => instances.push(inst),
            Ok(None) => {}
            Err(message) => {
                warn!("{cve_id}: skipped: {message}");
                warnings.push(BuildWarning { cve_id, message });
            }
        }
    }
    instances.sort_by(|a, b| a.cve_id.cmp(&b.cve_id));
    let manifest = DatasetManifest::new(name, policy.clone(), Stage::Raw, created_at, instances)
        .map_err(|e| GateError::InvalidPolicy(e.to_string()))?;
    Ok(BuildOutput { manifest, warnings })
}
