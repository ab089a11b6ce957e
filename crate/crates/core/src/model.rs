//! Shared domain types and the `manifest.jsonl` dataset format.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use chrono::{DateTime, SecondsFormat, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::augment::GatePolicy;

/// A CVE entry as it comes out of the feed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnRecord {
    pub cve_id: String,
    pub description: String,
    pub published_year: i32,
    #[serde(default)]
    pub references: Vec<String>,
}

fn cve_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^CVE-\d{4}-\d{4,}$").unwrap())
}

/// Whether `id` has the `CVE-YYYY-NNNN...` shape.
pub fn is_valid_cve_id(id: &str) -> bool {
    cve_pattern().is_match(id)
}

/// One `<p>` element scraped from a reference page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub source_url: String,
    pub index: usize,
    pub raw: String,
    #[serde(default)]
    pub cleaned: String,
    #[serde(default)]
    pub word_count: usize,
}

impl Paragraph {
    pub fn new(source_url: impl Into<String>, index: usize, raw: impl Into<String>) -> Self {
        Paragraph {
            source_url: source_url.into(),
            index,
            raw: raw.into(),
            cleaned: String::new(),
            word_count: 0,
        }
    }

    /// Sets `cleaned` and keeps `word_count` in sync with it.
    pub fn set_cleaned(&mut self, cleaned: String) {
        self.word_count = cleaned.split_whitespace().count();
        self.cleaned = cleaned;
    }
}

/// Provenance of one accepted paragraph inside an augmented text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub url: String,
    pub paragraph_index: usize,
    /// Cosine similarity to the description, keyed by encoder id.
    pub scores: BTreeMap<String, f64>,
}

/// Human grading of a generated summary, each metric on a 1..=3 scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub fluency: u8,
    pub completeness: u8,
    pub correctness: u8,
    pub understanding: u8,
    pub grader_id: String,
    pub graded_at: DateTime<Utc>,
}

impl GradeRecord {
    pub fn values(&self) -> [(&'static str, u8); 4] {
        [
            ("fluency", self.fluency),
            ("completeness", self.completeness),
            ("correctness", self.correctness),
            ("understanding", self.understanding),
        ]
    }
}

/// User-study rating of an enriched description against the original.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub enrichment: u8,
    pub accuracy: u8,
    pub understanding: u8,
    pub evaluator_id: String,
}

impl StudyRecord {
    pub fn values(&self) -> [(&'static str, u8); 3] {
        [
            ("enrichment", self.enrichment),
            ("accuracy", self.accuracy),
            ("understanding", self.understanding),
        ]
    }
}

/// Inclusive range shared by every human rating scale.
pub const RATING_RANGE: std::ops::RangeInclusive<u8> = 1..=3;

/// One training pair: augmented text as input, description (or label) as target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedInstance {
    pub cve_id: String,
    pub description: String,
    pub augmented_text: String,
    #[serde(default)]
    pub sources: Vec<SourceRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grades: Vec<GradeRecord>,
    /// Model output attached for grading by `vulnforge export --with-generations`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Refined,
    RefinedCapped,
}

impl Stage {
    /// Stages only move forward: raw → refined → refined_capped.
    pub fn can_advance_to(self, next: Stage) -> bool {
        matches!(
            (self, next),
            (Stage::Raw, Stage::Refined) | (Stage::Raw, Stage::RefinedCapped) | (Stage::Refined, Stage::RefinedCapped)
        )
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Raw => "raw",
            Stage::Refined => "refined",
            Stage::RefinedCapped => "refined_capped",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("duplicate cve_id {0}")]
    DuplicateId(String),
    #[error("manifest has no instances")]
    Empty,
    #[error("manifest is missing its header line")]
    MissingHeader,
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("illegal stage transition {from} -> {to}")]
    StageTransition { from: Stage, to: Stage },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Header line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub name: String,
    pub encoder_policy: GatePolicy,
    pub stage: Stage,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub encoder_policy: GatePolicy,
    pub stage: Stage,
    pub created_at: DateTime<Utc>,
    pub config_hash: Option<String>,
    pub instances: Vec<AugmentedInstance>,
}

impl DatasetManifest {
    /// Builds a manifest, rejecting duplicate CVE ids.
    pub fn new(
        name: impl Into<String>,
        encoder_policy: GatePolicy,
        stage: Stage,
        created_at: DateTime<Utc>,
        instances: Vec<AugmentedInstance>,
    ) -> Result<Self, ManifestError> {
        check_unique(&instances)?;
        Ok(DatasetManifest {
            name: name.into(),
            encoder_policy,
            stage,
            created_at,
            config_hash: None,
            instances,
        })
    }

    pub fn header(&self) -> ManifestHeader {
        ManifestHeader {
            name: self.name.clone(),
            encoder_policy: self.encoder_policy.clone(),
            stage: self.stage,
            created_at: self.created_at,
            config_hash: self.config_hash.clone(),
        }
    }

    /// Returns a copy at a later stage with replaced instances.
    pub fn advance(&self, stage: Stage, instances: Vec<AugmentedInstance>) -> Result<Self, ManifestError> {
        if !self.stage.can_advance_to(stage) {
            return Err(ManifestError::StageTransition {
                from: self.stage,
                to: stage,
            });
        }
        check_unique(&instances)?;
        Ok(DatasetManifest {
            stage,
            instances,
            ..self.clone()
        })
    }

    pub fn get(&self, cve_id: &str) -> Option<&AugmentedInstance> {
        self.instances.iter().find(|i| i.cve_id == cve_id)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), ManifestError> {
        if self.instances.is_empty() {
            return Err(ManifestError::Empty);
        }
        let header = HeaderLine {
            name: &self.name,
            encoder_policy: &self.encoder_policy,
            stage: self.stage,
            created_at: self.created_at.to_rfc3339_opts(SecondsFormat::AutoSi, true),
            config_hash: self.config_hash.as_deref(),
        };
        serde_json::to_writer(&mut out, &header).map_err(|e| json_err(1, e))?;
        out.write_all(b"\n")?;
        for (i, inst) in self.instances.iter().enumerate() {
            serde_json::to_writer(&mut out, inst).map_err(|e| json_err(i + 2, e))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> Result<String, ManifestError> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, ManifestError> {
        let mut lines = input.lines().enumerate();
        let header: ManifestHeader = loop {
            match lines.next() {
                None => return Err(ManifestError::MissingHeader),
                Some((_, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| json_err(1, e))?;
                }
            }
        };
        let mut instances = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            instances.push(serde_json::from_str(&line).map_err(|e| json_err(i + 1, e))?);
        }
        let mut m = DatasetManifest::new(
            header.name,
            header.encoder_policy,
            header.stage,
            header.created_at,
            instances,
        )?;
        m.config_hash = header.config_hash;
        Ok(m)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ManifestError> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), ManifestError> {
        let f = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }
}

#[derive(Serialize)]
struct HeaderLine<'a> {
    name: &'a str,
    encoder_policy: &'a GatePolicy,
    stage: Stage,
    created_at: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<&'a str>,
}

fn json_err(line: usize, source: serde_json::Error) -> ManifestError {
    ManifestError::Json { line, source }
}

fn check_unique(instances: &[AugmentedInstance]) -> Result<(), ManifestError> {
    let mut seen = HashSet::with_capacity(instances.len());
    for inst in instances {
        if !seen.insert(inst.cve_id.as_str()) {
            return Err(ManifestError::DuplicateId(inst.cve_id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    EmptyManifest,
    InvalidCveId,
    DuplicateCveId,
    EmptyDescription,
    EmptyAugmentedText,
    ScoreOutOfRange {
        url: String,
        encoder_id: String,
        score: f64,
    },
    EmptyLabel,
    GradeOutOfRange {
        metric: &'static str,
        value: u8,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Position of the offending instance, `None` for manifest-level problems.
    pub instance: Option<usize>,
    pub cve_id: Option<String>,
    pub kind: ViolationKind,
}

/// Checks every type invariant; an empty result means the manifest is well formed.
pub fn validate_manifest(m: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    if m.instances.is_empty() {
        out.push(Violation {
            instance: None,
            cve_id: None,
            kind: ViolationKind::EmptyManifest,
        });
    }
    let mut seen = HashSet::new();
    for (i, inst) in m.instances.iter().enumerate() {
        let mut push = |kind| {
            out.push(Violation {
                instance: Some(i),
                cve_id: Some(inst.cve_id.clone()),
                kind,
            })
        };
        if !is_valid_cve_id(&inst.cve_id) {
            push(ViolationKind::InvalidCveId);
        }
        if !seen.insert(inst.cve_id.as_str()) {
            push(ViolationKind::DuplicateCveId);
        }
        if inst.description.trim().is_empty() {
            push(ViolationKind::EmptyDescription);
        }
        if inst.augmented_text.trim().is_empty() {
            push(ViolationKind::EmptyAugmentedText);
        }
        for src in &inst.sources {
            for (enc, &score) in &src.scores {
                if !(score.is_finite() && (-1.0..=1.0).contains(&score)) {
                    push(ViolationKind::ScoreOutOfRange {
                        url: src.url.clone(),
                        encoder_id: enc.clone(),
                        score,
                    });
                }
            }
        }
        if matches!(&inst.label, Some(l) if l.trim().is_empty()) {
            push(ViolationKind::EmptyLabel);
        }
        for g in &inst.grades {
            for (metric, value) in g.values() {
                if !RATING_RANGE.contains(&value) {
                    push(ViolationKind::GradeOutOfRange { metric, value });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::GatePolicy;
    use chrono::TimeZone;

    pub(crate) fn instance(id: &str) -> AugmentedInstance {
        AugmentedInstance {
            cve_id: id.to_string(),
            description: "A heap overflow in the parser.".into(),
            augmented_text: "The parser overflows its heap buffer.".into(),
            sources: vec![SourceRef {
                url: "https://example.org/a".into(),
                paragraph_index: 0,
                scores: [("builtin".to_string(), 0.7)].into_iter().collect(),
            }],
            label: None,
            grades: vec![],
            generated: None,
        }
    }

    fn manifest(instances: Vec<AugmentedInstance>) -> DatasetManifest {
        DatasetManifest {
            name: "t".into(),
            encoder_policy: GatePolicy::single_use(),
            stage: Stage::Raw,
            created_at: Utc.with_ymd_and_hms(2024, 1, 2, 3, 4, 5).unwrap(),
            config_hash: None,
            instances,
        }
    }

    #[test]
    fn well_formed_manifest_has_no_violations() {
        assert!(validate_manifest(&manifest(vec![instance("CVE-2020-1234")])).is_empty());
    }

    #[test]
    fn empty_augmented_text_is_flagged() {
        let mut inst = instance("CVE-2020-1234");
        inst.augmented_text.clear();
        let v = validate_manifest(&manifest(vec![inst]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].instance, Some(0));
        assert_eq!(v[0].kind, ViolationKind::EmptyAugmentedText);
    }

    #[test]
    fn score_out_of_range_is_flagged() {
        let mut inst = instance("CVE-2020-1234");
        inst.sources[0].scores.insert("builtin".into(), 1.3);
        let v = validate_manifest(&manifest(vec![inst]));
        assert!(matches!(
            v.as_slice(),
            [Violation { kind: ViolationKind::ScoreOutOfRange { score, .. }, .. }] if *score == 1.3
        ));
    }

    #[test]
    fn duplicate_ids_rejected_on_construction() {
        let err = DatasetManifest::new(
            "t",
            GatePolicy::single_use(),
            Stage::Raw,
            Utc::now(),
            vec![instance("CVE-2020-1234"), instance("CVE-2020-1234")],
        )
        .unwrap_err();
        assert!(matches!(err, ManifestError::DuplicateId(id) if id == "CVE-2020-1234"));
    }

    #[test]
    fn stage_only_moves_forward() {
        let m = manifest(vec![instance("CVE-2020-1234")]);
        let refined = m.advance(Stage::Refined, m.instances.clone()).unwrap();
        assert!(refined.advance(Stage::Raw, vec![]).is_err());
        assert!(refined.advance(Stage::RefinedCapped, m.instances.clone()).is_ok());
    }

    #[test]
    fn jsonl_layout_omits_absent_optional_keys() {
        let m = manifest(vec![instance("CVE-2020-1234")]);
        let text = m.to_jsonl_string().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(header["created_at"], "2024-01-02T03:04:05Z");
        assert_eq!(header["stage"], "raw");
        assert!(!lines[1].contains("null"));
        assert!(!lines[1].contains("\"label\""));
        assert!(!lines[1].contains("\"grades\""));
    }

    #[test]
    fn empty_manifest_is_not_persisted() {
        assert!(matches!(manifest(vec![]).to_jsonl_string(), Err(ManifestError::Empty)));
    }

    #[test]
    fn cve_id_shape() {
        assert!(is_valid_cve_id("CVE-2021-44228"));
        assert!(is_valid_cve_id("CVE-2019-1234"));
        assert!(!is_valid_cve_id("CVE-2019-123"));
        assert!(!is_valid_cve_id("cve-2019-1234"));
    }
}
