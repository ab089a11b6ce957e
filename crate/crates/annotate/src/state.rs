//! Materialized annotation state: the manifest plus every ledger event.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::ledger::LedgerEvent;
use crate::AnnotateError;
use vulnforge_core::model::{GradeRecord, StudyRecord, RATING_RANGE};
use vulnforge_core::{AugmentedInstance, DatasetManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub annotator_id: String,
    pub summary: String,
    pub extractive_ratio: f64,
    pub at: DateTime<Utc>,
}

/// Everything known about one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleView {
    /// The manifest instance with `label` set to the most recent label and
    /// `grades` extended by the ledger's grade records.
    pub instance: AugmentedInstance,
    /// Current label of each annotator, ordered by annotator id.
    pub labels: Vec<LabelEntry>,
    pub study: Vec<StudyRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    All,
    Unlabeled,
    /// Has a generated summary but no grades yet.
    Ungraded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: String,
    pub description: String,
    pub labeled: bool,
    pub has_generated: bool,
    pub grade_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub count: usize,
    /// Metric name to mean; absent when there are no records.
    pub means: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub instances: usize,
    pub labeled: usize,
    pub mean_extractive_ratio: Option<f64>,
    pub grades: MetricMeans,
    pub study: MetricMeans,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationState {
    manifest: DatasetManifest,
    index: BTreeMap<String, usize>,
    /// id → annotator → (label, sequence number of the write).
    labels: BTreeMap<String, BTreeMap<String, (LabelEntry, u64)>>,
    grades: BTreeMap<String, Vec<GradeRecord>>,
    study: BTreeMap<String, Vec<StudyRecord>>,
    applied: u64,
}

fn check_range(kind: &str, values: &[(&'static str, u8)]) -> Result<(), AnnotateError> {
    for (name, v) in values {
        if !RATING_RANGE.contains(v) {
            return Err(AnnotateError::Validation(format!(
                "{kind} {name} = {v} is outside {}..={}",
                RATING_RANGE.start(),
                RATING_RANGE.end()
            )));
        }
    }
    Ok(())
}

fn check_person(field: &str, v: &str) -> Result<(), AnnotateError> {
    if v.trim().is_empty() {
        return Err(AnnotateError::Validation(format!("{field} must not be empty")));
    }
    Ok(())
}

impl AnnotationState {
    pub fn new(manifest: DatasetManifest) -> Self {
        let index = manifest
            .instances
            .iter()
            .enumerate()
            .map(|(i, inst)| (inst.cve_id.clone(), i))
            .collect();
        AnnotationState {
            manifest,
            index,
            labels: BTreeMap::new(),
            grades: BTreeMap::new(),
            study: BTreeMap::new(),
            applied: 0,
        }
    }

    /// Applies events in order, as on startup.
    pub fn replay(manifest: DatasetManifest, events: &[LedgerEvent]) -> Result<Self, AnnotateError> {
        let mut s = Self::new(manifest);
        for e in events {
            s.check(e)?;
            s.apply_unchecked(e.clone());
        }
        Ok(s)
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn events_applied(&self) -> u64 {
        self.applied
    }

    fn instance(&self, id: &str) -> Result<&AugmentedInstance, AnnotateError> {
        self.index
            .get(id)
            .map(|&i| &self.manifest.instances[i])
            .ok_or_else(|| AnnotateError::NotFound(id.to_string()))
    }

    /// Validates an event against the current state without applying it.
    pub fn check(&self, event: &LedgerEvent) -> Result<(), AnnotateError> {
        let inst = self.instance(event.id())?;
        match event {
            LedgerEvent::Label {
                summary,
                annotator_id,
                extractive_ratio,
                ..
            } => {
                check_person("annotator_id", annotator_id)?;
                if summary.trim().is_empty() {
                    return Err(AnnotateError::Validation("summary must not be empty".into()));
                }
                if !(0.0..=1.0).contains(extractive_ratio) {
                    return Err(AnnotateError::Validation("extractive_ratio must lie in [0, 1]".into()));
                }
            }
            LedgerEvent::Grades { record, .. } => {
                check_person("grader_id", &record.grader_id)?;
                check_range("grade", &record.values())?;
                if inst.generated.is_none() {
                    return Err(AnnotateError::Conflict(format!(
                        "{} has no generated summary to grade",
                        inst.cve_id
                    )));
                }
            }
            LedgerEvent::Study { record, .. } => {
                check_person("evaluator_id", &record.evaluator_id)?;
                check_range("study rating", &record.values())?;
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, event: LedgerEvent) -> Result<(), AnnotateError> {
        self.check(&event)?;
        self.apply_unchecked(event);
        Ok(())
    }

    fn apply_unchecked(&mut self, event: LedgerEvent) {
        self.applied += 1;
        match event {
            LedgerEvent::Label {
                id,
                annotator_id,
                summary,
                extractive_ratio,
                at,
            } => {
                let entry = LabelEntry {
                    annotator_id: annotator_id.clone(),
                    summary,
                    extractive_ratio,
                    at,
                };
                self.labels
                    .entry(id)
                    .or_default()
                    .insert(annotator_id, (entry, self.applied));
            }
            LedgerEvent::Grades { id, record } => self.grades.entry(id).or_default().push(record),
            LedgerEvent::Study { id, record } => self.study.entry(id).or_default().push(record),
        }
    }

    fn current_label(&self, id: &str) -> Option<&LabelEntry> {
        self.labels
            .get(id)?
            .values()
            .max_by_key(|(_, seq)| *seq)
            .map(|(e, _)| e)
    }

    pub fn view(&self, id: &str) -> Result<SampleView, AnnotateError> {
        let mut instance = self.instance(id)?.clone();
        if let Some(l) = self.current_label(id) {
            instance.label = Some(l.summary.clone());
        }
        if let Some(g) = self.grades.get(id) {
            instance.grades.extend(g.iter().cloned());
        }
        let labels = self
            .labels
            .get(id)
            .map(|m| m.values().map(|(e, _)| e.clone()).collect())
            .unwrap_or_default();
        Ok(SampleView {
            instance,
            labels,
            study: self.study.get(id).cloned().unwrap_or_default(),
        })
    }

    /// Samples matching `status`, ordered by id.
    pub fn list(&self, status: SampleStatus, limit: Option<usize>) -> Vec<SampleSummary> {
        self.index
            .keys()
            .map(|id| {
                let inst = &self.manifest.instances[self.index[id]];
                let grade_count = inst.grades.len() + self.grades.get(id).map_or(0, Vec::len);
                SampleSummary {
                    id: id.clone(),
                    description: inst.description.clone(),
                    labeled: inst.label.is_some() || self.current_label(id).is_some(),
                    has_generated: inst.generated.is_some(),
                    grade_count,
                }
            })
            .filter(|s| match status {
                SampleStatus::All => true,
                SampleStatus::Unlabeled => !s.labeled,
                SampleStatus::Ungraded => s.has_generated && s.grade_count == 0,
            })
            .take(limit.unwrap_or(usize::MAX))
            .collect()
    }

    /// Per-metric means over every grade and study record. Grades already
    /// present in the manifest count too.
    pub fn aggregates(&self) -> Aggregates {
        let mut grade_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut grade_count = 0;
        let manifest_grades = self.manifest.instances.iter().flat_map(|i| i.grades.iter());
        for g in manifest_grades.chain(self.grades.values().flatten()) {
            grade_count += 1;
            for (k, v) in g.values() {
                *grade_sums.entry(k.to_string()).or_default() += f64::from(v);
            }
        }
        let mut study_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut study_count = 0;
        for s in self.study.values().flatten() {
            study_count += 1;
            for (k, v) in s.values() {
                *study_sums.entry(k.to_string()).or_default() += f64::from(v);
            }
        }
        let means = |sums: BTreeMap<String, f64>, n: usize| MetricMeans {
            count: n,
            means: sums.into_iter().map(|(k, s)| (k, s / n as f64)).collect(),
        };
        let ratios: Vec<f64> = self
            .index
            .keys()
            .filter_map(|id| self.current_label(id).map(|l| l.extractive_ratio))
            .collect();
        let labeled = self.list(SampleStatus::All, None).iter().filter(|s| s.labeled).count();
        Aggregates {
            instances: self.index.len(),
            labeled,
            mean_extractive_ratio: (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
            grades: means(grade_sums, grade_count),
            study: means(study_sums, study_count),
        }
    }

    /// The manifest with the current labels and all grades folded in.
    pub fn materialized_manifest(&self) -> DatasetManifest {
        let mut m = self.manifest.clone();
        for inst in &mut m.instances {
            if let Some(l) = self.current_label(&inst.cve_id) {
                inst.label = Some(l.summary.clone());
            }
            if let Some(g) = self.grades.get(&inst.cve_id) {
                inst.grades.extend(g.iter().cloned());
            }
        }
        m
    }
}
