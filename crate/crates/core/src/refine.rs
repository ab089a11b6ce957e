//! Dataset quality enhancement: sentence de-duplication, word-frequency
//! vectors, greedy diversity selection and optional word capping.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, EmbedError, Encoder};
use crate::model::{AugmentedInstance, DatasetManifest, ManifestError, Stage};
use crate::textprep::{clean, filter_tokens, split_sentences, word_tokens, CleanPolicy};

/// Word cap used for the capped dataset variant.
pub const DEFAULT_CAP_WORDS: usize = 250;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("invalid refine policy: {0}")]
    Policy(String),
}

/// Denominator used when normalizing word counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqNormalization {
    /// Counts within one instance's augmented text.
    #[default]
    Instance,
    /// Counts across every instance of the manifest being refined.
    Corpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinePolicy {
    pub dedup_threshold: f64,
    pub diversity_threshold: f64,
    pub cap_words: Option<usize>,
    #[serde(default)]
    pub normalization: FreqNormalization,
}

impl Default for RefinePolicy {
    fn default() -> Self {
        RefinePolicy {
            dedup_threshold: 0.98,
            diversity_threshold: 0.5,
            cap_words: None,
            normalization: FreqNormalization::Instance,
        }
    }
}

impl RefinePolicy {
    pub fn capped(cap: usize) -> Self {
        RefinePolicy {
            cap_words: Some(cap),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        for (name, t) in [
            ("dedup_threshold", self.dedup_threshold),
            ("diversity_threshold", self.diversity_threshold),
        ] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(RefineError::Policy(format!("{name} must lie in (0, 1]")));
            }
        }
        if self.cap_words == Some(0) {
            return Err(RefineError::Policy("cap_words must be at least 1".into()));
        }
        Ok(())
    }

    fn output_stage(&self) -> Stage {
        if self.cap_words.is_some() {
            Stage::RefinedCapped
        } else {
            Stage::Refined
        }
    }
}

/// Word → count(word in sentence) / count(word in the normalizing text).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqVector {
    pub basis: String,
    pub entries: BTreeMap<String, f64>,
}

impl FreqVector {
    pub fn cosine(&self, other: &FreqVector) -> f64 {
        let (small, large) = if self.entries.len() <= other.entries.len() {
            (self, other)
        } else {
            (other, self)
        };
        let dot: f64 = small
            .entries
            .iter()
            .filter_map(|(w, a)| large.entries.get(w).map(|b| a * b))
            .sum();
        let na = self.entries.values().map(|v| v * v).sum::<f64>().sqrt();
        let nb = other.entries.values().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        (dot / (na * nb)).min(1.0)
    }
}

/// Sentence in the canonical form used throughout refinement: surrounding
/// whitespace and trailing periods removed.
fn normalize_sentence(s: &str) -> &str {
    s.trim_start().trim_end_matches(|c: char| c == '.' || c.is_whitespace())
}

pub fn sentences_of(text: &str) -> Vec<String> {
    split_sentences(text)
        .iter()
        .map(|s| normalize_sentence(s))
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Joins sentences with `". "` and a terminal period.
pub fn assemble(sentences: &[String]) -> String {
    if sentences.is_empty() {
        return String::new();
    }
    format!("{}.", sentences.join(". "))
}

/// Filtered lowercase tokens used as the frequency-vector vocabulary.
pub fn sentence_tokens(sentence: &str) -> Vec<String> {
    filter_tokens(&word_tokens(&clean(sentence, &CleanPolicy::default())))
}

/// Greedy forward pass: keeps a sentence iff its embedding cosine with every
/// previously kept sentence is below `threshold`.
pub fn dedup_sentences(sentences: &[String], encoder: &dyn Encoder, threshold: f64) -> Result<Vec<String>, EmbedError> {
    let vecs = encoder.encode(sentences)?;
    let mut kept: Vec<usize> = Vec::new();
    for (i, v) in vecs.iter().enumerate() {
        let mut distinct = true;
        for &k in &kept {
            if cosine(v, &vecs[k])? >= threshold {
                distinct = false;
                break;
            }
        }
        if distinct {
            kept.push(i);
        }
    }
    Ok(kept.into_iter().map(|i| sentences[i].clone()).collect())
}

/// Frequency vectors for a set of sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqVectors {
    /// Index into the input sentences paired with its vector.
    pub vectors: Vec<(usize, FreqVector)>,
    /// Sentences with no surviving tokens.
    pub dropped: Vec<usize>,
    pub lexicon: Vec<String>,
}

pub fn token_counts<'a>(token_lists: impl IntoIterator<Item = &'a Vec<String>>) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for tokens in token_lists {
        for t in tokens {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Builds per-sentence frequency vectors normalized by counts over all the
/// given sentences.
pub fn freq_vectors(sentences: &[String]) -> FreqVectors {
    freq_vectors_with(sentences, None, "instance")
}

/// As [`freq_vectors`], with an externally supplied denominator table (which
/// must cover at least the counts of `sentences`).
pub fn freq_vectors_with(
    sentences: &[String],
    denominators: Option<&HashMap<String, u64>>,
    basis: &str,
) -> FreqVectors {
    let tokens: Vec<Vec<String>> = sentences.iter().map(|s| sentence_tokens(s)).collect();
    let local;
    let totals = match denominators {
        Some(d) => d,
        None => {
            local = token_counts(&tokens);
            &local
        }
    };
    let mut lexicon: Vec<String> = tokens.iter().flatten().cloned().collect();
    lexicon.sort();
    lexicon.dedup();

    let mut vectors = Vec::new();
    let mut dropped = Vec::new();
    for (i, toks) in tokens.iter().enumerate() {
        if toks.is_empty() {
            dropped.push(i);
            continue;
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for t in toks {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
        let entries = counts
            .into_iter()
            .map(|(w, c)| {
                let total = totals.get(&w).copied().unwrap_or(c).max(c);
                (w, c as f64 / total as f64)
            })
            .collect();
        vectors.push((
            i,
            FreqVector {
                basis: basis.to_string(),
                entries,
            },
        ));
    }
    FreqVectors {
        vectors,
        dropped,
        lexicon,
    }
}

/// Greedy forward diversity selection over `(sentence, vector)` pairs.
/// Returns the positions (into `sentences`) that are kept.
pub fn diversity_select(sentences: &[String], vectors: &[FreqVector], policy: &RefinePolicy) -> Vec<usize> {
    assert_eq!(sentences.len(), vectors.len(), "vectors must align with sentences");
    let mut kept: Vec<usize> = Vec::new();
    let mut words = 0usize;
    for (i, v) in vectors.iter().enumerate() {
        if kept
            .iter()
            .any(|&k| v.cosine(&vectors[k]) >= policy.diversity_threshold)
        {
            continue;
        }
        let n = sentences[i].split_whitespace().count();
        if let Some(cap) = policy.cap_words {
            if words + n > cap {
                continue;
            }
        }
        words += n;
        kept.push(i);
    }
    kept
}

pub fn diversity_filter(sentences: &[String], vectors: &[FreqVector], policy: &RefinePolicy) -> Vec<String> {
    diversity_select(sentences, vectors, policy)
        .into_iter()
        .map(|i| sentences[i].clone())
        .collect()
}

fn refine_pass(
    sentences: &[String],
    policy: &RefinePolicy,
    encoder: &dyn Encoder,
    denominators: Option<&HashMap<String, u64>>,
) -> Result<Vec<String>, EmbedError> {
    let unique = dedup_sentences(sentences, encoder, policy.dedup_threshold)?;
    let basis = if denominators.is_some() { "corpus" } else { "instance" };
    let fv = freq_vectors_with(&unique, denominators, basis);
    let (idx, vecs): (Vec<usize>, Vec<FreqVector>) = fv.vectors.into_iter().unzip();
    let scored: Vec<String> = idx.iter().map(|&i| unique[i].clone()).collect();
    Ok(diversity_select(&scored, &vecs, policy)
        .into_iter()
        .map(|i| scored[i].clone())
        .collect())
}

/// Refines one instance's augmented text. Returns `Ok(None)` when every
/// sentence is filtered out.
///
/// The pass is repeated on its own output until nothing changes: frequency
/// normalization depends on the surviving sentences, so a single pass is not
/// guaranteed to be a fixed point.
pub fn refine_instance(
    inst: &AugmentedInstance,
    policy: &RefinePolicy,
    encoder: &dyn Encoder,
) -> Result<Option<AugmentedInstance>, RefineError> {
    refine_instance_with(inst, policy, encoder, None)
}

fn refine_instance_with(
    inst: &AugmentedInstance,
    policy: &RefinePolicy,
    encoder: &dyn Encoder,
    denominators: Option<&HashMap<String, u64>>,
) -> Result<Option<AugmentedInstance>, RefineError> {
    policy.validate()?;
    let mut current = sentences_of(&inst.augmented_text);
    loop {
        let next = refine_pass(&current, policy, encoder, denominators)?;
        if next == current {
            break;
        }
        current = next;
    }
    if current.is_empty() {
        return Ok(None);
    }
    Ok(Some(AugmentedInstance {
        augmented_text: assemble(&current),
        ..inst.clone()
    }))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefineWarning {
    pub cve_id: String,
    pub message: String,
}

/// Refines every instance in parallel and advances the manifest stage.
pub fn refine_manifest(
    m: &DatasetManifest,
    policy: &RefinePolicy,
    encoder: &dyn Encoder,
) -> Result<(DatasetManifest, Vec<RefineWarning>), RefineError> {
    policy.validate()?;
    let corpus_counts = match policy.normalization {
        FreqNormalization::Instance => None,
        FreqNormalization::Corpus => {
            let lists: Vec<Vec<String>> = m
                .instances
                .iter()
                .flat_map(|i| sentences_of(&i.augmented_text))
                .map(|s| sentence_tokens(&s))
                .collect();
            Some(token_counts(&lists))
        }
    };
    let results: Vec<Result<Option<AugmentedInstance>, RefineError>> = m
        .instances
        .par_iter()
        .map(|inst| refine_instance_with(inst, policy, encoder, corpus_counts.as_ref()))
        .collect();
    let mut instances = Vec::new();
    let mut warnings = Vec::new();
    for (inst, r) in m.instances.iter().zip(results) {
        match r? {
            Some(refined) => instances.push(refined),
            None => {
                warn!("{}: every sentence filtered out, instance dropped", inst.cve_id);
                warnings.push(RefineWarning {
                    cve_id: inst.cve_id.clone(),
                    message: "every sentence filtered out".into(),
                });
            }
        }
    }
    let out = m.advance(policy.output_stage(), instances)?;
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashBowEncoder;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn dedup_examples() {
        let enc = HashBowEncoder::new("use");
        assert_eq!(
            dedup_sentences(&s(&["same words", "same words"]), &enc, 0.98).unwrap(),
            s(&["same words"])
        );
        assert!(dedup_sentences(&[], &enc, 0.98).unwrap().is_empty());
    }

    #[test]
    fn near_duplicate_below_threshold_is_kept() {
        // 15 shared tokens plus one extra: cosine = 15 / sqrt(15 * 16) ≈ 0.968 when no
        // two tokens share a bucket, which the first assertion confirms.
        let enc = HashBowEncoder::new("use");
        let base: Vec<String> = (0..15).map(|i| format!("w{i}")).collect();
        let a = base.join(" ");
        let b = format!("{a} extra");
        let c = cosine(&enc.embed(&a), &enc.embed(&b)).unwrap();
        assert!(
            (c - (15.0f64 / (15.0f64 * 16.0).sqrt())).abs() < 1e-12,
            "fixture cosine {c}"
        );
        assert!(c < 0.98);
        assert_eq!(
            dedup_sentences(&[a.clone(), b.clone()], &enc, 0.98).unwrap(),
            vec![a, b]
        );
    }

    #[test]
    fn freq_vector_examples() {
        let fv = freq_vectors(&s(&["buffer overflow buffer"]));
        assert_eq!(fv.vectors.len(), 1);
        let e = &fv.vectors[0].1.entries;
        assert_eq!(e["buffer"], 1.0);
        assert_eq!(e["overflow"], 1.0);

        let fv = freq_vectors(&s(&["remote code", "code execution code"]));
        assert!((fv.vectors[0].1.entries["code"] - 1.0 / 3.0).abs() < 1e-15);
        assert!((fv.vectors[1].1.entries["code"] - 2.0 / 3.0).abs() < 1e-15);

        let fv = freq_vectors(&s(&["alpha beta", "gamma delta"]));
        let k0: Vec<_> = fv.vectors[0].1.entries.keys().collect();
        let k1: Vec<_> = fv.vectors[1].1.entries.keys().collect();
        assert!(k0.iter().all(|k| !k1.contains(k)));
        assert_eq!(fv.lexicon, s(&["alpha", "beta", "delta", "gamma"]));
    }

    #[test]
    fn stopword_only_sentence_is_dropped() {
        let fv = freq_vectors(&s(&["it is the", "kernel panic"]));
        assert_eq!(fv.dropped, vec![0]);
        assert_eq!(fv.vectors.len(), 1);
        assert_eq!(fv.vectors[0].0, 1);
    }

    #[test]
    fn diversity_examples() {
        let policy = RefinePolicy::default();
        let sents = s(&[
            "kernel driver crash",
            "kernel driver crash again",
            "browser sandbox escape",
        ]);
        let fv = freq_vectors(&sents);
        let vecs: Vec<FreqVector> = fv.vectors.into_iter().map(|(_, v)| v).collect();
        let kept = diversity_filter(&sents, &vecs, &policy);
        assert_eq!(kept, s(&["kernel driver crash", "browser sandbox escape"]));
    }

    #[test]
    fn cap_limits_running_word_total() {
        let policy = RefinePolicy::capped(5);
        let sents = s(&["alpha beta gamma", "delta epsilon zeta", "theta iota"]);
        let fv = freq_vectors(&sents);
        let vecs: Vec<FreqVector> = fv.vectors.into_iter().map(|(_, v)| v).collect();
        assert_eq!(
            diversity_filter(&sents, &vecs, &policy),
            s(&["alpha beta gamma", "theta iota"])
        );
    }

    fn inst(text: &str) -> AugmentedInstance {
        AugmentedInstance {
            cve_id: "CVE-2020-0001".into(),
            description: "d".into(),
            augmented_text: text.into(),
            sources: vec![],
            label: Some("keep me".into()),
            grades: vec![],
            generated: None,
        }
    }

    #[test]
    fn diverse_text_survives_unchanged() {
        let enc = HashBowEncoder::new("use");
        let text =
            "Kernel driver crash on boot. Browser sandbox escape via plugin. Database credentials leaked in logs.";
        let out = refine_instance(&inst(text), &RefinePolicy::default(), &enc)
            .unwrap()
            .unwrap();
        assert_eq!(out.augmented_text, text);
        assert_eq!(out.label.as_deref(), Some("keep me"));
    }

    #[test]
    fn repeated_sentence_collapses_to_one() {
        let enc = HashBowEncoder::new("use");
        let text = ["Remote attackers can execute arbitrary code"; 10].join(". ");
        let out = refine_instance(&inst(&text), &RefinePolicy::default(), &enc)
            .unwrap()
            .unwrap();
        assert_eq!(out.augmented_text, "Remote attackers can execute arbitrary code.");
    }

    #[test]
    fn all_filtered_instance_is_dropped() {
        let enc = HashBowEncoder::new("use");
        assert!(
            refine_instance(&inst("it is. to be. or not"), &RefinePolicy::default(), &enc)
                .unwrap()
                .is_none()
        );
    }

    #[test]
    fn policy_validation() {
        assert!(RefinePolicy::capped(0).validate().is_err());
        let p = RefinePolicy {
            diversity_threshold: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
