//! Stage operations shared by the subcommands and the pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifacts::read_string;
use crate::config::{offline, AugmentConfig, OFFLINE_ENV};
use crate::CliError;
use vulnforge_core::acquire::{scrape_all, FetchPolicy, FixtureFetcher, LiveFetcher, PageFetcher};
use vulnforge_core::augment::{EncoderSet, GatePolicy};
use vulnforge_core::embed::Encoder;
use vulnforge_core::evalkit::{
    corpus_stats, default_gazetteer, entity_counts, mean_rouge1, rouge1, similarity_report, trigram_counts,
    CorpusStats, RougeScore, SimilarityReport,
};
use vulnforge_core::textprep::{prepare_paragraph, CleanPolicy};
use vulnforge_core::{DatasetManifest, Paragraph, VulnRecord};
use vulnforge_seq2seq::{generate, Checkpoint, DecodeConfig, TargetField};
use vulnforge_tokenize::{train_bpe, train_unigram, SubwordVocab, VocabKind};

/// Fixture fetcher when a directory is given, otherwise the live web unless
/// offline mode forbids it.
pub fn make_fetcher(fixtures: Option<&Path>, policy: &FetchPolicy) -> Result<Box<dyn PageFetcher>, CliError> {
    match fixtures {
        Some(dir) => Ok(Box::new(FixtureFetcher::open(dir).map_err(|source| {
            CliError::Read {
                path: dir.join("fixtures.json").display().to_string(),
                source,
            }
        })?)),
        None if offline() => Err(CliError::Usage(format!(
            "{OFFLINE_ENV}=1 forbids live fetching; pass a fixture directory"
        ))),
        None => Ok(Box::new(LiveFetcher::new(policy)?)),
    }
}

/// Reads a feed from a file path or an http(s) URL.
pub fn read_feed(src: &str, policy: &FetchPolicy) -> Result<Vec<u8>, CliError> {
    if src.starts_with("http://") || src.starts_with("https://") {
        if offline() {
            return Err(CliError::Usage(format!("{OFFLINE_ENV}=1 forbids fetching {src}")));
        }
        Ok(LiveFetcher::new(policy)?.fetch(src)?.body)
    } else {
        crate::artifacts::read_bytes(Path::new(src))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScrapeSummary {
    pub scraped: usize,
    pub kept: usize,
    pub page_failures: usize,
}

/// Scrapes every reference, cleans each paragraph and keeps those passing
/// the length gate.
pub fn scrape_clean(
    records: &[VulnRecord],
    policy: &FetchPolicy,
    clean: &CleanPolicy,
    fetcher: &dyn PageFetcher,
) -> (BTreeMap<String, Vec<Paragraph>>, ScrapeSummary) {
    let (raw, warnings) = scrape_all(records, policy, fetcher);
    let mut summary = ScrapeSummary {
        page_failures: warnings.len(),
        ..Default::default()
    };
    let mut kept = BTreeMap::new();
    for (id, paragraphs) in raw {
        summary.scraped += paragraphs.len();
        let ps: Vec<Paragraph> = paragraphs
            .into_iter()
            .filter_map(|mut p| prepare_paragraph(&mut p, clean).then_some(p))
            .collect();
        summary.kept += ps.len();
        if !ps.is_empty() {
            kept.insert(id, ps);
        }
    }
    (kept, summary)
}

/// One encoder per id the policy needs: remote when configured, builtin otherwise.
pub fn build_encoders(policy: &GatePolicy, augment: &AugmentConfig) -> Result<EncoderSet, CliError> {
    let mut set = EncoderSet::new();
    for id in policy.encoder_ids() {
        set.insert(id.to_string(), augment.encoder_spec(id).build()?);
    }
    Ok(set)
}

/// Texts a vocabulary is trained on: every augmented text, description and label.
pub fn tokenizer_corpus(manifest: &DatasetManifest) -> Vec<String> {
    let mut corpus = Vec::new();
    for inst in &manifest.instances {
        corpus.push(inst.augmented_text.clone());
        corpus.push(inst.description.clone());
        if let Some(l) = &inst.label {
            corpus.push(l.clone());
        }
    }
    corpus
}

pub fn train_vocab(kind: VocabKind, size: usize, corpus: &[String]) -> Result<SubwordVocab, CliError> {
    Ok(match kind {
        VocabKind::Bpe => train_bpe(corpus, size)?,
        VocabKind::Unigram => train_unigram(corpus, size)?,
    })
}

/// One generated summary with the reference it is scored against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub cve_id: String,
    pub generated: String,
    pub target: String,
    pub rouge1: RougeScore,
}

fn target_of(inst: &vulnforge_core::AugmentedInstance, target: TargetField) -> Option<&str> {
    match target {
        TargetField::Description => Some(&inst.description),
        TargetField::Label => inst.label.as_deref(),
    }
}

fn source_of(inst: &vulnforge_core::AugmentedInstance) -> &str {
    if inst.augmented_text.trim().is_empty() {
        &inst.description
    } else {
        &inst.augmented_text
    }
}

/// Generates a summary for each listed instance that has the chosen target.
pub fn generate_for(
    manifest: &DatasetManifest,
    ids: &[String],
    ckpt: &Checkpoint,
    vocab: &SubwordVocab,
    dcfg: &DecodeConfig,
    target: TargetField,
) -> Result<Vec<Generation>, CliError> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for inst in manifest.instances.iter().filter(|i| wanted.contains(i.cve_id.as_str())) {
        let Some(t) = target_of(inst, target) else { continue };
        let generated = generate(source_of(inst), &ckpt.params, vocab, dcfg)?;
        out.push(Generation {
            cve_id: inst.cve_id.clone(),
            rouge1: rouge1(&generated, t),
            generated,
            target: t.to_string(),
        });
    }
    Ok(out)
}

/// The manifest with `generated` filled in for the given generations.
pub fn attach_generations(manifest: &DatasetManifest, gens: &[Generation]) -> DatasetManifest {
    let by_id: BTreeMap<&str, &str> = gens.iter().map(|g| (g.cve_id.as_str(), g.generated.as_str())).collect();
    let mut m = manifest.clone();
    for inst in &mut m.instances {
        if let Some(g) = by_id.get(inst.cve_id.as_str()) {
            inst.generated = Some(g.to_string());
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub evaluated: usize,
    pub rouge1: RougeScore,
    pub similarity: SimilarityReport,
    pub generated_stats: CorpusStats,
    pub generated_entities: BTreeMap<String, usize>,
    pub generated_trigrams: Vec<(String, usize)>,
    pub generations: Vec<Generation>,
}

pub fn eval_report(
    gens: Vec<Generation>,
    encoder: &dyn Encoder,
    gazetteer: &[String],
    top_trigrams: usize,
) -> Result<EvalReport, CliError> {
    let pairs: Vec<(String, String)> = gens.iter().map(|g| (g.generated.clone(), g.target.clone())).collect();
    let texts: Vec<&str> = gens.iter().map(|g| g.generated.as_str()).collect();
    Ok(EvalReport {
        evaluated: gens.len(),
        rouge1: mean_rouge1(&pairs),
        similarity: similarity_report(&pairs, encoder)?,
        generated_stats: corpus_stats(&texts),
        generated_entities: nonzero(entity_counts(&texts, gazetteer)),
        generated_trigrams: trigram_counts(&texts, top_trigrams),
        generations: gens,
    })
}

fn nonzero(m: BTreeMap<String, usize>) -> BTreeMap<String, usize> {
    m.into_iter().filter(|(_, n)| *n > 0).collect()
}

/// Gazetteer from a file (one entry per line) or the bundled list.
pub fn load_gazetteer(path: Option<&Path>) -> Result<Vec<String>, CliError> {
    match path {
        None => Ok(default_gazetteer()),
        Some(p) => Ok(read_string(p)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub name: String,
    pub stage: String,
    pub instances: usize,
    pub descriptions: CorpusStats,
    pub augmented: CorpusStats,
    pub description_entities: BTreeMap<String, usize>,
    pub augmented_entities: BTreeMap<String, usize>,
    pub description_trigrams: Vec<(String, usize)>,
    pub augmented_trigrams: Vec<(String, usize)>,
}

pub fn stats_report(manifest: &DatasetManifest, gazetteer: &[String], top_trigrams: usize) -> StatsReport {
    let desc: Vec<&str> = manifest.instances.iter().map(|i| i.description.as_str()).collect();
    let aug: Vec<&str> = manifest.instances.iter().map(|i| i.augmented_text.as_str()).collect();
    StatsReport {
        name: manifest.name.clone(),
        stage: manifest.stage.to_string(),
        instances: manifest.instances.len(),
        descriptions: corpus_stats(&desc),
        augmented: corpus_stats(&aug),
        description_entities: nonzero(entity_counts(&desc, gazetteer)),
        augmented_entities: nonzero(entity_counts(&aug, gazetteer)),
        description_trigrams: trigram_counts(&desc, top_trigrams),
        augmented_trigrams: trigram_counts(&aug, top_trigrams),
    }
}
