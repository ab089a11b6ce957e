//! Runs acquire → augment → refine → tokenize → train → eval over one
//! output directory and records a SHA-256 for every artifact.
//!
//! A failed stage marks itself failed and every later stage skipped. With
//! `only`, earlier stages are not rerun; their artifacts are hashed as they
//! are on disk and must already exist for the requested stage to succeed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifacts::{
    flatten_paragraphs, group_paragraphs, json_string, load_checkpoint, load_vocab, read_bytes, read_json, read_jsonl,
    save_checkpoint, save_vocab, sha256_file, sha256_hex, write_atomic, write_json, write_jsonl,
};
use crate::commands::{
    attach_generations, build_encoders, eval_report, generate_for, load_gazetteer, make_fetcher, scrape_clean,
    tokenizer_corpus, train_vocab,
};
use crate::config::RunConfig;
use crate::CliError;
use vulnforge_core::acquire::ingest_feed;
use vulnforge_core::augment::build_dataset;
use vulnforge_core::refine::refine_manifest;
use vulnforge_core::{DatasetManifest, VulnRecord};
use vulnforge_seq2seq::{train, Checkpoint, TrainReport};

pub const REPORT_FILE: &str = "run_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Acquire,
    Augment,
    Refine,
    Tokenize,
    Train,
    Eval,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 6] = [
        PipelineStage::Acquire,
        PipelineStage::Augment,
        PipelineStage::Refine,
        PipelineStage::Tokenize,
        PipelineStage::Train,
        PipelineStage::Eval,
    ];

    /// Files this stage writes, relative to the output directory.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            PipelineStage::Acquire => &["records.jsonl", "paragraphs.jsonl"],
            PipelineStage::Augment => &["manifest.jsonl"],
            PipelineStage::Refine => &["refined.jsonl"],
            PipelineStage::Tokenize => &["vocab.json"],
            PipelineStage::Train => &["model.json", "train_report.json"],
            PipelineStage::Eval => &["eval_report.json", "generated.jsonl"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PipelineStage::Acquire => "acquire",
            PipelineStage::Augment => "augment",
            PipelineStage::Refine => "refine",
            PipelineStage::Tokenize => "tokenize",
            PipelineStage::Train => "train",
            PipelineStage::Eval => "eval",
        }
    }
}

impl std::str::FromStr for PipelineStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        PipelineStage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
    Reused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: PipelineStage,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<ArtifactHash>,
    /// Counts describing what the stage did.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub summary: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<ArtifactHash>,
    pub stages: Vec<StageReport>,
    /// SHA-256 over every field above.
    pub report_hash: String,
}

impl RunReport {
    /// True when no stage failed and every requested stage ran.
    pub fn success(&self) -> bool {
        self.stages.iter().all(|s| s.status != StageStatus::Failed)
    }

    pub fn stage(&self, stage: PipelineStage) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

type Summary = BTreeMap<String, Value>;

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
}

impl Ctx<'_> {
    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn hash(&self) -> Option<&str> {
        Some(self.cfg.config_hash())
    }

    fn load_manifest(&self, file: &str) -> Result<DatasetManifest, CliError> {
        Ok(DatasetManifest::load(self.path(file))?)
    }

    fn save_manifest(&self, file: &str, mut m: DatasetManifest) -> Result<DatasetManifest, CliError> {
        m.config_hash = self.hash().map(str::to_string);
        write_atomic(&self.path(file), m.to_jsonl_string()?.as_bytes())?;
        Ok(m)
    }
}

fn summary(pairs: &[(&str, Value)]) -> Summary {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn acquire(ctx: &Ctx) -> Result<Summary, CliError> {
    let a = &ctx.cfg.acquire;
    let policy = a.fetch_policy();
    let records = ingest_feed(&read_bytes(&a.feed)?, &policy)?;
    let fetcher = make_fetcher(a.fixtures.as_deref(), &policy)?;
    let (paragraphs, s) = scrape_clean(&records, &policy, &a.clean_policy(), fetcher.as_ref());
    write_jsonl(&ctx.path("records.jsonl"), "records", ctx.hash(), &records)?;
    write_jsonl(
        &ctx.path("paragraphs.jsonl"),
        "paragraphs",
        ctx.hash(),
        &flatten_paragraphs(&paragraphs),
    )?;
    Ok(summary(&[
        ("records", json!(records.len())),
        ("paragraphs_scraped", json!(s.scraped)),
        ("paragraphs_kept", json!(s.kept)),
        ("page_failures", json!(s.page_failures)),
    ]))
}

fn augment(ctx: &Ctx) -> Result<Summary, CliError> {
    let records: Vec<VulnRecord> = read_jsonl(&ctx.path("records.jsonl"))?;
    let paragraphs = group_paragraphs(read_jsonl(&ctx.path("paragraphs.jsonl"))?);
    let policy = ctx.cfg.augment.policy.policy();
    let encoders = build_encoders(&policy, &ctx.cfg.augment)?;
    let out = build_dataset(
        &ctx.cfg.name,
        &records,
        &paragraphs,
        &policy,
        &encoders,
        ctx.cfg.created_at(),
    )?;
    let m = ctx.save_manifest("manifest.jsonl", out.manifest)?;
    Ok(summary(&[
        ("instances", json!(m.instances.len())),
        ("encoder_failures", json!(out.warnings.len())),
    ]))
}

fn refine(ctx: &Ctx) -> Result<Summary, CliError> {
    let m = ctx.load_manifest("manifest.jsonl")?;
    let encoder = ctx.cfg.primary_encoder().build()?;
    let (refined, warnings) = refine_manifest(&m, &ctx.cfg.refine.policy(), encoder.as_ref())?;
    let words = |m: &DatasetManifest| -> usize {
        m.instances
            .iter()
            .map(|i| i.augmented_text.split_whitespace().count())
            .sum()
    };
    let before = words(&m);
    let refined = ctx.save_manifest("refined.jsonl", refined)?;
    Ok(summary(&[
        ("instances", json!(refined.instances.len())),
        ("dropped", json!(warnings.len())),
        ("words_before", json!(before)),
        ("words_after", json!(words(&refined))),
    ]))
}

fn tokenize(ctx: &Ctx) -> Result<Summary, CliError> {
    let m = ctx.load_manifest("refined.jsonl")?;
    let t = &ctx.cfg.tokenize;
    let vocab = train_vocab(t.kind, t.size, &tokenizer_corpus(&m))?;
    save_vocab(&ctx.path("vocab.json"), &vocab, ctx.hash())?;
    Ok(summary(&[
        ("tokens", json!(vocab.len())),
        ("ids", json!(vocab.id_count())),
    ]))
}

fn train_stage(ctx: &Ctx) -> Result<Summary, CliError> {
    let m = ctx.load_manifest("refined.jsonl")?;
    let vocab = load_vocab(&ctx.path("vocab.json"))?;
    let tc = &ctx.cfg.train;
    let mcfg = tc.model_config(vocab.id_count());
    let tcfg = tc.train_config(ctx.cfg.seed, &ctx.cfg.eval);
    let (params, report) = train(&m, tc.target, &vocab, &tcfg, &mcfg)?;
    let ckpt = Checkpoint {
        params,
        vocab: Some(vocab),
    };
    save_checkpoint(&ctx.path("model.json"), &ckpt, ctx.hash())?;
    write_json(&ctx.path("train_report.json"), &report, ctx.hash())?;
    let last = report.curves.last();
    Ok(summary(&[
        ("steps", json!(report.steps)),
        ("train", json!(report.train_ids.len())),
        ("val", json!(report.val_ids.len())),
        ("test", json!(report.test_ids.len())),
        ("final_train_loss", json!(last.map(|c| c.train_loss))),
        ("final_val_accuracy", json!(last.and_then(|c| c.val_accuracy))),
    ]))
}

fn eval(ctx: &Ctx) -> Result<Summary, CliError> {
    let m = ctx.load_manifest("refined.jsonl")?;
    let ckpt = load_checkpoint(&ctx.path("model.json"))?;
    let vocab = match &ckpt.vocab {
        Some(v) => v.clone(),
        None => load_vocab(&ctx.path("vocab.json"))?,
    };
    let report: TrainReport = read_json(&ctx.path("train_report.json"))?;
    // Tiny datasets can round the test split down to nothing; fall back to
    // validation, then to everything, so the stage always reports something.
    let ids = [&report.test_ids, &report.val_ids, &report.train_ids]
        .into_iter()
        .find(|ids| !ids.is_empty())
        .cloned()
        .unwrap_or_default();
    let dcfg = ctx.cfg.eval.decode_config(ctx.cfg.seed);
    let gens = generate_for(&m, &ids, &ckpt, &vocab, &dcfg, ctx.cfg.train.target)?;
    let encoder = ctx.cfg.primary_encoder().build()?;
    let gazetteer = load_gazetteer(ctx.cfg.eval.gazetteer.as_deref())?;
    let exported = attach_generations(&m, &gens);
    let er = eval_report(gens, encoder.as_ref(), &gazetteer, ctx.cfg.eval.top_trigrams)?;
    write_json(&ctx.path("eval_report.json"), &er, ctx.hash())?;
    ctx.save_manifest("generated.jsonl", exported)?;
    Ok(summary(&[
        ("evaluated", json!(er.evaluated)),
        ("rouge1_f1", json!(er.rouge1.f1)),
        ("mean_similarity", json!(er.similarity.mean)),
    ]))
}

fn run_stage(ctx: &Ctx, stage: PipelineStage) -> Result<Summary, CliError> {
    match stage {
        PipelineStage::Acquire => acquire(ctx),
        PipelineStage::Augment => augment(ctx),
        PipelineStage::Refine => refine(ctx),
        PipelineStage::Tokenize => tokenize(ctx),
        PipelineStage::Train => train_stage(ctx),
        PipelineStage::Eval => eval(ctx),
    }
}

fn hash_outputs(out: &Path, stage: PipelineStage) -> Result<Vec<ArtifactHash>, CliError> {
    stage
        .outputs()
        .iter()
        .map(|f| {
            Ok(ArtifactHash {
                file: f.to_string(),
                sha256: sha256_file(&out.join(f))?,
            })
        })
        .collect()
}

fn outputs_present(out: &Path, stage: PipelineStage) -> bool {
    stage.outputs().iter().all(|f| out.join(f).is_file())
}

fn input_hashes(cfg: &RunConfig) -> Result<Vec<ArtifactHash>, CliError> {
    let mut inputs = vec![ArtifactHash {
        file: "feed".into(),
        sha256: sha256_file(&cfg.acquire.feed)?,
    }];
    if let Some(dir) = &cfg.acquire.fixtures {
        inputs.push(ArtifactHash {
            file: "fixtures.json".into(),
            sha256: sha256_file(&dir.join("fixtures.json"))?,
        });
    }
    Ok(inputs)
}

fn finish(mut report: RunReport) -> Result<RunReport, CliError> {
    report.report_hash = String::new();
    let mut v = serde_json::to_value(&report)?;
    if let Some(map) = v.as_object_mut() {
        map.remove("report_hash");
    }
    report.report_hash = sha256_hex(v.to_string().as_bytes());
    Ok(report)
}

/// Validates the config, runs the requested stages and writes
/// `run_report.json` into the output directory. Only configuration and
/// report-writing problems are errors; stage failures live in the report.
pub fn run_pipeline(cfg: &RunConfig, only: Option<PipelineStage>) -> Result<RunReport, CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let ctx = Ctx {
        cfg,
        out: cfg.out_dir.clone(),
    };
    let mut stages = Vec::new();
    let mut blocked = false;
    for stage in PipelineStage::ALL {
        let requested = only.is_none_or(|o| o == stage);
        let upstream = only.is_some_and(|o| stage < o);
        let report = if upstream {
            if outputs_present(&ctx.out, stage) {
                StageReport {
                    stage,
                    status: StageStatus::Reused,
                    outputs: hash_outputs(&ctx.out, stage)?,
                    summary: Summary::new(),
                    error: None,
                }
            } else {
                // The requested stage will fail on the missing input.
                StageReport {
                    stage,
                    status: StageStatus::Skipped,
                    outputs: Vec::new(),
                    summary: Summary::new(),
                    error: Some(format!("artifacts missing; run `{}` first", stage.name())),
                }
            }
        } else if !requested || blocked {
            StageReport {
                stage,
                status: StageStatus::Skipped,
                outputs: Vec::new(),
                summary: Summary::new(),
                error: None,
            }
        } else {
            log::info!("stage {}", stage.name());
            match run_stage(&ctx, stage).and_then(|s| Ok((s, hash_outputs(&ctx.out, stage)?))) {
                Ok((summary, outputs)) => StageReport {
                    stage,
                    status: StageStatus::Ok,
                    outputs,
                    summary,
                    error: None,
                },
                Err(e) => {
                    log::error!("stage {} failed: {e}", stage.name());
                    blocked = true;
                    StageReport {
                        stage,
                        status: StageStatus::Failed,
                        outputs: Vec::new(),
                        summary: Summary::new(),
                        error: Some(e.to_string()),
                    }
                }
            }
        };
        stages.push(report);
    }
    let report = finish(RunReport {
        config_hash: cfg.config_hash().to_string(),
        seed: cfg.seed,
        inputs: input_hashes(cfg)?,
        stages,
        report_hash: String::new(),
    })?;
    write_atomic(&ctx.path(REPORT_FILE), json_string(&report, None)?.as_bytes())?;
    Ok(report)
}
