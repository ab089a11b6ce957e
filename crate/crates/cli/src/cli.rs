//! Argument parsing and dispatch for the `vulnforge` binary.

use std::ffi::OsString;
use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    flatten_paragraphs, group_paragraphs, json_string, load_checkpoint, load_vocab, read_jsonl, read_string,
    save_checkpoint, save_vocab, write_atomic, write_json, write_jsonl,
};
use crate::commands::{
    attach_generations, build_encoders, generate_for, load_gazetteer, make_fetcher, read_feed, scrape_clean,
    stats_report, tokenizer_corpus, train_vocab,
};
use crate::config::{PolicyName, RemoteEncoder, RunConfig};
use crate::pipeline::{run_pipeline, PipelineStage};
use crate::CliError;
use vulnforge_annotate::{router, serve, AppState, TOKEN_ENV};
use vulnforge_core::acquire::{ingest_feed, FetchPolicy};
use vulnforge_core::augment::build_dataset;
use vulnforge_core::embed::EncoderSpec;
use vulnforge_core::evalkit::{mean_rouge1, rouge1};
use vulnforge_core::refine::{refine_manifest, RefinePolicy};
use vulnforge_core::textprep::CleanPolicy;
use vulnforge_core::{DatasetManifest, VulnRecord};
use vulnforge_seq2seq::{generate, train, Checkpoint, DecodeConfig, ModelConfig, Strategy, TargetField, TrainConfig};
use vulnforge_tokenize::VocabKind;

#[derive(Debug, Parser)]
#[command(name = "vulnforge", version, about = "Vulnerability description enrichment toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse an NVD JSON feed into records.jsonl.
    Ingest {
        #[arg(long)]
        feed: String,
        /// Publication years to keep, e.g. 2019..2021 (inclusive).
        #[arg(long, default_value = "2019..2021", value_parser = parse_years)]
        years: (i32, i32),
        #[arg(long)]
        out: PathBuf,
    },
    /// Scrape, clean and length-gate reference paragraphs.
    Scrape {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, conflicts_with = "live", required_unless_present = "live")]
        fixtures: Option<PathBuf>,
        #[arg(long)]
        live: bool,
        #[arg(long, default_value_t = 20)]
        min_words: usize,
        #[arg(long, default_value_t = 100)]
        max_paragraphs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gate paragraphs by similarity and write a raw manifest.
    Build {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        paragraphs: PathBuf,
        #[arg(long, default_value = "single-use")]
        policy: PolicyName,
        /// Use an embedding service for one encoder id: `id=url@dimension`.
        #[arg(long, value_parser = parse_remote)]
        remote: Vec<(String, RemoteEncoder)>,
        #[arg(long, default_value = "vulnforge")]
        name: String,
        /// Manifest timestamp (RFC 3339); now when absent.
        #[arg(long)]
        created_at: Option<chrono::DateTime<chrono::Utc>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deduplicate and diversify augmented texts.
    Refine {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, conflicts_with = "no_cap")]
        cap: Option<usize>,
        #[arg(long)]
        no_cap: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed texts (one JSON string or {"text": ...} per line).
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        /// `builtin` or `remote:<url>`.
        #[arg(long, default_value = "builtin")]
        encoder: String,
        #[arg(long, default_value = "use")]
        id: String,
        /// Required for remote encoders.
        #[arg(long)]
        dimension: Option<usize>,
        /// Output JSON lines; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sub-word vocabularies.
    #[command(subcommand)]
    Tok(TokCommand),
    /// Train the summarization model on a manifest.
    Train(TrainArgs),
    /// Summarize one text with a trained model.
    Generate {
        #[arg(long)]
        model: PathBuf,
        /// Text to summarize; stdin when absent.
        #[arg(long = "in")]
        input: Option<String>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Write a manifest for annotation, optionally with model outputs attached.
    Export {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, requires = "model")]
        with_generations: bool,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "description")]
        target: Target,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Corpus statistics, entity and trigram counts for a manifest.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        gazetteer: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        top_trigrams: usize,
    },
    /// Serve the annotation API (and optionally the UI bundle).
    Serve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// Serve without a bearer token.
        #[arg(long)]
        no_auth: bool,
    },
    /// Run the configured pipeline.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_stage)]
        only: Option<PipelineStage>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TokCommand {
    /// Train a vocabulary on a manifest or a text file (one document per line).
    Train {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the tokens and ids of a text.
    Encode {
        #[arg(long)]
        vocab: PathBuf,
        /// Text to encode; stdin when absent.
        #[arg(long)]
        text: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Mean and per-line ROUGE-1 of line-aligned prediction and reference files.
    Rouge {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// JSON report; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    Bpe,
    Unigram,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Target {
    Description,
    Label,
}

impl From<Target> for TargetField {
    fn from(t: Target) -> Self {
        match t {
            Target::Description => TargetField::Description,
            Target::Label => TargetField::Label,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "description")]
    pub target: Target,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curves and the data split as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 4)]
    pub epochs: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 256)]
    pub ffn_dim: usize,
    #[arg(long, default_value_t = 500)]
    pub max_src_len: usize,
    #[arg(long, default_value_t = 250)]
    pub max_tgt_len: usize,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// beam, greedy, top-k:<k> or nucleus:<p>.
    #[arg(long, default_value = "beam", value_parser = parse_strategy)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 2)]
    pub beams: usize,
    #[arg(long, default_value_t = 8.0)]
    pub length_penalty: f64,
    #[arg(long, default_value_t = 2.0)]
    pub repetition_penalty: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub max_len: Option<usize>,
}

impl DecodeArgs {
    fn config(&self) -> DecodeConfig {
        DecodeConfig {
            strategy: self.strategy,
            beams: self.beams,
            length_penalty: self.length_penalty,
            repetition_penalty: self.repetition_penalty,
            seed: self.seed,
            max_len: self.max_len,
        }
    }
}

fn parse_years(s: &str) -> Result<(i32, i32), String> {
    let (lo, hi) = s.split_once("..").ok_or("expected <from>..<to>")?;
    let lo: i32 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: i32 = hi.trim().trim_start_matches('=').parse().map_err(|e| format!("{e}"))?;
    if lo > hi {
        return Err(format!("{lo} is after {hi}"));
    }
    Ok((lo, hi))
}

fn parse_remote(s: &str) -> Result<(String, RemoteEncoder), String> {
    let (id, rest) = s.split_once('=').ok_or("expected id=url@dimension")?;
    let (url, dim) = rest.rsplit_once('@').ok_or("expected id=url@dimension")?;
    let dimension = dim.parse().map_err(|e| format!("dimension: {e}"))?;
    Ok((
        id.to_string(),
        RemoteEncoder {
            endpoint: url.to_string(),
            dimension,
        },
    ))
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s.split_once(':') {
        None if s == "beam" => Ok(Strategy::Beam),
        None if s == "greedy" => Ok(Strategy::Greedy),
        Some(("top-k", k)) => k.parse().map(Strategy::TopK).map_err(|e| e.to_string()),
        Some(("nucleus", p)) => p.parse().map(Strategy::Nucleus).map_err(|e| e.to_string()),
        _ => Err("expected beam, greedy, top-k:<k> or nucleus:<p>".into()),
    }
}

fn parse_stage(s: &str) -> Result<PipelineStage, String> {
    s.parse()
}

fn read_input(arg: Option<String>) -> Result<String, CliError> {
    match arg {
        Some(s) => Ok(s),
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TextLine {
    Plain(String),
    Object { text: String },
}

/// Lines of a text file, or every text of a manifest when the file is one.
fn corpus_texts(path: &Path) -> Result<Vec<String>, CliError> {
    if let Ok(m) = DatasetManifest::load(path) {
        return Ok(tokenizer_corpus(&m));
    }
    Ok(read_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

#[derive(Debug, Serialize)]
struct RougeReport {
    mean: vulnforge_core::evalkit::RougeScore,
    per_pair: Vec<vulnforge_core::evalkit::RougeScore>,
}

#[derive(Debug, Serialize)]
struct Encoded {
    tokens: Vec<String>,
    ids: Vec<u32>,
}

fn execute(cmd: Command) -> Result<i32, CliError> {
    match cmd {
        Command::Ingest { feed, years, out } => {
            let policy = FetchPolicy {
                year_lo: years.0,
                year_hi: years.1,
                ..FetchPolicy::default()
            };
            let records = ingest_feed(&read_feed(&feed, &policy)?, &policy)?;
            write_jsonl(&out, "records", None, &records)?;
            log::info!("{} records written to {}", records.len(), out.display());
        }
        Command::Scrape {
            records,
            fixtures,
            live: _,
            min_words,
            max_paragraphs,
            out,
        } => {
            let recs: Vec<VulnRecord> = read_jsonl(&records)?;
            let policy = FetchPolicy {
                max_paragraphs_per_page: max_paragraphs,
                ..FetchPolicy::default()
            };
            let fetcher = make_fetcher(fixtures.as_deref(), &policy)?;
            let clean = CleanPolicy {
                min_words,
                ..CleanPolicy::default()
            };
            let (paragraphs, s) = scrape_clean(&recs, &policy, &clean, fetcher.as_ref());
            write_jsonl(&out, "paragraphs", None, &flatten_paragraphs(&paragraphs))?;
            log::info!(
                "{} of {} paragraphs kept, {} pages failed",
                s.kept,
                s.scraped,
                s.page_failures
            );
        }
        Command::Build {
            records,
            paragraphs,
            policy,
            remote,
            name,
            created_at,
            out,
        } => {
            let recs: Vec<VulnRecord> = read_jsonl(&records)?;
            let paras = group_paragraphs(read_jsonl(&paragraphs)?);
            let augment = crate::config::AugmentConfig {
                policy,
                remote: remote.into_iter().collect(),
            };
            let gate = policy.policy();
            let encoders = build_encoders(&gate, &augment)?;
            let created = created_at.unwrap_or_else(chrono::Utc::now);
            let built = build_dataset(&name, &recs, &paras, &gate, &encoders, created)?;
            built.manifest.save(&out)?;
            log::info!(
                "{} instances written, {} encoder failures",
                built.manifest.instances.len(),
                built.warnings.len()
            );
        }
        Command::Refine {
            input,
            cap,
            no_cap: _,
            out,
        } => {
            let m = DatasetManifest::load(&input)?;
            let policy = match cap {
                Some(c) => RefinePolicy::capped(c),
                None => RefinePolicy::default(),
            };
            let gate_id = m.encoder_policy.encoder_ids()[0].to_string();
            let encoder = EncoderSpec::builtin(gate_id).build()?;
            let (refined, warnings) = refine_manifest(&m, &policy, encoder.as_ref())?;
            refined.save(&out)?;
            log::info!("{} instances kept, {} dropped", refined.instances.len(), warnings.len());
        }
        Command::Encode {
            input,
            encoder,
            id,
            dimension,
            out,
        } => {
            let spec = if encoder == "builtin" {
                EncoderSpec::builtin(&id)
            } else if let Some(url) = encoder.strip_prefix("remote:") {
                let dim =
                    dimension.ok_or_else(|| CliError::Usage("--dimension is required for remote encoders".into()))?;
                EncoderSpec::remote(&id, url, dim)
            } else {
                return Err(CliError::Usage(format!("unknown encoder {encoder:?}")));
            };
            let lines: Vec<TextLine> = read_jsonl(&input)?;
            let texts: Vec<String> = lines
                .into_iter()
                .map(|l| match l {
                    TextLine::Plain(s) | TextLine::Object { text: s } => s,
                })
                .collect();
            let vectors = spec.build()?.encode(&texts)?;
            let mut s = String::new();
            for v in &vectors {
                s.push_str(&serde_json::to_string(v)?);
                s.push('\n');
            }
            emit(out.as_deref(), &s)?;
        }
        Command::Tok(TokCommand::Train {
            kind,
            size,
            corpus,
            out,
        }) => {
            let kind = match kind {
                Kind::Bpe => VocabKind::Bpe,
                Kind::Unigram => VocabKind::Unigram,
            };
            let vocab = train_vocab(kind, size, &corpus_texts(&corpus)?)?;
            save_vocab(&out, &vocab, None)?;
            log::info!("{} tokens written to {}", vocab.len(), out.display());
        }
        Command::Tok(TokCommand::Encode { vocab, text }) => {
            let vocab = load_vocab(&vocab)?;
            let text = read_input(text)?;
            let text = text.trim_end_matches('\n');
            let enc = Encoded {
                tokens: vocab.tokenize(text),
                ids: vocab.encode_ids(text),
            };
            println!("{}", serde_json::to_string(&enc)?);
        }
        Command::Train(a) => {
            let m = DatasetManifest::load(&a.data)?;
            let vocab = load_vocab(&a.vocab)?;
            let mcfg = ModelConfig {
                d_model: a.d_model,
                heads: a.heads,
                layers: a.layers,
                ffn_dim: a.ffn_dim,
                max_src_len: a.max_src_len,
                max_tgt_len: a.max_tgt_len,
                ..ModelConfig::new(vocab.id_count())
            };
            let tcfg = TrainConfig {
                lr: a.lr,
                batch_size: a.batch_size,
                epochs: a.epochs,
                max_steps: a.max_steps,
                seed: a.seed,
                ..TrainConfig::default()
            };
            let (params, report) = train(&m, a.target.into(), &vocab, &tcfg, &mcfg)?;
            save_checkpoint(
                &a.out,
                &Checkpoint {
                    params,
                    vocab: Some(vocab),
                },
                None,
            )?;
            if let Some(p) = &a.report {
                write_json(p, &report, None)?;
            }
            log::info!("trained for {} steps", report.steps);
        }
        Command::Generate { model, input, decode } => {
            let ckpt = load_checkpoint(&model)?;
            let vocab = ckpt
                .vocab
                .as_ref()
                .ok_or_else(|| CliError::Usage("checkpoint has no vocabulary".into()))?;
            let text = read_input(input)?;
            println!("{}", generate(text.trim(), &ckpt.params, vocab, &decode.config())?);
        }
        Command::Export {
            data,
            with_generations,
            model,
            target,
            decode,
            out,
        } => {
            let m = DatasetManifest::load(&data)?;
            let exported = match (with_generations, model) {
                (true, Some(model)) => {
                    let ckpt = load_checkpoint(&model)?;
                    let vocab = ckpt
                        .vocab
                        .clone()
                        .ok_or_else(|| CliError::Usage("checkpoint has no vocabulary".into()))?;
                    let ids: Vec<String> = m.instances.iter().map(|i| i.cve_id.clone()).collect();
                    let gens = generate_for(&m, &ids, &ckpt, &vocab, &decode.config(), target.into())?;
                    attach_generations(&m, &gens)
                }
                _ => m,
            };
            exported.save(&out)?;
        }
        Command::Eval(EvalCommand::Rouge { pred, reference, out }) => {
            let preds: Vec<String> = read_string(&pred)?.lines().map(str::to_string).collect();
            let refs: Vec<String> = read_string(&reference)?.lines().map(str::to_string).collect();
            if preds.len() != refs.len() {
                return Err(CliError::Usage(format!(
                    "{} predictions but {} references",
                    preds.len(),
                    refs.len()
                )));
            }
            let pairs: Vec<(String, String)> = preds.into_iter().zip(refs).collect();
            let report = RougeReport {
                mean: mean_rouge1(&pairs),
                per_pair: pairs.iter().map(|(g, t)| rouge1(g, t)).collect(),
            };
            emit(out.as_deref(), &json_string(&report, None)?)?;
        }
        Command::Stats {
            input,
            report,
            gazetteer,
            top_trigrams,
        } => {
            let m = DatasetManifest::load(&input)?;
            let g = load_gazetteer(gazetteer.as_deref())?;
            write_json(&report, &stats_report(&m, &g, top_trigrams), None)?;
        }
        Command::Serve {
            manifest,
            ledger,
            port,
            host,
            static_dir,
            no_auth,
        } => {
            let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
            if token.is_none() && !no_auth {
                return Err(CliError::Usage(format!(
                    "set {TOKEN_ENV} or pass --no-auth to serve without authentication"
                )));
            }
            let m = DatasetManifest::load(&manifest)?;
            let app = AppState::open(m, ledger, token)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(SocketAddr::new(host, port), router(app, static_dir)))?;
        }
        Command::Run { config, only } => {
            let cfg = RunConfig::load(&config)?;
            let report = run_pipeline(&cfg, only)?;
            for s in &report.stages {
                let status = serde_json::to_value(s.status)?;
                let detail = s.error.as_deref().unwrap_or("");
                eprintln!("{:<9} {:<7} {detail}", s.stage.name(), status.as_str().unwrap_or(""));
            }
            eprintln!("report hash {}", report.report_hash);
            return Ok(if report.success() { 0 } else { 1 });
        }
    }
    Ok(0)
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
