//! CVE feed ingestion and reference-page scraping.
//!
//! Pages come from a [`PageFetcher`]: either the live web ([`LiveFetcher`]) or
//! a fixture directory indexed by `fixtures.json` ([`FixtureFetcher`]), which
//! keeps tests and CI fully offline.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use log::{debug, warn};
use rayon::prelude::*;
use scraper::{ElementRef, Html, Node, Selector};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{Paragraph, VulnRecord};

pub const MAX_BODY_BYTES: usize = 5 * 1024 * 1024;
pub const MAX_REDIRECTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchPolicy {
    pub year_lo: i32,
    pub year_hi: i32,
    pub max_paragraphs_per_page: usize,
    pub require_valid_tls: bool,
    pub timeout_ms: u64,
    pub max_concurrent_fetches: usize,
    #[serde(default = "default_politeness")]
    pub politeness_delay_ms: u64,
}

fn default_politeness() -> u64 {
    500
}

impl Default for FetchPolicy {
    fn default() -> Self {
        FetchPolicy {
            year_lo: 2019,
            year_hi: 2021,
            max_paragraphs_per_page: 100,
            require_valid_tls: true,
            timeout_ms: 15_000,
            max_concurrent_fetches: 8,
            politeness_delay_ms: default_politeness(),
        }
    }
}

impl FetchPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.year_lo > self.year_hi {
            return Err(format!("year_lo {} is after year_hi {}", self.year_lo, self.year_hi));
        }
        if self.max_paragraphs_per_page == 0 {
            return Err("max_paragraphs_per_page must be at least 1".into());
        }
        if self.max_concurrent_fetches == 0 {
            return Err("max_concurrent_fetches must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum FeedError {
    #[error("feed parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported feed schema: {0}")]
    UnsupportedSchema(String),
    #[error("duplicate cve_id {0} in feed")]
    DuplicateId(String),
    #[error("invalid fetch policy: {0}")]
    Policy(String),
}

/// Byte offset of a 1-based (line, column) position.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut cur_line = 1;
    for (i, &b) in bytes.iter().enumerate() {
        if cur_line == line {
            return (i + column.saturating_sub(1)).min(bytes.len());
        }
        if b == b'\n' {
            cur_line += 1;
        }
    }
    bytes.len()
}

fn year_of(date: &str) -> Option<i32> {
    date.get(..4)?.parse().ok()
}

fn english_value(items: Option<&Value>) -> Option<String> {
    let arr = items?.as_array()?;
    let pick = arr
        .iter()
        .find(|d| d["lang"].as_str() == Some("en"))
        .or_else(|| arr.first())?;
    pick["value"].as_str().map(|s| s.trim().to_string())
}

fn urls(items: Option<&Value>) -> Vec<String> {
    items
        .and_then(Value::as_array)
        .map(|arr| {
            arr.iter()
                .filter_map(|r| r["url"].as_str().map(str::to_string))
                .collect()
        })
        .unwrap_or_default()
}

/// NVD 1.1 `CVE_Items` entry.
fn record_from_legacy(item: &Value) -> Option<VulnRecord> {
    let cve = &item["cve"];
    Some(VulnRecord {
        cve_id: cve["CVE_data_meta"]["ID"].as_str()?.to_string(),
        description: english_value(cve["description"].get("description_data"))?,
        published_year: year_of(item["publishedDate"].as_str()?)?,
        references: urls(cve["references"].get("reference_data")),
    })
}

/// NVD API 2.0 `vulnerabilities` entry.
fn record_from_v2(item: &Value) -> Option<VulnRecord> {
    let cve = &item["cve"];
    Some(VulnRecord {
        cve_id: cve["id"].as_str()?.to_string(),
        description: english_value(cve.get("descriptions"))?,
        published_year: year_of(cve["published"].as_str()?)?,
        references: urls(cve.get("references")),
    })
}

type RecordParser = fn(&Value) -> Option<VulnRecord>;

/// Parses an NVD JSON feed (1.1 data feed or 2.0 API response), keeping
/// records published inside the policy's year window.
pub fn ingest_feed(feed: &[u8], policy: &FetchPolicy) -> Result<Vec<VulnRecord>, FeedError> {
    policy.validate().map_err(FeedError::Policy)?;
    let doc: Value = serde_json::from_slice(feed).map_err(|e| FeedError::Parse {
        offset: byte_offset(feed, e.line(), e.column()),
        message: e.to_string(),
    })?;

    let (items, parse): (&Vec<Value>, RecordParser) = if let Some(items) = doc.get("CVE_Items") {
        let version = doc["CVE_data_version"].as_str().unwrap_or("");
        if version != "4.0" {
            return Err(FeedError::UnsupportedSchema(format!("CVE_data_version {version:?}")));
        }
        (as_array(items)?, record_from_legacy)
    } else if let Some(items) = doc.get("vulnerabilities") {
        let version = doc["version"].as_str().unwrap_or("");
        if !version.starts_with("2.") {
            return Err(FeedError::UnsupportedSchema(format!("version {version:?}")));
        }
        (as_array(items)?, record_from_v2)
    } else {
        return Err(FeedError::UnsupportedSchema(
            "neither CVE_Items nor vulnerabilities present".into(),
        ));
    };

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for item in items {
        let Some(rec) = parse(item) else {
            debug!("skipping feed entry without id, description or date");
            continue;
        };
        if !seen.insert(rec.cve_id.clone()) {
            return Err(FeedError::DuplicateId(rec.cve_id));
        }
        if rec.description.is_empty() {
            continue;
        }
        if (policy.year_lo..=policy.year_hi).contains(&rec.published_year) {
            out.push(rec);
        }
    }
    Ok(out)
}

fn as_array(v: &Value) -> Result<&Vec<Value>, FeedError> {
    v.as_array()
        .ok_or_else(|| FeedError::UnsupportedSchema("item list is not an array".into()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchedPage {
    pub final_url: String,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FetchError {
    #[error("TLS validation failed: {0}")]
    Tls(String),
    #[error("timed out")]
    Timeout,
    #[error("network error: {0}")]
    Network(String),
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("body exceeds {MAX_BODY_BYTES} bytes")]
    TooLarge,
    #[error("too many redirects")]
    TooManyRedirects,
    #[error("no fixture for URL")]
    NoFixture,
}

/// Resolves a URL to page bytes.
pub trait PageFetcher: Send + Sync {
    fn fetch(&self, url: &str) -> Result<FetchedPage, FetchError>;
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FixtureFault {
    Tls,
    Timeout,
    Network,
}

#[derive(Debug, Clone, Deserialize)]
struct FixtureEntry {
    #[serde(default)]
    file: Option<String>,
    #[serde(default)]
    content_type: Option<String>,
    #[serde(default)]
    status: Option<u16>,
    #[serde(default)]
    error: Option<FixtureFault>,
    #[serde(default)]
    redirect: Option<String>,
}

#[derive(Debug, Deserialize)]
struct FixtureIndex {
    pages: BTreeMap<String, FixtureEntry>,
}

/// Offline fetcher backed by a directory with a `fixtures.json` index:
///
/// ```json
/// {"pages": {"https://vendor.example/advisory": {"file": "pages/a.html"},
///            "https://bad-cert.example/": {"error": "tls"},
///            "https://old.example/": {"redirect": "https://vendor.example/advisory"}}}
/// ```
pub struct FixtureFetcher {
    root: PathBuf,
    index: FixtureIndex,
}

impl FixtureFetcher {
    pub fn open(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let text = std::fs::read_to_string(root.join("fixtures.json"))?;
        let index = serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(FixtureFetcher { root, index })
    }
}

impl PageFetcher for FixtureFetcher {
    fn fetch(&self, url: &str) -> Result<FetchedPage, FetchError> {
        let mut current = url.to_string();
        for _ in 0..=MAX_REDIRECTS {
            let entry = self.index.pages.get(&current).ok_or(FetchError::NoFixture)?;
            match entry.error {
                Some(FixtureFault::Tls) => return Err(FetchError::Tls("fixture certificate rejected".into())),
                Some(FixtureFault::Timeout) => return Err(FetchError::Timeout),
                Some(FixtureFault::Network) => return Err(FetchError::Network("fixture connection refused".into())),
                None => {}
            }
            if let Some(next) = &entry.redirect {
                current = next.clone();
                continue;
            }
            if let Some(status) = entry.status.filter(|s| !(200..300).contains(s)) {
                return Err(FetchError::Status(status));
            }
            let file = entry.file.as_ref().ok_or(FetchError::NoFixture)?;
            let body = std::fs::read(self.root.join(file)).map_err(|e| FetchError::Network(e.to_string()))?;
            if body.len() > MAX_BODY_BYTES {
                return Err(FetchError::TooLarge);
            }
            return Ok(FetchedPage {
                final_url: current,
                content_type: Some(entry.content_type.clone().unwrap_or_else(|| "text/html".into())),
                body,
            });
        }
        Err(FetchError::TooManyRedirects)
    }
}

/// HTTP fetcher with redirect, size and per-host politeness limits.
pub struct LiveFetcher {
    client: reqwest::blocking::Client,
    delay: Duration,
    last_hit: Mutex<HashMap<String, Instant>>,
}

impl LiveFetcher {
    pub fn new(policy: &FetchPolicy) -> Result<Self, FetchError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(policy.timeout_ms))
            .redirect(reqwest::redirect::Policy::limited(MAX_REDIRECTS))
            .tls_danger_accept_invalid_certs(!policy.require_valid_tls)
            .user_agent(concat!("vulnforge/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| FetchError::Network(e.to_string()))?;
        Ok(LiveFetcher {
            client,
            delay: Duration::from_millis(policy.politeness_delay_ms),
            last_hit: Mutex::new(HashMap::new()),
        })
    }

    fn wait_for_host(&self, url: &str) {
        let Some(host) = url::Url::parse(url).ok().and_then(|u| u.host_str().map(str::to_string)) else {
            return;
        };
        loop {
            let wait = {
                let mut hits = self.last_hit.lock().unwrap();
                let now = Instant::now();
                match hits.get(&host) {
                    Some(&t) if now < t + self.delay => Some(t + self.delay - now),
                    _ => {
                        hits.insert(host.clone(), now);
                        None
                    }
                }
            };
            match wait {
                Some(d) => std::thread::sleep(d),
                None => return,
            }
        }
    }
}

fn classify(err: reqwest::Error) -> FetchError {
    if err.is_timeout() {
        return FetchError::Timeout;
    }
    if err.is_redirect() {
        return FetchError::TooManyRedirects;
    }
    let mut chain = String::new();
    let mut src: Option<&dyn std::error::Error> = Some(&err);
    while let Some(e) = src {
        chain.push_str(&e.to_string().to_lowercase());
        chain.push(' ');
        src = e.source();
    }
    if ["certificate", "tls", "ssl", "handshake"]
        .iter()
        .any(|k| chain.contains(k))
    {
        FetchError::Tls(chain.trim().to_string())
    } else {
        FetchError::Network(chain.trim().to_string())
    }
}

impl PageFetcher for LiveFetcher {
    fn fetch(&self, url: &str) -> Result<FetchedPage, FetchError> {
        self.wait_for_host(url);
        let resp = self.client.get(url).send().map_err(classify)?;
        if !resp.status().is_success() {
            return Err(FetchError::Status(resp.status().as_u16()));
        }
        if resp.content_length().is_some_and(|n| n as usize > MAX_BODY_BYTES) {
            return Err(FetchError::TooLarge);
        }
        let final_url = resp.url().to_string();
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let mut body = Vec::new();
        resp.take(MAX_BODY_BYTES as u64 + 1)
            .read_to_end(&mut body)
            .map_err(|e| FetchError::Network(e.to_string()))?;
        if body.len() > MAX_BODY_BYTES {
            return Err(FetchError::TooLarge);
        }
        Ok(FetchedPage {
            final_url,
            content_type,
            body,
        })
    }
}

fn is_html(content_type: Option<&str>) -> bool {
    match content_type {
        None => true,
        Some(ct) => {
            let ct = ct.to_ascii_lowercase();
            ct.starts_with("text/html") || ct.starts_with("application/xhtml+xml")
        }
    }
}

fn collect_text(el: ElementRef<'_>, out: &mut Vec<String>) {
    for child in el.children() {
        match child.value() {
            Node::Text(t) => {
                let t = t.trim();
                if !t.is_empty() {
                    out.push(t.to_string());
                }
            }
            Node::Element(e) if matches!(e.name(), "script" | "style" | "noscript" | "template") => {}
            Node::Element(_) => {
                if let Some(child_el) = ElementRef::wrap(child) {
                    collect_text(child_el, out);
                }
            }
            _ => {}
        }
    }
}

/// Text of every `<p>` element in document order, descendant text nodes
/// joined by single spaces. Entries may be empty.
pub fn extract_paragraph_texts(html: &str) -> Vec<String> {
    let doc = Html::parse_document(html);
    let sel = Selector::parse("p").expect("static selector");
    doc.select(&sel)
        .map(|p| {
            let mut parts = Vec::new();
            collect_text(p, &mut parts);
            parts.join(" ")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScrapeWarning {
    pub cve_id: String,
    pub url: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScrapeOutput {
    pub paragraphs: Vec<Paragraph>,
    pub warnings: Vec<ScrapeWarning>,
}

fn scrape_page(url: &str, policy: &FetchPolicy, fetcher: &dyn PageFetcher) -> Result<Vec<Paragraph>, String> {
    let page = fetcher.fetch(url).map_err(|e| e.to_string())?;
    if !is_html(page.content_type.as_deref()) {
        return Err(format!(
            "non-HTML content type {}",
            page.content_type.unwrap_or_default()
        ));
    }
    let html = String::from_utf8_lossy(&page.body);
    Ok(extract_paragraph_texts(&html)
        .into_iter()
        .take(policy.max_paragraphs_per_page)
        .enumerate()
        .filter(|(_, text)| !text.is_empty())
        .map(|(i, text)| Paragraph::new(url, i, text))
        .collect())
}

fn pool(policy: &FetchPolicy) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(policy.max_concurrent_fetches.max(1))
        .build()
        .expect("thread pool")
}

fn scrape_with(rec: &VulnRecord, policy: &FetchPolicy, fetcher: &dyn PageFetcher) -> ScrapeOutput {
    let pages: Vec<(String, Result<Vec<Paragraph>, String>)> = rec
        .references
        .par_iter()
        .map(|url| (url.clone(), scrape_page(url, policy, fetcher)))
        .collect();
    let mut out = ScrapeOutput::default();
    for (url, r) in pages {
        match r {
            Ok(mut ps) => out.paragraphs.append(&mut ps),
            Err(reason) => {
                warn!("{}: skipping {url}: {reason}", rec.cve_id);
                out.warnings.push(ScrapeWarning {
                    cve_id: rec.cve_id.clone(),
                    url,
                    reason,
                });
            }
        }
    }
    out
}

/// Scrapes every reference of one record. Failing pages are skipped with a
/// warning; output is in (reference order, paragraph index) order.
pub fn scrape_references(rec: &VulnRecord, policy: &FetchPolicy, fetcher: &dyn PageFetcher) -> ScrapeOutput {
    pool(policy).install(|| scrape_with(rec, policy, fetcher))
}

/// Scrapes many records, keyed by CVE id.
pub fn scrape_all(
    records: &[VulnRecord],
    policy: &FetchPolicy,
    fetcher: &dyn PageFetcher,
) -> (BTreeMap<String, Vec<Paragraph>>, Vec<ScrapeWarning>) {
    let results: Vec<(String, ScrapeOutput)> = pool(policy).install(|| {
        records
            .par_iter()
            .map(|r| (r.cve_id.clone(), scrape_with(r, policy, fetcher)))
            .collect()
    });
    let mut map = BTreeMap::new();
    let mut warnings = Vec::new();
    for (id, mut out) in results {
        warnings.append(&mut out.warnings);
        map.insert(id, out.paragraphs);
    }
    (map, warnings)
}
