//! File formats shared by the subcommands and the pipeline.
//!
//! JSON-lines artifacts may start with a header line
//! `{"artifact": "...", "config_hash": "..."}`; JSON artifacts carry the hash
//! as an extra top-level `config_hash` key. Readers accept files with or
//! without either.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;
use vulnforge_core::Paragraph;
use vulnforge_seq2seq::Checkpoint;
use vulnforge_tokenize::SubwordVocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub artifact: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// One scraped paragraph together with the CVE it was scraped for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParagraphRow {
    pub cve_id: String,
    #[serde(flatten)]
    pub paragraph: Paragraph,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&read_bytes(path)?))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Read {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.display().to_string(),
        source,
    })
}

fn is_header(v: &Value) -> bool {
    v.get("artifact").is_some_and(Value::is_string)
}

/// Reads a JSON-lines file, skipping blank lines and a leading header.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = fs::File::open(path).map_err(|source| CliError::Read {
        path: path.display().to_string(),
        source,
    })?;
    let parse_err = |line: usize, e: serde_json::Error| CliError::Parse {
        path: path.display().to_string(),
        line,
        message: e.to_string(),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e))?;
        if i == 0 && is_header(&v) {
            continue;
        }
        out.push(serde_json::from_value(v).map_err(|e| parse_err(i + 1, e))?);
    }
    Ok(out)
}

pub fn jsonl_string<T: Serialize>(artifact: &str, config_hash: Option<&str>, items: &[T]) -> Result<String, CliError> {
    let header = ArtifactHeader {
        artifact: artifact.into(),
        config_hash: config_hash.map(str::to_string),
    };
    let mut s = serde_json::to_string(&header)?;
    s.push('\n');
    for item in items {
        s.push_str(&serde_json::to_string(item)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl<T: Serialize>(
    path: &Path,
    artifact: &str,
    config_hash: Option<&str>,
    items: &[T],
) -> Result<(), CliError> {
    write_atomic(path, jsonl_string(artifact, config_hash, items)?.as_bytes())
}

/// Writes through a sibling temporary file so a failed stage never leaves a
/// half-written artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Pretty JSON with `config_hash` added at the top level of objects.
pub fn json_string<T: Serialize>(value: &T, config_hash: Option<&str>) -> Result<String, CliError> {
    let mut v = serde_json::to_value(value)?;
    if let (Some(h), Value::Object(map)) = (config_hash, &mut v) {
        map.insert("config_hash".into(), Value::String(h.into()));
    }
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, config_hash: Option<&str>) -> Result<(), CliError> {
    write_atomic(path, json_string(value, config_hash)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_string(path)?).map_err(|e| CliError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn group_paragraphs(rows: Vec<ParagraphRow>) -> BTreeMap<String, Vec<Paragraph>> {
    let mut map: BTreeMap<String, Vec<Paragraph>> = BTreeMap::new();
    for row in rows {
        map.entry(row.cve_id).or_default().push(row.paragraph);
    }
    map
}

pub fn flatten_paragraphs(map: &BTreeMap<String, Vec<Paragraph>>) -> Vec<ParagraphRow> {
    map.iter()
        .flat_map(|(id, ps)| {
            ps.iter().map(move |p| ParagraphRow {
                cve_id: id.clone(),
                paragraph: p.clone(),
            })
        })
        .collect()
}

pub fn save_vocab(path: &Path, vocab: &SubwordVocab, config_hash: Option<&str>) -> Result<(), CliError> {
    let v: Value = serde_json::from_str(&vocab.to_json()?)?;
    write_json(path, &v, config_hash)
}

pub fn load_vocab(path: &Path) -> Result<SubwordVocab, CliError> {
    Ok(SubwordVocab::from_json(&read_string(path)?)?)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, config_hash: Option<&str>) -> Result<(), CliError> {
    let v: Value = serde_json::from_str(&ckpt.to_json()?)?;
    let mut s = serde_json::to_string(&add_hash(v, config_hash))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn add_hash(mut v: Value, config_hash: Option<&str>) -> Value {
    if let (Some(h), Value::Object(map)) = (config_hash, &mut v) {
        map.insert("config_hash".into(), Value::String(h.into()));
    }
    v
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::from_json(&read_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_abc() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn jsonl_header_is_skipped_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        write_jsonl(&path, "numbers", Some("abc"), &[1, 2, 3]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"artifact":"numbers","config_hash":"abc"}"#));
        assert_eq!(read_jsonl::<i32>(&path).unwrap(), vec![1, 2, 3]);
        fs::write(&path, "4\n\n5\n").unwrap();
        assert_eq!(read_jsonl::<i32>(&path).unwrap(), vec![4, 5]);
    }
}
