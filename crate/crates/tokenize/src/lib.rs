//! Sub-word vocabularies: a byte-level BPE trainer and encoder, and a unigram
//! language model with Viterbi segmentation and loss-driven pruning.
//!
//! Both kinds share one symbolization (see [`symbols`]), one JSON file format
//! and one id layout: ids `0..4` are `<pad>`, `<s>`, `</s>` and the unknown
//! token, followed by the vocabulary tokens in order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub mod bpe;
pub mod symbols;
pub mod unigram;

pub use bpe::{train_bpe, train_bpe_with, BpeConfig, BpeTraining};
pub use symbols::WORD_MARKER;
pub use unigram::{best_segmentation, prune_unigram, removal_loss, train_unigram, unigram_prob};

pub const DEFAULT_UNK: &str = "<UNK>";
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
const FIRST_TOKEN_ID: u32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum TokenizeError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("size limit {limit} is below the {alphabet} base symbols")]
    LimitBelowAlphabet { limit: usize, alphabet: usize },
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("token {0:?} is a single character and cannot be removed")]
    CharacterToken(String),
    #[error("word {0:?} cannot be covered by the vocabulary")]
    Uncoverable(String),
    #[error("this operation needs a {0:?} vocabulary")]
    WrongKind(VocabKind),
    #[error("invalid vocabulary: {0}")]
    Invalid(String),
    #[error("vocabulary file: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Bpe,
    Unigram,
}

/// On-disk shape of a vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    kind: VocabKind,
    tokens: Vec<String>,
    #[serde(default)]
    merges: Vec<(String, String)>,
    #[serde(default)]
    logprob: BTreeMap<String, f64>,
    unk_token: String,
    size_limit: usize,
}

/// Token set D plus either BPE merge rules or unigram log-probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct SubwordVocab {
    kind: VocabKind,
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    logprob: BTreeMap<String, f64>,
    unk_token: String,
    size_limit: usize,
    index: HashMap<String, u32>,
    /// Every rank at which a pair was merged (a pair can recur if its
    /// concatenation was first produced by a different pair).
    merge_ranks: HashMap<(String, String), Vec<usize>>,
    max_token_chars: usize,
}

impl PartialEq for SubwordVocab {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.tokens == other.tokens
            && self.merges == other.merges
            && self.logprob == other.logprob
            && self.unk_token == other.unk_token
            && self.size_limit == other.size_limit
    }
}

impl TryFrom<VocabFile> for SubwordVocab {
    type Error = TokenizeError;

    fn try_from(f: VocabFile) -> Result<Self, Self::Error> {
        SubwordVocab::from_parts(f.kind, f.tokens, f.merges, f.logprob, f.unk_token, f.size_limit)
    }
}

impl From<SubwordVocab> for VocabFile {
    fn from(v: SubwordVocab) -> Self {
        VocabFile {
            kind: v.kind,
            tokens: v.tokens,
            merges: v.merges,
            logprob: v.logprob,
            unk_token: v.unk_token,
            size_limit: v.size_limit,
        }
    }
}

impl SubwordVocab {
    /// Builds a vocabulary and checks its invariants.
    pub fn from_parts(
        kind: VocabKind,
        tokens: Vec<String>,
        merges: Vec<(String, String)>,
        logprob: BTreeMap<String, f64>,
        unk_token: String,
        size_limit: usize,
    ) -> Result<Self, TokenizeError> {
        let invalid = |m: String| Err(TokenizeError::Invalid(m));
        if tokens.len() > size_limit {
            return invalid(format!("{} tokens exceed the size limit {size_limit}", tokens.len()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return invalid("empty token".into());
            }
            if index.insert(t.clone(), FIRST_TOKEN_ID + i as u32).is_some() {
                return invalid(format!("duplicate token {t:?}"));
            }
        }
        if index.contains_key(&unk_token) {
            return invalid(format!("unknown-token marker {unk_token:?} is also a regular token"));
        }
        let mut merge_ranks: HashMap<(String, String), Vec<usize>> = HashMap::new();
        match kind {
            VocabKind::Bpe => {
                if !logprob.is_empty() {
                    return invalid("BPE vocabularies carry no log-probabilities".into());
                }
                for (rank, (l, r)) in merges.iter().enumerate() {
                    if !index.contains_key(&format!("{l}{r}")) {
                        return invalid(format!("merge ({l:?}, {r:?}) produces a token outside the set"));
                    }
                    merge_ranks.entry((l.clone(), r.clone())).or_default().push(rank);
                }
            }
            VocabKind::Unigram => {
                if !merges.is_empty() {
                    return invalid("unigram vocabularies carry no merges".into());
                }
                if logprob.len() != tokens.len() || tokens.iter().any(|t| !logprob.contains_key(t)) {
                    return invalid("every unigram token needs exactly one log-probability".into());
                }
                if logprob.values().any(|&lp| lp.is_nan() || lp > 0.0) {
                    return invalid("log-probabilities must be finite and at most 0".into());
                }
                let mass: f64 = logprob.values().map(|lp| lp.exp()).sum();
                if mass > 1.0 + 1e-6 {
                    return invalid(format!("probabilities sum to {mass}"));
                }
            }
        }
        let max_token_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(0);
        Ok(SubwordVocab {
            kind,
            tokens,
            merges,
            logprob,
            unk_token,
            size_limit,
            index,
            merge_ranks,
            max_token_chars,
        })
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn logprobs(&self) -> &BTreeMap<String, f64> {
        &self.logprob
    }

    pub fn logprob(&self, token: &str) -> Option<f64> {
        self.logprob.get(token).copied()
    }

    pub fn unk_token(&self) -> &str {
        &self.unk_token
    }

    pub fn size_limit(&self) -> usize {
        self.size_limit
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Single-symbol tokens, which pruning never removes.
    pub fn characters(&self) -> HashSet<char> {
        self.tokens
            .iter()
            .filter_map(|t| {
                let mut cs = t.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) => Some(c),
                    _ => None,
                }
            })
            .collect()
    }

    pub(crate) fn max_token_chars(&self) -> usize {
        self.max_token_chars
    }

    pub(crate) fn merge_ranks(&self, pair: &(String, String)) -> Option<&[usize]> {
        self.merge_ranks.get(pair).map(Vec::as_slice)
    }

    /// Number of ids, including the four reserved ones.
    pub fn id_count(&self) -> usize {
        FIRST_TOKEN_ID as usize + self.tokens.len()
    }

    pub fn token_id(&self, token: &str) -> u32 {
        if token == self.unk_token {
            return UNK_ID;
        }
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Token text for an id; reserved ids other than the unknown token map to `None`.
    pub fn id_token(&self, id: u32) -> Option<&str> {
        match id {
            UNK_ID => Some(&self.unk_token),
            i if i >= FIRST_TOKEN_ID => self.tokens.get((i - FIRST_TOKEN_ID) as usize).map(String::as_str),
            _ => None,
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        tokenize_map(text, self)
    }

    pub fn encode_ids(&self, text: &str) -> Vec<u32> {
        tokenize_map(text, self).iter().map(|t| self.token_id(t)).collect()
    }

    /// Inverse of [`encode_ids`](Self::encode_ids); padding, start and end ids are skipped.
    pub fn decode_ids(&self, ids: &[u32]) -> String {
        let tokens: Vec<&str> = ids.iter().filter_map(|&i| self.id_token(i)).collect();
        detokenize(&tokens, self)
    }

    pub fn to_json(&self) -> Result<String, TokenizeError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, TokenizeError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizeError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Maps text to vocabulary tokens. Symbols outside the base alphabet become the
/// unknown token at their position; nothing else is lost.
pub fn tokenize_map<S: AsRef<str>>(s: S, vocab: &SubwordVocab) -> Vec<String> {
    let mut out = Vec::new();
    for piece in symbols::pieces(s.as_ref()) {
        match vocab.kind {
            VocabKind::Bpe => {
                for t in bpe::segment_piece(&piece, vocab) {
                    if vocab.contains(&t) {
                        out.push(t);
                    } else {
                        out.push(vocab.unk_token.clone());
                    }
                }
            }
            VocabKind::Unigram => out.extend(unigram::segment_piece(&piece, vocab)),
        }
    }
    out
}

/// Rebuilds text from tokens. Unknown tokens decode to U+FFFD.
pub fn detokenize<S: AsRef<str>>(tokens: &[S], vocab: &SubwordVocab) -> String {
    symbols::desymbolize(tokens.iter().map(|t| {
        let t = t.as_ref();
        (t != vocab.unk_token).then_some(t)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bpe() -> SubwordVocab {
        let tokens = ["\u{2581}", "a", "b", "ab"].map(String::from).to_vec();
        SubwordVocab::from_parts(
            VocabKind::Bpe,
            tokens,
            vec![("a".into(), "b".into())],
            BTreeMap::new(),
            DEFAULT_UNK.into(),
            10,
        )
        .unwrap()
    }

    #[test]
    fn invariants_are_checked() {
        let bad_merge = SubwordVocab::from_parts(
            VocabKind::Bpe,
            vec!["a".into()],
            vec![("a".into(), "a".into())],
            BTreeMap::new(),
            DEFAULT_UNK.into(),
            5,
        );
        assert!(bad_merge.is_err());
        let too_many = SubwordVocab::from_parts(
            VocabKind::Bpe,
            vec!["a".into(), "b".into()],
            vec![],
            BTreeMap::new(),
            DEFAULT_UNK.into(),
            1,
        );
        assert!(too_many.is_err());
        let heavy: BTreeMap<String, f64> = [("a".to_string(), 0.0), ("b".to_string(), -0.1)].into();
        let over = SubwordVocab::from_parts(
            VocabKind::Unigram,
            vec!["a".into(), "b".into()],
            vec![],
            heavy,
            DEFAULT_UNK.into(),
            5,
        );
        assert!(over.is_err());
    }

    #[test]
    fn json_round_trip_keeps_field_names() {
        let v = tiny_bpe();
        let json = v.to_json().unwrap();
        let raw: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["kind", "tokens", "merges", "logprob", "unk_token"] {
            assert!(raw.get(key).is_some(), "{key} missing");
        }
        assert_eq!(raw["kind"], "bpe");
        assert_eq!(SubwordVocab::from_json(&json).unwrap(), v);
    }

    #[test]
    fn unknown_characters_become_unk() {
        let v = tiny_bpe();
        assert_eq!(tokenize_map("abc", &v), vec!["\u{2581}", "ab", "<UNK>"]);
        assert!(tokenize_map("", &v).is_empty());
        assert_eq!(detokenize(&tokenize_map("ab ba", &v), &v), "ab ba");
    }

    #[test]
    fn id_layout() {
        let v = tiny_bpe();
        assert_eq!(v.id_count(), 8);
        let ids = v.encode_ids("ab z");
        assert_eq!(ids, vec![4, 7, 4, UNK_ID]);
        assert_eq!(v.decode_ids(&[BOS_ID, 4, 7, EOS_ID, PAD_ID]), "ab");
        assert_eq!(v.id_token(PAD_ID), None);
        assert_eq!(v.id_token(99), None);
    }
}
