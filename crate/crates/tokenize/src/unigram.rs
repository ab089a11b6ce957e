//! Unigram language-model vocabularies: sequence probability, Viterbi
//! segmentation, removal loss and iterative pruning.
//!
//! Words here are symbol strings as produced by [`crate::symbols::pieces`];
//! for ASCII text that is the word itself behind a `▁` marker.

use std::collections::{BTreeMap, HashMap};

use crate::symbols::piece_counts;
use crate::{SubwordVocab, TokenizeError, VocabKind, DEFAULT_UNK};

/// Longest seed substring, in symbols.
pub const MAX_SEED_CHARS: usize = 6;
/// Re-estimation rounds after each pruning step.
pub const REESTIMATE_ROUNDS: usize = 2;
/// Add-alpha smoothing used when re-estimating probabilities from counts.
pub const SMOOTHING_ALPHA: f64 = 0.1;
/// Share of removable tokens dropped per pruning step.
pub const PRUNE_FRACTION: f64 = 0.1;

// Scores closer than this are ties.
const TIE_EPS: f64 = 1e-9;

type Model = BTreeMap<String, f64>;

fn require_unigram(vocab: &SubwordVocab) -> Result<(), TokenizeError> {
    if vocab.kind() != VocabKind::Unigram {
        return Err(TokenizeError::WrongKind(VocabKind::Unigram));
    }
    Ok(())
}

/// `∑ logprob(x_i)`, the log of the product of token probabilities.
pub fn unigram_prob<S: AsRef<str>>(tokens: &[S], vocab: &SubwordVocab) -> Result<f64, TokenizeError> {
    require_unigram(vocab)?;
    tokens.iter().try_fold(0.0, |acc, t| {
        let t = t.as_ref();
        vocab
            .logprob(t)
            .map(|lp| acc + lp)
            .ok_or_else(|| TokenizeError::UnknownToken(t.to_string()))
    })
}

/// Best segmentation of `word` under `lookup`: highest score, then fewest
/// tokens, then the longest first token (and so on, left to right).
fn viterbi(word: &str, max_len: usize, lookup: impl Fn(&str) -> Option<f64>) -> Option<(f64, Vec<String>)> {
    let offs: Vec<usize> = word.char_indices().map(|(i, _)| i).chain([word.len()]).collect();
    let n = offs.len() - 1;
    // best[i] = (score, token count, end of first token) for the suffix starting at i
    let mut best: Vec<Option<(f64, usize, usize)>> = vec![None; n + 1];
    best[n] = Some((0.0, 0, n));
    for i in (0..n).rev() {
        let mut cur: Option<(f64, usize, usize)> = None;
        for j in (i + 1..=(i + max_len).min(n)).rev() {
            let Some((rest, rest_n, _)) = best[j] else { continue };
            let Some(lp) = lookup(&word[offs[i]..offs[j]]) else {
                continue;
            };
            let cand = (lp + rest, rest_n + 1, j);
            let better = match cur {
                None => true,
                Some((s, k, _)) => cand.0 > s + TIE_EPS || ((cand.0 - s).abs() <= TIE_EPS && cand.1 < k),
            };
            if better {
                cur = Some(cand);
            }
        }
        best[i] = cur;
    }
    let (score, _, _) = best[0]?;
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let (_, _, j) = best[i].expect("reachable suffix");
        out.push(word[offs[i]..offs[j]].to_string());
        i = j;
    }
    Some((score, out))
}

pub fn best_segmentation(word: &str, vocab: &SubwordVocab) -> Result<Vec<String>, TokenizeError> {
    require_unigram(vocab)?;
    viterbi(word, vocab.max_token_chars(), |t| vocab.logprob(t))
        .map(|(_, seg)| seg)
        .ok_or_else(|| TokenizeError::Uncoverable(word.to_string()))
}

pub(crate) fn segment_piece(piece: &str, vocab: &SubwordVocab) -> Vec<String> {
    let mut out = Vec::new();
    let mut run = String::new();
    let flush = |run: &mut String, out: &mut Vec<String>| {
        if run.is_empty() {
            return;
        }
        match viterbi(run, vocab.max_token_chars(), |t| vocab.logprob(t)) {
            Some((_, seg)) => out.extend(seg),
            None => out.extend(run.chars().map(|_| vocab.unk_token().to_string())),
        }
        run.clear();
    };
    let mut buf = [0u8; 4];
    for c in piece.chars() {
        if vocab.contains(c.encode_utf8(&mut buf)) {
            run.push(c);
        } else {
            flush(&mut run, &mut out);
            out.push(vocab.unk_token().to_string());
        }
    }
    flush(&mut run, &mut out);
    out
}

fn max_chars(model: &Model) -> usize {
    model.keys().map(|t| t.chars().count()).max().unwrap_or(0)
}

fn is_character(t: &str) -> bool {
    t.chars().nth(1).is_none()
}

/// Best segmentation of every word, with its score.
fn segment_words(words: &[(String, u64)], model: &Model) -> Result<Vec<(f64, Vec<String>)>, TokenizeError> {
    let m = max_chars(model);
    words
        .iter()
        .map(|(w, _)| viterbi(w, m, |t| model.get(t).copied()).ok_or_else(|| TokenizeError::Uncoverable(w.clone())))
        .collect()
}

/// Loss of every removable token. Only words whose best segmentation uses a
/// token can get worse without it, so only those are re-segmented.
fn removal_losses(words: &[(String, u64)], model: &Model) -> Result<Vec<(f64, String)>, TokenizeError> {
    let m = max_chars(model);
    let segs = segment_words(words, model)?;
    let mut users: HashMap<&str, Vec<usize>> = HashMap::new();
    for (wi, (_, seg)) in segs.iter().enumerate() {
        for t in seg {
            let u = users.entry(t.as_str()).or_default();
            if u.last() != Some(&wi) {
                u.push(wi);
            }
        }
    }
    let mut out = Vec::new();
    for t in model.keys().filter(|t| !is_character(t)) {
        let mut loss = 0.0;
        for &wi in users.get(t.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
            let (word, count) = &words[wi];
            let without = viterbi(word, m, |x| if x == t { None } else { model.get(x).copied() })
                .ok_or_else(|| TokenizeError::Uncoverable(word.clone()))?;
            loss += *count as f64 * (segs[wi].0 - without.0);
        }
        out.push((loss.max(0.0), t.clone()));
    }
    Ok(out)
}

/// Corpus log-likelihood lost by deleting `token` from the vocabulary, with
/// the remaining probabilities left as they are. Words are weighted by frequency.
pub fn removal_loss<S: AsRef<str>>(vocab: &SubwordVocab, token: &str, corpus: &[S]) -> Result<f64, TokenizeError> {
    require_unigram(vocab)?;
    if !vocab.contains(token) {
        return Err(TokenizeError::UnknownToken(token.to_string()));
    }
    if is_character(token) {
        return Err(TokenizeError::CharacterToken(token.to_string()));
    }
    let m = vocab.max_token_chars();
    let mut loss = 0.0;
    for (w, c) in piece_counts(corpus) {
        let with = viterbi(&w, m, |t| vocab.logprob(t)).ok_or_else(|| TokenizeError::Uncoverable(w.clone()))?;
        let without = viterbi(&w, m, |t| if t == token { None } else { vocab.logprob(t) })
            .ok_or_else(|| TokenizeError::Uncoverable(w.clone()))?;
        loss += c as f64 * (with.0 - without.0);
    }
    Ok(loss.max(0.0))
}

/// Viterbi re-estimation: token counts from best segmentations, add-alpha smoothed.
fn reestimate(words: &[(String, u64)], model: &Model) -> Result<Model, TokenizeError> {
    let mut counts: BTreeMap<&str, f64> = model.keys().map(|t| (t.as_str(), 0.0)).collect();
    for ((_, c), (_, seg)) in words.iter().zip(segment_words(words, model)?) {
        for t in seg {
            *counts.get_mut(t.as_str()).expect("segment tokens come from the model") += *c as f64;
        }
    }
    let total: f64 = counts.values().sum();
    let denom = total + SMOOTHING_ALPHA * counts.len() as f64;
    Ok(counts
        .into_iter()
        .map(|(t, c)| (t.to_string(), ((c + SMOOTHING_ALPHA) / denom).ln()))
        .collect())
}

fn prune_model(words: &[(String, u64)], mut model: Model, size_limit: usize) -> Result<Model, TokenizeError> {
    while model.len() > size_limit {
        let mut losses = removal_losses(words, &model)?;
        if losses.is_empty() {
            break;
        }
        losses.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let share = ((losses.len() as f64) * PRUNE_FRACTION).ceil() as usize;
        let k = share.max(1).min(model.len() - size_limit);
        for (_, t) in losses.into_iter().take(k) {
            model.remove(&t);
        }
        for _ in 0..REESTIMATE_ROUNDS {
            model = reestimate(words, &model)?;
        }
    }
    Ok(model)
}

fn to_vocab(model: Model, size_limit: usize) -> Result<SubwordVocab, TokenizeError> {
    let mut tokens: Vec<(&String, &f64)> = model.iter().collect();
    tokens.sort_by(|a, b| {
        is_character(b.0)
            .cmp(&is_character(a.0))
            .then_with(|| {
                if is_character(a.0) {
                    std::cmp::Ordering::Equal
                } else {
                    b.1.total_cmp(a.1)
                }
            })
            .then_with(|| a.0.cmp(b.0))
    });
    let tokens = tokens.into_iter().map(|(t, _)| t.clone()).collect();
    SubwordVocab::from_parts(
        VocabKind::Unigram,
        tokens,
        Vec::new(),
        model,
        DEFAULT_UNK.to_string(),
        size_limit,
    )
}

/// Drops the lowest-loss tenth of removable tokens and re-estimates, until the
/// vocabulary fits `size_limit`. Characters are never removed.
pub fn prune_unigram<S: AsRef<str>>(
    vocab: &SubwordVocab,
    corpus: &[S],
    size_limit: usize,
) -> Result<SubwordVocab, TokenizeError> {
    require_unigram(vocab)?;
    let chars = vocab.characters().len();
    if size_limit < chars {
        return Err(TokenizeError::LimitBelowAlphabet {
            limit: size_limit,
            alphabet: chars,
        });
    }
    if vocab.len() <= size_limit {
        return Ok(vocab.clone());
    }
    let words: Vec<(String, u64)> = piece_counts(corpus).into_iter().collect();
    let model = prune_model(&words, vocab.logprobs().clone(), size_limit)?;
    to_vocab(model, size_limit)
}

/// Seeds with every character plus every substring of up to
/// [`MAX_SEED_CHARS`] symbols seen at least twice, weights by relative
/// frequency, then prunes down to `size_limit`.
pub fn train_unigram<S: AsRef<str>>(corpus: &[S], size_limit: usize) -> Result<SubwordVocab, TokenizeError> {
    let words: Vec<(String, u64)> = piece_counts(corpus).into_iter().collect();
    if words.is_empty() {
        return Err(TokenizeError::EmptyCorpus);
    }
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    for (w, c) in &words {
        let offs: Vec<usize> = w.char_indices().map(|(i, _)| i).chain([w.len()]).collect();
        let n = offs.len() - 1;
        for i in 0..n {
            for j in i + 1..=(i + MAX_SEED_CHARS).min(n) {
                *freq.entry(w[offs[i]..offs[j]].to_string()).or_insert(0) += c;
            }
        }
    }
    freq.retain(|t, f| is_character(t) || *f >= 2);
    let chars = freq.keys().filter(|t| is_character(t)).count();
    if size_limit < chars {
        return Err(TokenizeError::LimitBelowAlphabet {
            limit: size_limit,
            alphabet: chars,
        });
    }
    let total: u64 = freq.values().sum();
    let model: Model = freq
        .into_iter()
        .map(|(t, f)| (t, (f as f64 / total as f64).ln()))
        .collect();
    let model = prune_model(&words, model, size_limit)?;
    to_vocab(model, size_limit)
}
