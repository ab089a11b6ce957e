//! Byte-pair encoding: greedy merging of the most frequent adjacent pair.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::symbols::piece_counts;
use crate::{SubwordVocab, TokenizeError, VocabKind, DEFAULT_UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BpeConfig {
    pub size_limit: usize,
    /// Training stops once no pair occurs at least this often.
    pub min_pair_count: u64,
}

impl BpeConfig {
    pub fn new(size_limit: usize) -> Self {
        BpeConfig {
            size_limit,
            min_pair_count: 2,
        }
    }
}

/// A trained vocabulary together with the final segmentation of every
/// distinct corpus piece (useful for checking that merges replay).
#[derive(Debug, Clone)]
pub struct BpeTraining {
    pub vocab: SubwordVocab,
    pub segmentations: BTreeMap<String, Vec<String>>,
}

pub fn train_bpe<S: AsRef<str>>(corpus: &[S], size_limit: usize) -> Result<SubwordVocab, TokenizeError> {
    Ok(train_bpe_with(corpus, &BpeConfig::new(size_limit))?.vocab)
}

fn merge_in_place(word: &mut Vec<String>, left: &str, right: &str) -> bool {
    let mut i = 0;
    let mut changed = false;
    while i + 1 < word.len() {
        if word[i] == left && word[i + 1] == right {
            let r = word.remove(i + 1);
            word[i].push_str(&r);
            changed = true;
        }
        i += 1;
    }
    changed
}

/// Trains on the word-frequency-weighted corpus. Pair-count ties go to the
/// lexicographically smallest `(left, right)`.
pub fn train_bpe_with<S: AsRef<str>>(corpus: &[S], config: &BpeConfig) -> Result<BpeTraining, TokenizeError> {
    let counts = piece_counts(corpus);
    if counts.is_empty() {
        return Err(TokenizeError::EmptyCorpus);
    }
    let mut words: Vec<(String, Vec<String>, u64)> = counts
        .into_iter()
        .map(|(p, c)| {
            let syms = p.chars().map(String::from).collect();
            (p, syms, c)
        })
        .collect();

    let base: BTreeSet<String> = words.iter().flat_map(|(_, w, _)| w.iter().cloned()).collect();
    if config.size_limit < base.len() {
        return Err(TokenizeError::LimitBelowAlphabet {
            limit: config.size_limit,
            alphabet: base.len(),
        });
    }
    let mut tokens: Vec<String> = base.into_iter().collect();
    let mut known: HashSet<String> = tokens.iter().cloned().collect();
    let mut merges: Vec<(String, String)> = Vec::new();

    while tokens.len() < config.size_limit {
        let best = {
            let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
            for (_, w, c) in &words {
                for win in w.windows(2) {
                    *pairs.entry((&win[0], &win[1])).or_insert(0) += c;
                }
            }
            pairs
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|((l, r), c)| (l.to_string(), r.to_string(), c))
        };
        let Some((left, right, count)) = best else { break };
        if count < config.min_pair_count.max(1) {
            break;
        }
        for (_, w, _) in words.iter_mut() {
            merge_in_place(w, &left, &right);
        }
        let merged = format!("{left}{right}");
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
        merges.push((left, right));
    }

    let segmentations = words.into_iter().map(|(p, w, _)| (p, w)).collect();
    let vocab = SubwordVocab::from_parts(
        VocabKind::Bpe,
        tokens,
        merges,
        BTreeMap::new(),
        DEFAULT_UNK.to_string(),
        config.size_limit,
    )?;
    Ok(BpeTraining { vocab, segmentations })
}

/// Replays the merge list on one piece. Equivalent to applying every merge in
/// list order: each step applies the earliest merge ranked after the previous one.
pub(crate) fn segment_piece(piece: &str, vocab: &SubwordVocab) -> Vec<String> {
    let mut word: Vec<String> = piece.chars().map(String::from).collect();
    let mut last: Option<usize> = None;
    loop {
        let mut next: Option<usize> = None;
        for win in word.windows(2) {
            let key = (win[0].clone(), win[1].clone());
            if let Some(ranks) = vocab.merge_ranks(&key) {
                let after = match last {
                    None => ranks.first().copied(),
                    Some(l) => ranks.get(ranks.partition_point(|&r| r <= l)).copied(),
                };
                if let Some(r) = after {
                    next = Some(next.map_or(r, |n: usize| n.min(r)));
                }
            }
        }
        let Some(rank) = next else { break };
        let (l, r) = &vocab.merges()[rank];
        merge_in_place(&mut word, l, r);
        last = Some(rank);
    }
    word
}
