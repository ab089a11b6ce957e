//! ROUGE-1, summary/target embedding similarity and corpus statistics.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, EmbedError, Encoder};
use crate::textprep::{is_stopword, split_sentences};

static ENTITIES_TXT: &str = include_str!("../../../data/entities.txt");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore {
        recall: 0.0,
        precision: 0.0,
        f1: 0.0,
    };

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore { recall, precision, f1 }
    }
}

/// Lowercased alphanumeric runs; whitespace and punctuation both separate tokens.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// ROUGE-1 with clipped unigram overlap. An empty side yields all zeros.
pub fn rouge1(generated: &str, target: &str) -> RougeScore {
    let gen = rouge_tokens(generated);
    let tgt = rouge_tokens(target);
    if gen.is_empty() || tgt.is_empty() {
        return RougeScore::ZERO;
    }
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for t in &gen {
        counts.entry(t).or_default().0 += 1;
    }
    for t in &tgt {
        counts.entry(t).or_default().1 += 1;
    }
    let overlap: usize = counts.values().map(|(g, t)| (*g).min(*t)).sum();
    RougeScore::from_pr(overlap as f64 / gen.len() as f64, overlap as f64 / tgt.len() as f64)
}

/// Mean ROUGE-1 over aligned prediction/reference lists.
pub fn mean_rouge1(pairs: &[(String, String)]) -> RougeScore {
    if pairs.is_empty() {
        return RougeScore::ZERO;
    }
    let n = pairs.len() as f64;
    let (mut r, mut p, mut f) = (0.0, 0.0, 0.0);
    for (g, t) in pairs {
        let s = rouge1(g, t);
        r += s.recall;
        p += s.precision;
        f += s.f1;
    }
    RougeScore {
        recall: r / n,
        precision: p / n,
        f1: f / n,
    }
}

pub const SIMILARITY_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub scores: Vec<f64>,
    /// Counts over 10 equal-width bins of [-1, 1]; empty when there are no pairs.
    pub histogram: Vec<usize>,
    /// `None` when there are no pairs.
    pub mean: Option<f64>,
}

fn bin_of(score: f64) -> usize {
    let b = ((score + 1.0) / 2.0 * SIMILARITY_BINS as f64).floor() as isize;
    b.clamp(0, SIMILARITY_BINS as isize - 1) as usize
}

pub fn similarity_report(pairs: &[(String, String)], encoder: &dyn Encoder) -> Result<SimilarityReport, EmbedError> {
    if pairs.is_empty() {
        return Ok(SimilarityReport {
            scores: vec![],
            histogram: vec![],
            mean: None,
        });
    }
    let gens: Vec<String> = pairs.iter().map(|(g, _)| g.clone()).collect();
    let tgts: Vec<String> = pairs.iter().map(|(_, t)| t.clone()).collect();
    let gv = encoder.encode(&gens)?;
    let tv = encoder.encode(&tgts)?;
    let scores = gv
        .iter()
        .zip(&tv)
        .map(|(a, b)| cosine(a, b))
        .collect::<Result<Vec<f64>, _>>()?;
    let mut histogram = vec![0; SIMILARITY_BINS];
    for &s in &scores {
        histogram[bin_of(s)] += 1;
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(SimilarityReport {
        scores,
        histogram,
        mean: Some(mean),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

/// Bucket labels for the word-count histogram: 0–25, 26–50, …, 176–200, >200.
pub const LENGTH_BUCKETS: [&str; 9] = [
    "0-25", "26-50", "51-75", "76-100", "101-125", "126-150", "151-175", "176-200", ">200",
];

fn length_bucket(words: usize) -> usize {
    if words > 200 {
        8
    } else if words == 0 {
        0
    } else {
        (words - 1) / 25
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub texts: usize,
    pub words: MeanStd,
    pub chars: MeanStd,
    pub sentences: MeanStd,
    pub length_histogram: BTreeMap<String, usize>,
}

pub fn corpus_stats<S: AsRef<str>>(texts: &[S]) -> CorpusStats {
    let words: Vec<usize> = texts.iter().map(|t| t.as_ref().split_whitespace().count()).collect();
    let chars: Vec<f64> = texts.iter().map(|t| t.as_ref().chars().count() as f64).collect();
    let sentences: Vec<f64> = texts.iter().map(|t| split_sentences(t.as_ref()).len() as f64).collect();
    let mut hist = [0usize; 9];
    for &w in &words {
        hist[length_bucket(w)] += 1;
    }
    CorpusStats {
        texts: texts.len(),
        words: MeanStd::of(&words.iter().map(|&w| w as f64).collect::<Vec<_>>()),
        chars: MeanStd::of(&chars),
        sentences: MeanStd::of(&sentences),
        length_histogram: LENGTH_BUCKETS
            .iter()
            .zip(hist)
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    }
}

/// Bundled gazetteer (`data/entities.txt`).
pub fn default_gazetteer() -> Vec<String> {
    ENTITIES_TXT
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

fn entity_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| matches!(c, '.' | ',' | ';' | ':' | '(' | ')' | '"' | '\'' | '!' | '?')))
        .filter(|w| !w.is_empty())
        .collect()
}

/// Case-sensitive whole-token (or exact token-sequence) matches per gazetteer entry.
pub fn entity_counts<S: AsRef<str>>(texts: &[S], gazetteer: &[String]) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = gazetteer
        .iter()
        .filter(|g| !g.trim().is_empty())
        .map(|g| (g.clone(), 0))
        .collect();
    let names: Vec<String> = counts.keys().cloned().collect();
    let patterns: Vec<Vec<&str>> = names.iter().map(|g| g.split_whitespace().collect()).collect();
    for text in texts {
        let toks = entity_tokens(text.as_ref());
        for (name, pattern) in names.iter().zip(&patterns) {
            let n = toks.windows(pattern.len()).filter(|w| w == &pattern.as_slice()).count();
            *counts.get_mut(name).unwrap() += n;
        }
    }
    counts
}

/// Most frequent trigrams over lowercase, stop-word-free tokens; ties ordered
/// lexicographically.
pub fn trigram_counts<S: AsRef<str>>(texts: &[S], top_n: usize) -> Vec<(String, usize)> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        let toks: Vec<String> = rouge_tokens(text.as_ref())
            .into_iter()
            .filter(|t| !is_stopword(t))
            .collect();
        for w in toks.windows(3) {
            *counts.entry(w.join(" ")).or_insert(0) += 1;
        }
    }
    let mut out: Vec<(String, usize)> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out.truncate(top_n);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashBowEncoder;
    use proptest::prelude::*;

    #[test]
    fn rouge_examples() {
        let s = rouge1("remote code execution", "Remote code execution.");
        assert_eq!((s.recall, s.precision, s.f1), (1.0, 1.0, 1.0));
        assert_eq!(rouge1("alpha beta", "gamma delta"), RougeScore::ZERO);
        let s = rouge1("a b b c", "b c d");
        assert_eq!(s.recall, 2.0 / 3.0);
        assert_eq!(s.precision, 2.0 / 4.0);
        assert!((s.f1 - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(rouge1("", ""), RougeScore::ZERO);
        assert_eq!(rouge1("x", ""), RougeScore::ZERO);
    }

    #[test]
    fn similarity_report_examples() {
        let enc = HashBowEncoder::new("b");
        let pairs = vec![("same text".to_string(), "same text".to_string()); 3];
        let r = similarity_report(&pairs, &enc).unwrap();
        assert!((r.mean.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.histogram[9], 3);
        let r = similarity_report(&[], &enc).unwrap();
        assert!(r.histogram.is_empty() && r.mean.is_none());
    }

    #[test]
    fn similarity_report_matches_direct_cosines() {
        let enc = HashBowEncoder::new("b");
        let pairs: Vec<(String, String)> = [
            ("heap overflow in parser", "parser heap overflow"),
            ("sql injection via login", "cross site scripting"),
            ("use after free in renderer", "renderer use after free bug"),
            ("denial of service", "service crash"),
            ("path traversal", "directory traversal in upload"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let r = similarity_report(&pairs, &enc).unwrap();
        for ((g, t), s) in pairs.iter().zip(&r.scores) {
            assert_eq!(*s, cosine(&enc.embed(g), &enc.embed(t)).unwrap());
        }
        assert_eq!(r.histogram.iter().sum::<usize>(), 5);
    }

    #[test]
    fn corpus_stats_examples() {
        let s = corpus_stats(&["a b", "a b"]);
        assert_eq!((s.words.mean, s.words.std), (2.0, 0.0));
        assert_eq!(corpus_stats(&["one two three"]).words.std, 0.0);

        // words 1,2,3,6 → mean 3, pop var (4+1+0+9)/4 = 3.5
        // chars 1,3,6,13 → mean 5.75, pop var (22.5625+7.5625+0.0625+52.5625)/4 = 20.6875
        // sentences 1,1,2,3 → mean 1.75, pop var (0.5625*2+0.0625+1.5625)/4 = 0.6875
        let s = corpus_stats(&["a", "a b", "a. b c", "x. y. z w v u"]);
        assert_eq!(s.words.mean, 3.0);
        assert!((s.words.std - 3.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.chars.mean, 5.75);
        assert!((s.chars.std - 20.6875f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.sentences.mean, 1.75);
        assert!((s.sentences.std - 0.6875f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.length_histogram["0-25"], 4);
    }

    #[test]
    fn length_buckets_follow_histogram_edges() {
        assert_eq!(length_bucket(0), 0);
        assert_eq!(length_bucket(25), 0);
        assert_eq!(length_bucket(26), 1);
        assert_eq!(length_bucket(200), 7);
        assert_eq!(length_bucket(201), 8);
    }

    #[test]
    fn entity_examples() {
        let gz = vec![
            "XSS".to_string(),
            "Cisco".to_string(),
            "Java SE".to_string(),
            "Absent".to_string(),
        ];
        let c = entity_counts(&["XSS in Cisco XSS", "Java SE 8, and Java."], &gz);
        assert_eq!(c["XSS"], 2);
        assert_eq!(c["Cisco"], 1);
        assert_eq!(c["Java SE"], 1);
        assert_eq!(c["Absent"], 0);
        assert_eq!(entity_counts(&["xss"], &gz)["XSS"], 0);
    }

    #[test]
    fn bundled_gazetteer_has_frequent_names() {
        let gz = default_gazetteer();
        for name in ["XSS", "Cisco", "IBM", "Jenkins", "Firefox", "IBM X-Force ID", "Java SE"] {
            assert!(gz.iter().any(|g| g == name), "{name} missing");
        }
    }

    #[test]
    fn trigram_examples() {
        let t = trigram_counts(&["alpha beta gamma delta"], 10);
        assert_eq!(
            t,
            vec![("alpha beta gamma".to_string(), 1), ("beta gamma delta".to_string(), 1)]
        );
        assert!(trigram_counts(&["alpha beta"], 10).is_empty());
        // stop-words vanish before windows are formed
        assert_eq!(
            trigram_counts(&["could allow an attacker"], 1)[0].0,
            "could allow attacker"
        );
    }

    #[test]
    fn planted_trigram_heads_the_list() {
        let mut texts = vec!["remote attacker execute arbitrary code".to_string(); 5];
        texts.push("kernel memory leak".into());
        let t = trigram_counts(&texts, 3);
        assert_eq!(t[0].1, 5);
        // three trigrams tie at 5; lexicographic order decides
        assert_eq!(t[0].0, "attacker execute arbitrary");
        assert_eq!(t[1].0, "execute arbitrary code");
    }

    proptest! {
        #[test]
        fn rouge_swap_symmetry_and_bounds(g in "[a-d ]{0,30}", t in "[a-d ]{0,30}") {
            let a = rouge1(&g, &t);
            let b = rouge1(&t, &g);
            prop_assert_eq!(a.recall, b.precision);
            prop_assert_eq!(a.precision, b.recall);
            prop_assert!(a.f1 <= a.precision.max(a.recall) + 1e-12);
            prop_assert!(a.f1 <= 2.0 * a.precision.min(a.recall) + 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.f1));
        }

        #[test]
        fn histogram_counts_every_text(texts in proptest::collection::vec("[a-z ]{0,80}", 0..12)) {
            let s = corpus_stats(&texts);
            prop_assert_eq!(s.length_histogram.values().sum::<usize>(), texts.len());
        }
    }
}
