//! Text cleaning, the paragraph length gate, sentence splitting and token filtering.

use std::collections::{BTreeSet, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::model::Paragraph;

static STOPWORDS_TXT: &str = include_str!("../../../data/stopwords.txt");

/// Shortest token kept by [`filter_tokens`], in characters.
pub const MIN_TOKEN_CHARS: usize = 3;
/// Longest token kept by [`filter_tokens`], in characters.
pub const MAX_TOKEN_CHARS: usize = 20;

/// Bundled English stop-word list (179 entries, `data/stopwords.txt`).
pub fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS_TXT.lines().map(str::trim).filter(|l| !l.is_empty()).collect())
}

pub fn is_stopword(token: &str) -> bool {
    stopwords().contains(token)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StripClass {
    Urls,
    Emails,
    Phones,
    SpecialChars,
    RedundantWs,
}

impl StripClass {
    pub const ALL: [StripClass; 5] = [
        StripClass::Urls,
        StripClass::Emails,
        StripClass::Phones,
        StripClass::SpecialChars,
        StripClass::RedundantWs,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanPolicy {
    pub min_words: usize,
    pub strip: BTreeSet<StripClass>,
}

impl Default for CleanPolicy {
    fn default() -> Self {
        CleanPolicy {
            min_words: 20,
            strip: StripClass::ALL.into_iter().collect(),
        }
    }
}

impl CleanPolicy {
    fn strips(&self, class: StripClass) -> bool {
        self.strip.contains(&class)
    }
}

struct Patterns {
    url: Regex,
    email: Regex,
    phone: Regex,
    ws: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        url: Regex::new(r"(?i)\b(?:(?:https?|ftp)://|www\.)\S+").unwrap(),
        email: Regex::new(r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)+").unwrap(),
        phone: Regex::new(r"\+?(?:\(\d+\)|\d+)(?:[ \-]?(?:\(\d+\)|\d+))*").unwrap(),
        ws: Regex::new(r"\s+").unwrap(),
    })
}

fn is_kept_char(c: char) -> bool {
    c.is_alphanumeric() || c.is_whitespace() || matches!(c, '.' | ',' | ':' | ';' | '-' | '(' | ')' | '/' | '\'')
}

/// Phone-like runs: at least seven digits, not glued to a word or a version/id
/// string on either side (so `CVE-2021-44228` and `1.2.3` survive).
fn strip_phones(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for m in patterns().phone.find_iter(text) {
        let digits = m.as_str().bytes().filter(u8::is_ascii_digit).count();
        if digits < 7 {
            continue;
        }
        let before = text[..m.start()].chars().next_back();
        let after = text[m.end()..].chars().next();
        let glued_before = before.is_some_and(|c| c.is_alphanumeric() || matches!(c, '-' | '.' | '/'));
        let glued_after = after.is_some_and(|c| c.is_alphanumeric() || c == '/')
            || (after == Some('.') && text[m.end() + 1..].starts_with(|c: char| c.is_ascii_digit()));
        if glued_before || glued_after {
            continue;
        }
        out.push_str(&text[last..m.start()]);
        out.push(' ');
        last = m.end();
    }
    out.push_str(&text[last..]);
    out
}

fn clean_once(text: &str, policy: &CleanPolicy) -> String {
    let p = patterns();
    let mut s: String = text.nfc().collect();
    if policy.strips(StripClass::Urls) {
        s = p.url.replace_all(&s, " ").into_owned();
    }
    if policy.strips(StripClass::Emails) {
        s = p.email.replace_all(&s, " ").into_owned();
    }
    if policy.strips(StripClass::SpecialChars) {
        s = s.chars().map(|c| if is_kept_char(c) { c } else { ' ' }).collect();
    }
    if policy.strips(StripClass::Phones) {
        s = strip_phones(&s);
    }
    if policy.strips(StripClass::RedundantWs) {
        s = p.ws.replace_all(s.trim(), " ").into_owned();
    }
    s
}

/// Removes the policy's strip classes. Runs to a fixed point so that
/// `clean(clean(x)) == clean(x)` even when one removal exposes another match.
pub fn clean(text: &str, policy: &CleanPolicy) -> String {
    let mut cur = clean_once(text, policy);
    for _ in 0..8 {
        let next = clean_once(&cur, policy);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

/// Cleans a scraped paragraph in place and returns whether it is long enough to keep.
pub fn prepare_paragraph(p: &mut Paragraph, policy: &CleanPolicy) -> bool {
    p.set_cleaned(clean(&p.raw, policy));
    passes_length_gate(p, policy)
}

pub fn passes_length_gate(p: &Paragraph, policy: &CleanPolicy) -> bool {
    p.cleaned.split_whitespace().count() >= policy.min_words
}

/// Splits on the `". "` separator, dropping blank pieces.
pub fn split_sentences(text: &str) -> Vec<String> {
    text.split(". ")
        .filter(|s| !s.trim().is_empty())
        .map(str::to_string)
        .collect()
}

/// Inverse of [`split_sentences`] on its own output.
pub fn join_sentences(sentences: &[String]) -> String {
    sentences.join(". ")
}

/// Drops stop-words and tokens outside the 3..=20 character range, keeping order.
pub fn filter_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| {
            let n = t.chars().count();
            (MIN_TOKEN_CHARS..=MAX_TOKEN_CHARS).contains(&n) && !is_stopword(t)
        })
        .map(str::to_string)
        .collect()
}

/// Lowercased word tokens with surrounding punctuation trimmed.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_clean(s: &str) -> String {
        clean(s, &CleanPolicy::default())
    }

    #[test]
    fn stopword_list_is_bundled_and_sorted() {
        let lines: Vec<&str> = STOPWORDS_TXT.lines().collect();
        assert_eq!(lines.len(), 179);
        assert_eq!(stopwords().len(), 179);
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(lines, sorted);
    }

    #[test]
    fn strips_urls_and_spaces() {
        assert_eq!(default_clean("See https://x.io/a  now"), "See now");
        assert_eq!(default_clean("visit www.vendor.com/advisory today"), "visit today");
    }

    #[test]
    fn strips_email_and_phone() {
        assert_eq!(default_clean("mail me a@b.com or +1-407-823-1294"), "mail me or");
        assert_eq!(default_clean("call (407) 823 1294 now"), "call now");
    }

    #[test]
    fn plain_text_is_a_fixed_point() {
        assert_eq!(default_clean("plain text"), "plain text");
    }

    #[test]
    fn keeps_versions_and_cve_ids() {
        let s = "Fixed in 9.4.1 for CVE-2021-44228; see release 2021.10.01.";
        assert_eq!(default_clean(s), s);
    }

    #[test]
    fn short_digit_runs_are_not_phones() {
        assert_eq!(default_clean("port 8080 and 443"), "port 8080 and 443");
    }

    #[test]
    fn special_characters_removed() {
        assert_eq!(default_clean("a <b> & c™ d"), "a b c d");
        assert_eq!(default_clean("keep: a, b; (c) d/e it's"), "keep: a, b; (c) d/e it's");
    }

    #[test]
    fn length_gate_boundary() {
        let policy = CleanPolicy::default();
        let mut p = Paragraph::new("u", 0, "");
        p.set_cleaned(vec!["w"; 19].join(" "));
        assert!(!passes_length_gate(&p, &policy));
        p.set_cleaned(vec!["w"; 20].join(" "));
        assert!(passes_length_gate(&p, &policy));
        p.set_cleaned(String::new());
        assert!(!passes_length_gate(&p, &policy));
    }

    #[test]
    fn sentence_split_examples() {
        assert_eq!(split_sentences("A b. C d."), vec!["A b", "C d."]);
        assert_eq!(split_sentences("no period here"), vec!["no period here"]);
        assert_eq!(split_sentences("x. y. z"), vec!["x", "y", "z"]);
        assert!(split_sentences("").is_empty());
    }

    #[test]
    fn token_filter_examples() {
        assert_eq!(
            filter_tokens(&["the", "xss", "is", "overflow"]),
            vec!["xss", "overflow"]
        );
        assert!(filter_tokens(&["ab"]).is_empty());
        assert!(filter_tokens(&["a".repeat(21)]).is_empty());
        assert_eq!(filter_tokens(&["a".repeat(20)]).len(), 1);
    }

    fn messy_text() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                "[a-zA-Z]{1,8}",
                "[0-9]{1,5}",
                Just("https://host.example/p?q=1".to_string()),
                Just("user@mail.example.org".to_string()),
                Just("+44 20 7946 0958".to_string()),
                "[ \t\n]{1,3}",
                "[#@!&*%$<>.,;:()/'-]{1,2}",
                Just("é".to_string()),
            ],
            0..24,
        )
        .prop_map(|parts| parts.join(""))
    }

    proptest! {
        #[test]
        fn clean_is_idempotent_and_never_grows(s in messy_text()) {
            let once = default_clean(&s);
            prop_assert_eq!(default_clean(&once), once.clone());
            prop_assert!(once.len() <= s.len());
            prop_assert!(!once.contains("  "));
            prop_assert_eq!(once.trim(), once.as_str());
        }

        #[test]
        fn split_join_is_identity_on_split_output(s in "[a-z .]{0,40}") {
            let parts = split_sentences(&s);
            prop_assert_eq!(split_sentences(&join_sentences(&parts)), parts.clone());
            prop_assert!(parts.iter().all(|p| !p.trim().is_empty()));
        }

        #[test]
        fn filter_output_is_subsequence(tokens in proptest::collection::vec("[a-z]{1,24}", 0..20)) {
            let kept = filter_tokens(&tokens);
            let mut it = tokens.iter();
            for k in &kept {
                prop_assert!(it.any(|t| t == k));
            }
        }
    }
}
