//! Byte-level symbols and word splitting shared by both vocabulary kinds.
//!
//! Text is split on ASCII spaces. Every piece starts with [`WORD_MARKER`] and
//! its remaining bytes are mapped to printable stand-ins (the GPT-2 byte table),
//! so each `char` of a piece is exactly one symbol. The marker never collides
//! with a mapped byte.

use std::collections::BTreeMap;
use std::sync::OnceLock;

pub const WORD_MARKER: char = '\u{2581}';

fn tables() -> &'static ([char; 256], BTreeMap<char, u8>) {
    static T: OnceLock<([char; 256], BTreeMap<char, u8>)> = OnceLock::new();
    T.get_or_init(|| {
        let printable = |b: u8| (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || b >= 0xAE;
        let mut fwd = ['\0'; 256];
        let mut next = 256u32;
        for b in 0..=255u8 {
            fwd[b as usize] = if printable(b) {
                char::from(b)
            } else {
                let c = char::from_u32(next).expect("valid code point");
                next += 1;
                c
            };
        }
        let inv = fwd.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        (fwd, inv)
    })
}

pub fn byte_symbol(b: u8) -> char {
    tables().0[b as usize]
}

pub fn symbol_byte(c: char) -> Option<u8> {
    tables().1.get(&c).copied()
}

/// Splits `text` into marker-prefixed pieces of symbols. `""` gives no pieces;
/// consecutive spaces give marker-only pieces so the split is lossless.
pub fn pieces(text: &str) -> Vec<String> {
    if text.is_empty() {
        return Vec::new();
    }
    let mut out = vec![WORD_MARKER.to_string()];
    for b in text.bytes() {
        if b == b' ' {
            out.push(WORD_MARKER.to_string());
        } else {
            out.last_mut().expect("non-empty").push(byte_symbol(b));
        }
    }
    out
}

/// Distinct pieces of a corpus with their frequencies.
pub fn piece_counts<S: AsRef<str>>(corpus: &[S]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for text in corpus {
        for p in pieces(text.as_ref()) {
            *counts.entry(p).or_insert(0) += 1;
        }
    }
    counts
}

/// Inverse of [`pieces`] over a stream of symbol strings. `None` entries stand
/// for unknown positions and decode to U+FFFD.
pub fn desymbolize<'a>(parts: impl IntoIterator<Item = Option<&'a str>>) -> String {
    const REPLACEMENT: &[u8] = "\u{FFFD}".as_bytes();
    let mut bytes = Vec::new();
    let mut first = true;
    for part in parts {
        match part {
            None => bytes.extend_from_slice(REPLACEMENT),
            Some(s) => {
                for c in s.chars() {
                    if c == WORD_MARKER {
                        // the very first marker was added by `pieces`, not by a space
                        if !(first && bytes.is_empty()) {
                            bytes.push(b' ');
                        }
                    } else if let Some(b) = symbol_byte(c) {
                        bytes.push(b);
                    } else {
                        bytes.extend_from_slice(REPLACEMENT);
                    }
                    first = false;
                }
            }
        }
        first = false;
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_table_is_a_bijection_onto_printables() {
        let mut seen = std::collections::HashSet::new();
        for b in 0..=255u8 {
            let c = byte_symbol(b);
            assert!(!c.is_whitespace() && !c.is_control(), "byte {b} maps to {c:?}");
            assert_ne!(c, WORD_MARKER);
            assert!(seen.insert(c));
            assert_eq!(symbol_byte(c), Some(b));
        }
        assert_eq!(byte_symbol(b'a'), 'a');
        assert_eq!(byte_symbol(b'\n'), '\u{10A}');
    }

    #[test]
    fn pieces_examples() {
        assert!(pieces("").is_empty());
        assert_eq!(pieces("low lower"), vec!["\u{2581}low", "\u{2581}lower"]);
        assert_eq!(pieces(" a  b"), vec!["\u{2581}", "\u{2581}a", "\u{2581}", "\u{2581}b"]);
    }

    #[test]
    fn desymbolize_inverts_pieces() {
        for s in ["", "a", " lead", "trail ", "x  y", "caf\u{e9} \u{2581}\n\t"] {
            let p = pieces(s);
            assert_eq!(desymbolize(p.iter().map(|x| Some(x.as_str()))), s);
        }
    }
}
