//! Seeded sampling and the extractive-overlap diagnostic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::AnnotateError;
use vulnforge_core::textprep::split_sentences;
use vulnforge_core::DatasetManifest;

/// `n` distinct instance ids drawn uniformly without replacement. Runs the
/// first `n` swaps of a forward Fisher–Yates shuffle over manifest order,
/// drawing each swap index from a ChaCha8 stream seeded with `seed`.
pub fn sample_batch(manifest: &DatasetManifest, n: usize, seed: u64) -> Result<Vec<String>, AnnotateError> {
    let mut ids: Vec<&str> = manifest.instances.iter().map(|i| i.cve_id.as_str()).collect();
    if n > ids.len() {
        return Err(AnnotateError::SampleSize { n, count: ids.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let j = rng.random_range(i..ids.len());
        ids.swap(i, j);
    }
    Ok(ids[..n].iter().map(|s| s.to_string()).collect())
}

fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fraction of the label's sentences that occur verbatim (up to whitespace)
/// in the augmented text. Zero when the label has no sentences.
pub fn extractive_ratio(label: &str, augmented_text: &str) -> f64 {
    let sentences = split_sentences(label);
    if sentences.is_empty() {
        return 0.0;
    }
    let haystack = squash(augmented_text);
    let copied = sentences.iter().filter(|s| haystack.contains(&squash(s))).count();
    copied as f64 / sentences.len() as f64
}
