//! Decoding strategies over any next-token model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{encode_src, next_logits, Seq2SeqParams, DEFAULT_SEED};
use crate::tensor::{log_softmax, softmax_in_place, Tensor};
use crate::train::argmax;
use crate::{GenerateError, ModelError};
use vulnforge_tokenize::{SubwordVocab, BOS_ID, EOS_ID};

/// Anything that scores the next token after a prefix starting with `<s>`.
pub trait StepModel {
    fn next_logits(&self, prefix: &[u32]) -> Result<Vec<f64>, ModelError>;
}

/// The transformer decoder against fixed encoder states.
pub struct Decoder<'a> {
    params: &'a Seq2SeqParams,
    states: Tensor,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a Seq2SeqParams, src: &[u32]) -> Result<Self, ModelError> {
        Ok(Decoder {
            params,
            states: encode_src(params, src)?,
        })
    }
}

impl StepModel for Decoder<'_> {
    fn next_logits(&self, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        next_logits(self.params, prefix, &self.states)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Strategy {
    Beam,
    Greedy,
    TopK(usize),
    Nucleus(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beams: usize,
    /// Exponent α in the beam score `Σ log p / len^α`.
    pub length_penalty: f64,
    pub repetition_penalty: f64,
    pub seed: u64,
    /// Generated tokens (including the end token); `None` uses the model's
    /// target limit.
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Beam,
            beams: 2,
            length_penalty: 8.0,
            repetition_penalty: 2.0,
            seed: DEFAULT_SEED,
            max_len: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.beams < 1 {
            return Err(GenerateError::Config("beams must be at least 1".into()));
        }
        match self.strategy {
            Strategy::TopK(0) => return Err(GenerateError::Config("top-k needs k ≥ 1".into())),
            Strategy::Nucleus(p) if !(p > 0.0 && p <= 1.0) => {
                return Err(GenerateError::Config(format!(
                    "nucleus threshold {p} is outside (0, 1]"
                )))
            }
            _ => {}
        }
        if !(self.repetition_penalty > 0.0 && self.repetition_penalty.is_finite()) {
            return Err(GenerateError::Config("repetition_penalty must be positive".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(GenerateError::Config("length_penalty must be finite".into()));
        }
        Ok(())
    }
}

/// Rescales logits of tokens already generated: positive logits are divided
/// by the penalty, negative ones multiplied. The start token is not counted.
pub fn apply_repetition_penalty(logits: &mut [f64], prefix: &[u32], penalty: f64) {
    if penalty == 1.0 {
        return;
    }
    let mut seen = vec![false; logits.len()];
    for &t in prefix.iter().skip(1) {
        let t = t as usize;
        if t < logits.len() && !seen[t] {
            seen[t] = true;
            let l = &mut logits[t];
            *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
        }
    }
}

fn step_logprobs<M: StepModel>(model: &M, prefix: &[u32], penalty: f64) -> Result<Vec<f64>, ModelError> {
    let mut logits = model.next_logits(prefix)?;
    apply_repetition_penalty(&mut logits, prefix, penalty);
    Ok(log_softmax(&logits))
}

/// A decoded hypothesis: generated ids (end token included when reached).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub score: f64,
}

fn score(logprob: f64, len: usize, alpha: f64) -> f64 {
    logprob / (len.max(1) as f64).powf(alpha)
}

pub fn greedy<M: StepModel>(model: &M, max_len: usize, penalty: f64) -> Result<Hypothesis, ModelError> {
    let mut prefix = vec![BOS_ID];
    let mut logprob = 0.0;
    while prefix.len() <= max_len {
        let lp = step_logprobs(model, &prefix, penalty)?;
        let t = argmax(&lp);
        logprob += lp[t];
        prefix.push(t as u32);
        if t as u32 == EOS_ID {
            break;
        }
    }
    let tokens = prefix[1..].to_vec();
    Ok(Hypothesis {
        score: logprob,
        logprob,
        tokens,
    })
}

/// Keeps the `beams` best partial hypotheses by cumulative log probability.
/// Hypotheses that emit the end token are set aside; the survivors of the
/// final step count as finished too. The winner maximizes the
/// length-normalized score. Ties keep the earlier beam and smaller token id,
/// so one beam reproduces greedy decoding exactly.
pub fn beam_search<M: StepModel>(
    model: &M,
    beams: usize,
    max_len: usize,
    alpha: f64,
    penalty: f64,
) -> Result<Hypothesis, ModelError> {
    let mut alive: Vec<(Vec<u32>, f64)> = vec![(vec![BOS_ID], 0.0)];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (b, (prefix, lp)) in alive.iter().enumerate() {
            let step = step_logprobs(model, prefix, penalty)?;
            cands.extend(step.iter().enumerate().map(|(t, &l)| (b, t, lp + l)));
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut next = Vec::with_capacity(beams);
        for &(b, t, lp) in cands.iter().take(beams) {
            let mut p = alive[b].0.clone();
            p.push(t as u32);
            if t as u32 == EOS_ID {
                finished.push((p, lp));
            } else {
                next.push((p, lp));
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    finished.extend(alive);
    let best = finished
        .into_iter()
        .map(|(p, lp)| {
            let tokens = p[1..].to_vec();
            Hypothesis {
                score: score(lp, tokens.len(), alpha),
                logprob: lp,
                tokens,
            }
        })
        .reduce(|best, h| if h.score > best.score { h } else { best })
        .expect("beam search always keeps a hypothesis");
    Ok(best)
}

fn sample(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            if r < p {
                return i;
            }
            r -= p;
        }
    }
    // rounding fell past the end: take the last token with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Keeps the `k` largest logits (lower id wins ties) and renormalizes.
pub fn top_k_filter(logits: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut out = vec![f64::NEG_INFINITY; logits.len()];
    for &i in order.iter().take(k) {
        out[i] = logits[i];
    }
    softmax_in_place(&mut out);
    out
}

/// Smallest most-probable set whose mass reaches `p`, renormalized.
pub fn nucleus_filter(logits: &[f64], p: f64) -> Vec<f64> {
    let mut probs = logits.to_vec();
    softmax_in_place(&mut probs);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        out[i] = probs[i];
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    out.iter_mut().for_each(|v| *v /= mass);
    out
}

pub fn sample_sequence<M: StepModel>(
    model: &M,
    strategy: Strategy,
    max_len: usize,
    penalty: f64,
    seed: u64,
) -> Result<Hypothesis, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prefix = vec![BOS_ID];
    let mut logprob = 0.0;
    while prefix.len() <= max_len {
        let mut logits = model.next_logits(&prefix)?;
        apply_repetition_penalty(&mut logits, &prefix, penalty);
        let probs = match strategy {
            Strategy::TopK(k) => top_k_filter(&logits, k),
            Strategy::Nucleus(p) => nucleus_filter(&logits, p),
            Strategy::Beam | Strategy::Greedy => unreachable!("not a sampling strategy"),
        };
        let t = sample(&probs, &mut rng);
        logprob += probs[t].ln();
        prefix.push(t as u32);
        if t as u32 == EOS_ID {
            break;
        }
    }
    let tokens = prefix[1..].to_vec();
    Ok(Hypothesis {
        score: logprob,
        logprob,
        tokens,
    })
}

/// Runs the configured strategy.
pub fn decode<M: StepModel>(model: &M, dcfg: &DecodeConfig, max_len: usize) -> Result<Hypothesis, GenerateError> {
    dcfg.validate()?;
    let max_len = dcfg.max_len.unwrap_or(max_len).min(max_len);
    let pen = dcfg.repetition_penalty;
    Ok(match dcfg.strategy {
        Strategy::Greedy => greedy(model, max_len, pen)?,
        Strategy::Beam => beam_search(model, dcfg.beams, max_len, dcfg.length_penalty, pen)?,
        s => sample_sequence(model, s, max_len, pen, dcfg.seed)?,
    })
}

/// Source ids to generated ids (end token stripped).
pub fn generate_ids(params: &Seq2SeqParams, src: &[u32], dcfg: &DecodeConfig) -> Result<Vec<u32>, GenerateError> {
    dcfg.validate()?;
    let mut src = src.to_vec();
    src.truncate(params.config().max_src_len);
    let dec = Decoder::new(params, &src)?;
    let limit = params.config().max_tgt_len.saturating_sub(1).max(1);
    let mut h = decode(&dec, dcfg, limit)?;
    if h.tokens.last() == Some(&EOS_ID) {
        h.tokens.pop();
    }
    Ok(h.tokens)
}

/// Text in, summary text out.
pub fn generate(
    src_text: &str,
    params: &Seq2SeqParams,
    vocab: &SubwordVocab,
    dcfg: &DecodeConfig,
) -> Result<String, GenerateError> {
    if vocab.id_count() != params.config().vocab_size {
        return Err(GenerateError::Config(format!(
            "vocabulary has {} ids but the model expects {}",
            vocab.id_count(),
            params.config().vocab_size
        )));
    }
    let src = vocab.encode_ids(src_text);
    let ids = generate_ids(params, &src, dcfg)?;
    Ok(vocab.decode_ids(&ids))
}
