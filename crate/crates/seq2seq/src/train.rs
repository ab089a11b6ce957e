//! Teacher-forced training with Adam over a seeded split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{example_loss_and_grad, teacher_forcing, Graph, ModelConfig, Seq2SeqParams, DEFAULT_SEED};
use crate::tensor::Tensor;
use crate::{ModelError, TrainError};
use vulnforge_core::DatasetManifest;
use vulnforge_tokenize::SubwordVocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub length_penalty: f64,
    pub repetition_penalty: f64,
    pub beams: usize,
    pub test_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
    /// Hard cap on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 8,
            epochs: 4,
            length_penalty: 8.0,
            repetition_penalty: 2.0,
            beams: 2,
            test_frac: 0.1,
            val_frac: 0.1,
            seed: DEFAULT_SEED,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        // lr = 0 is allowed: it freezes the parameters, which is a useful check.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.beams == 0 {
            return bad("batch_size, epochs and beams must be positive");
        }
        if !(self.length_penalty > 0.0 && self.repetition_penalty > 0.0) {
            return bad("penalties must be positive");
        }
        for f in [self.test_frac, self.val_frac] {
            if !(f > 0.0 && f < 1.0) {
                return bad("split fractions must lie in (0, 1)");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetField {
    Description,
    Label,
}

/// One tokenized training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub id: String,
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then `round(n·test_frac)` for test and
/// `round(rest·val_frac)` of the remainder for validation.
pub fn split_indices(n: usize, test_frac: f64, val_frac: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_frac).round() as usize;
    let n_val = (((n - n_test) as f64) * val_frac).round() as usize;
    let test = idx[..n_test].to_vec();
    let val = idx[n_test..n_test + n_val].to_vec();
    let train = idx[n_test + n_val..].to_vec();
    Split { train, val, test }
}

/// Adaptive-moment optimizer, β = (0.9, 0.999), ε = 1e-8.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &Seq2SeqParams, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Seq2SeqParams, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v, p) = (&mut self.m[i].data, &mut self.v[i].data, &mut params.tensors[i].data);
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Gradient of the mean per-token loss over a batch. Examples run in
/// parallel; the reduction is sequential in batch order.
pub fn batch_gradients(params: &Seq2SeqParams, batch: &[&Pair]) -> Result<(f64, usize, Vec<Tensor>), ModelError> {
    let results: Vec<_> = batch
        .par_iter()
        .map(|p| example_loss_and_grad(params, &p.src, &p.tgt))
        .collect();
    let mut total = 0.0;
    let mut tokens = 0;
    let mut grads = params.zeros_like();
    for r in results {
        let (loss, n, g) = r?;
        total += loss;
        tokens += n;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    if tokens > 0 {
        let s = 1.0 / tokens as f64;
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    Ok((total, tokens, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Mean per-token cross-entropy.
    pub loss: f64,
    /// Fraction of target positions whose teacher-forced argmax is correct.
    pub token_accuracy: f64,
    pub tokens: usize,
}

pub fn evaluate(params: &Seq2SeqParams, pairs: &[&Pair]) -> Result<EvalStats, ModelError> {
    let per: Vec<_> = pairs
        .par_iter()
        .map(|p| -> Result<(f64, usize, usize), ModelError> {
            let (input, expected) = teacher_forcing(&p.tgt);
            let mut g = Graph::new(params);
            let mem = g.encode(&p.src, 0)?;
            let logits = g.decode(mem, &input, 0)?;
            let loss = g.tape.cross_entropy(logits, &expected);
            let l = g.tape.value(logits);
            let correct = expected
                .iter()
                .enumerate()
                .filter(|&(i, &t)| argmax(l.row(i)) == t)
                .count();
            Ok((g.tape.value(loss).data[0], correct, expected.len()))
        })
        .collect();
    let (mut loss, mut correct, mut tokens) = (0.0, 0, 0);
    for r in per {
        let (l, c, n) = r?;
        loss += l;
        correct += c;
        tokens += n;
    }
    if tokens == 0 {
        return Ok(EvalStats {
            loss: 0.0,
            token_accuracy: 0.0,
            tokens: 0,
        });
    }
    Ok(EvalStats {
        loss: loss / tokens as f64,
        token_accuracy: correct as f64 / tokens as f64,
        tokens,
    })
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curves: Vec<EpochLoss>,
    pub steps: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Trains from the given initial parameters. The split is drawn with the
/// config seed; batches are reshuffled every epoch from the same stream.
pub fn train_from(
    mut params: Seq2SeqParams,
    pairs: &[Pair],
    tcfg: &TrainConfig,
) -> Result<(Seq2SeqParams, TrainReport), TrainError> {
    tcfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let split = split_indices(pairs.len(), tcfg.test_frac, tcfg.val_frac, tcfg.seed);
    if split.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let ids = |v: &[usize]| v.iter().map(|&i| pairs[i].id.clone()).collect::<Vec<_>>();
    let val: Vec<&Pair> = split.val.iter().map(|&i| &pairs[i]).collect();
    let mut order = split.train.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1));
    let mut adam = Adam::new(&params, tcfg.lr);
    let mut curves = Vec::new();
    let mut steps = 0;
    'epochs: for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut tokens) = (0.0, 0);
        let mut epoch_steps = 0;
        for chunk in order.chunks(tcfg.batch_size) {
            if tcfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<&Pair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (l, n, grads) = batch_gradients(&params, &batch)?;
            adam.step(&mut params, &grads);
            loss += l;
            tokens += n;
            steps += 1;
            epoch_steps += 1;
        }
        if epoch_steps == 0 {
            break 'epochs;
        }
        let stats = if val.is_empty() {
            None
        } else {
            Some(evaluate(&params, &val)?)
        };
        let entry = EpochLoss {
            epoch,
            steps,
            train_loss: loss / tokens.max(1) as f64,
            val_loss: stats.map(|s| s.loss),
            val_accuracy: stats.map(|s| s.token_accuracy),
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:?} after {steps} steps",
            entry.train_loss,
            entry.val_loss
        );
        curves.push(entry);
    }
    let report = TrainReport {
        curves,
        steps,
        train_ids: ids(&split.train),
        val_ids: ids(&split.val),
        test_ids: ids(&split.test),
    };
    Ok((params, report))
}

/// Initializes with the config seed and trains.
pub fn train_pairs(
    pairs: &[Pair],
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<(Seq2SeqParams, TrainReport), TrainError> {
    tcfg.validate()?;
    let params = Seq2SeqParams::init(mcfg, tcfg.seed)?;
    train_from(params, pairs, tcfg)
}

/// Tokenizes a manifest into pairs: source is the augmented text, target the
/// chosen field. Sources keep `max_src_len` tokens; targets keep
/// `max_tgt_len - 1` so the decoder input (start token + target) fits.
pub fn pairs_from_manifest(
    manifest: &DatasetManifest,
    target: TargetField,
    vocab: &SubwordVocab,
    mcfg: &ModelConfig,
) -> Result<Vec<Pair>, TrainError> {
    if manifest.instances.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if mcfg.vocab_size != vocab.id_count() {
        return Err(TrainError::Config(format!(
            "model vocab_size {} differs from the vocabulary's {} ids",
            mcfg.vocab_size,
            vocab.id_count()
        )));
    }
    let mut pairs = Vec::new();
    for inst in &manifest.instances {
        let tgt_text = match target {
            TargetField::Description => Some(inst.description.as_str()),
            TargetField::Label => inst.label.as_deref(),
        };
        let Some(tgt_text) = tgt_text else { continue };
        let source = if inst.augmented_text.trim().is_empty() {
            &inst.description
        } else {
            &inst.augmented_text
        };
        let mut src = vocab.encode_ids(source);
        src.truncate(mcfg.max_src_len);
        let mut tgt = vocab.encode_ids(tgt_text);
        tgt.truncate(mcfg.max_tgt_len.saturating_sub(1));
        if src.is_empty() {
            continue;
        }
        pairs.push(Pair {
            id: inst.cve_id.clone(),
            src,
            tgt,
        });
    }
    if pairs.is_empty() {
        return Err(match target {
            TargetField::Label => TrainError::NoLabels,
            TargetField::Description => TrainError::EmptyDataset,
        });
    }
    Ok(pairs)
}

pub fn train(
    manifest: &DatasetManifest,
    target: TargetField,
    vocab: &SubwordVocab,
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<(Seq2SeqParams, TrainReport), TrainError> {
    let pairs = pairs_from_manifest(manifest, target, vocab, mcfg)?;
    train_pairs(&pairs, tcfg, mcfg)
}
