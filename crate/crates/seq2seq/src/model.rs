//! Post-LN encoder-decoder transformer built on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::ModelError;
use vulnforge_tokenize::{BOS_ID, EOS_ID};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosKind {
    LearnedAbsolute,
    /// Clipped relative-position edges in every self-attention layer.
    Relative,
    /// No positional information at all (ablation only).
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Encoder and decoder layers each.
    pub layers: usize,
    pub ffn_dim: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub pos_kind: PosKind,
    /// Relative distances are clipped to `±rel_clip`.
    pub rel_clip: usize,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            heads: 4,
            layers: 2,
            ffn_dim: 256,
            max_src_len: 500,
            max_tgt_len: 250,
            pos_kind: PosKind::LearnedAbsolute,
            rel_clip: 8,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.vocab_size <= EOS_ID as usize {
            return bad("vocabulary must include the reserved ids");
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return bad("layers and ffn_dim must be positive");
        }
        if self.max_src_len == 0 || self.max_tgt_len == 0 {
            return bad("maximum lengths must be at least 1");
        }
        if self.pos_kind == PosKind::Relative && self.rel_clip == 0 {
            return bad("rel_clip must be positive for relative positions");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn pos_rows(&self) -> usize {
        self.max_src_len.max(self.max_tgt_len)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(usize),
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
struct AttnIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    /// Relative edge tables a^K and a^V.
    rel: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct LnIds {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct FfnIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncLayer {
    attn: AttnIds,
    ln1: LnIds,
    ffn: FfnIds,
    ln2: LnIds,
}

#[derive(Debug, Clone)]
struct DecLayer {
    attn: AttnIds,
    ln1: LnIds,
    cross: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
    ln3: LnIds,
}

#[derive(Debug, Clone)]
struct Ids {
    tok_emb: usize,
    pos_emb: Option<usize>,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    lm_w: usize,
    lm_b: usize,
}

struct LayoutBuilder {
    specs: Vec<(String, usize, usize, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push((name, rows, cols, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.w"), d_in, d_out, Init::Uniform(d_in));
        let b = self.add(format!("{prefix}.b"), 1, d_out, Init::Uniform(d_in));
        (w, b)
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds {
            g: self.add(format!("{prefix}.gain"), 1, d, Init::Ones),
            b: self.add(format!("{prefix}.bias"), 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, cfg: &ModelConfig, relative: bool) -> AttnIds {
        let d = cfg.d_model;
        let (wq, bq) = self.linear(&format!("{prefix}.q"), d, d);
        let (wk, bk) = self.linear(&format!("{prefix}.k"), d, d);
        let (wv, bv) = self.linear(&format!("{prefix}.v"), d, d);
        let (wo, bo) = self.linear(&format!("{prefix}.o"), d, d);
        let rel = relative.then(|| {
            let rows = 2 * cfg.rel_clip + 1;
            let dk = cfg.head_dim();
            (
                self.add(format!("{prefix}.rel_k"), rows, dk, Init::Uniform(dk)),
                self.add(format!("{prefix}.rel_v"), rows, dk, Init::Uniform(dk)),
            )
        });
        AttnIds {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            rel,
        }
    }

    fn ffn(&mut self, prefix: &str, cfg: &ModelConfig) -> FfnIds {
        let (w1, b1) = self.linear(&format!("{prefix}.in"), cfg.d_model, cfg.ffn_dim);
        let (w2, b2) = self.linear(&format!("{prefix}.out"), cfg.ffn_dim, cfg.d_model);
        FfnIds { w1, b1, w2, b2 }
    }
}

fn layout(cfg: &ModelConfig) -> (Vec<(String, usize, usize, Init)>, Ids) {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let d = cfg.d_model;
    let rel = cfg.pos_kind == PosKind::Relative;
    let tok_emb = b.add("tok_emb".into(), cfg.vocab_size, d, Init::Uniform(d));
    let pos_emb = (cfg.pos_kind == PosKind::LearnedAbsolute)
        .then(|| b.add("pos_emb".into(), cfg.pos_rows(), d, Init::Uniform(d)));
    let enc = (0..cfg.layers)
        .map(|l| EncLayer {
            attn: b.attn(&format!("enc.{l}.self"), cfg, rel),
            ln1: b.ln(&format!("enc.{l}.ln1"), d),
            ffn: b.ffn(&format!("enc.{l}.ffn"), cfg),
            ln2: b.ln(&format!("enc.{l}.ln2"), d),
        })
        .collect();
    let dec = (0..cfg.layers)
        .map(|l| DecLayer {
            attn: b.attn(&format!("dec.{l}.self"), cfg, rel),
            ln1: b.ln(&format!("dec.{l}.ln1"), d),
            cross: b.attn(&format!("dec.{l}.cross"), cfg, false),
            ln2: b.ln(&format!("dec.{l}.ln2"), d),
            ffn: b.ffn(&format!("dec.{l}.ffn"), cfg),
            ln3: b.ln(&format!("dec.{l}.ln3"), d),
        })
        .collect();
    let (lm_w, lm_b) = b.linear("lm_head", d, cfg.vocab_size);
    let ids = Ids {
        tok_emb,
        pos_emb,
        enc,
        dec,
        lm_w,
        lm_b,
    };
    (b.specs, ids)
}

/// All trainable tensors, one named group each.
#[derive(Debug, Clone)]
pub struct Seq2SeqParams {
    config: ModelConfig,
    names: Vec<String>,
    pub tensors: Vec<Tensor>,
    ids: Ids,
}

impl PartialEq for Seq2SeqParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.tensors == other.tensors
    }
}

impl Seq2SeqParams {
    /// Scaled uniform initialization, `U(±1/√fan_in)`, from a seeded stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (specs, ids) = layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, rows, cols, init) in specs {
            let mut t = Tensor::zeros(rows, cols);
            match init {
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for v in &mut t.data {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                Init::Ones => t.data.iter_mut().for_each(|v| *v = 1.0),
                Init::Zeros => {}
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Seq2SeqParams {
            config: config.clone(),
            names,
            tensors,
            ids,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let (specs, ids) = layout(config);
        if specs.len() != named.len() {
            return Err(ModelError::Shape(format!(
                "expected {} tensors, got {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, rows, cols, _), (got_name, t)) in specs.into_iter().zip(named) {
            if name != got_name || t.shape() != (rows, cols) {
                return Err(ModelError::Shape(format!(
                    "expected {name} {rows}x{cols}, got {got_name} {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(ModelError::Shape(format!("{name} has non-finite values")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Seq2SeqParams {
            config: config.clone(),
            names,
            tensors,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Absolute offsets of the first source and target position. Only used to
/// probe positional behaviour; normal calls use zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Offsets {
    pub src: usize,
    pub tgt: usize,
}

/// A computation graph over one parameter set.
pub struct Graph<'a> {
    pub tape: Tape,
    params: &'a Seq2SeqParams,
    vars: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a Seq2SeqParams) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            vars: vec![None; params.tensors.len()],
        }
    }

    fn p(&mut self, i: usize) -> Var {
        if let Some(v) = self.vars[i] {
            return v;
        }
        let v = self.tape.param(i, self.params.tensors[i].clone());
        self.vars[i] = Some(v);
        v
    }

    fn cfg(&self) -> &'a ModelConfig {
        &self.params.config
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        let size = self.cfg().vocab_size;
        match ids.iter().find(|&&i| i as usize >= size) {
            Some(&id) => Err(ModelError::TokenOutOfRange { id, size }),
            None => Ok(()),
        }
    }

    fn embed(&mut self, ids: &[u32], offset: usize) -> Result<Var, ModelError> {
        self.check_ids(ids)?;
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let table = self.p(self.params.ids.tok_emb);
        let x = self.tape.gather(table, &rows);
        let Some(pos) = self.params.ids.pos_emb else {
            return Ok(x);
        };
        let limit = self.cfg().pos_rows();
        if offset + ids.len() > limit {
            return Err(ModelError::TooLong {
                len: offset + ids.len(),
                max: limit,
            });
        }
        let positions: Vec<usize> = (offset..offset + ids.len()).collect();
        let table = self.p(pos);
        let p = self.tape.gather(table, &positions);
        Ok(self.tape.add(x, p))
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Var {
        let wv = self.p(w);
        let bv = self.p(b);
        let y = self.tape.matmul(x, wv);
        self.tape.add_row(y, bv)
    }

    fn layer_norm(&mut self, x: Var, ln: &LnIds) -> Var {
        let g = self.p(ln.g);
        let b = self.p(ln.b);
        self.tape.layer_norm(x, g, b)
    }

    /// Multi-head attention from `xq` over `xkv`. `rel_offsets` enables the
    /// relative edges with the given absolute offsets of query and key rows.
    fn attention(&mut self, a: &AttnIds, xq: Var, xkv: Var, causal: bool, rel_offsets: Option<(usize, usize)>) -> Var {
        let cfg = self.cfg();
        let dk = cfg.head_dim();
        let n = self.tape.value(xq).rows;
        let m = self.tape.value(xkv).rows;
        let q = self.linear(xq, a.wq, a.bq);
        let k = self.linear(xkv, a.wk, a.bk);
        let v = self.linear(xkv, a.wv, a.bv);

        let rel = match (a.rel, rel_offsets) {
            (Some(tables), Some((oq, ok))) => {
                let c = cfg.rel_clip as i64;
                let idx: Vec<usize> = (0..n)
                    .flat_map(|i| {
                        (0..m).map(move |j| {
                            let d = (j + ok) as i64 - (i + oq) as i64;
                            (d.clamp(-c, c) + c) as usize
                        })
                    })
                    .collect();
                Some((self.p(tables.0), self.p(tables.1), idx))
            }
            _ => None,
        };
        let mask = causal.then(|| {
            let mut t = Tensor::zeros(n, m);
            for i in 0..n {
                for j in (i + 1)..m {
                    t.data[i * m + j] = f64::NEG_INFINITY;
                }
            }
            self.tape.constant(t)
        });

        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = self.tape.slice_cols(q, h * dk, dk);
            let kh = self.tape.slice_cols(k, h * dk, dk);
            let vh = self.tape.slice_cols(v, h * dk, dk);
            let mut s = self.tape.matmul_bt(qh, kh);
            if let Some((rk, _, idx)) = &rel {
                let qa = self.tape.matmul_bt(qh, *rk);
                let e = self.tape.rel_gather(qa, m, idx.clone());
                s = self.tape.add(s, e);
            }
            s = self.tape.scale(s, 1.0 / (dk as f64).sqrt());
            if let Some(mk) = mask {
                s = self.tape.add(s, mk);
            }
            let w = self.tape.softmax(s);
            let mut o = self.tape.matmul(w, vh);
            if let Some((_, rv, idx)) = &rel {
                let width = 2 * cfg.rel_clip + 1;
                let spread = self.tape.rel_scatter(w, width, idx.clone());
                let ov = self.tape.matmul(spread, *rv);
                o = self.tape.add(o, ov);
            }
            heads.push(o);
        }
        let cat = self.tape.concat_cols(&heads);
        self.linear(cat, a.wo, a.bo)
    }

    fn ffn(&mut self, x: Var, f: &FfnIds) -> Var {
        let h = self.linear(x, f.w1, f.b1);
        let h = match self.cfg().activation {
            Activation::Gelu => self.tape.gelu(h),
            Activation::Identity => h,
        };
        self.linear(h, f.w2, f.b2)
    }

    /// Encoder stack over source ids.
    pub fn encode(&mut self, src: &[u32], offset: usize) -> Result<Var, ModelError> {
        if src.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let max = self.cfg().max_src_len;
        if src.len() > max {
            return Err(ModelError::TooLong { len: src.len(), max });
        }
        let mut x = self.embed(src, offset)?;
        let layers = self.params.ids.enc.clone();
        for l in &layers {
            let a = self.attention(&l.attn, x, x, false, Some((offset, offset)));
            let r = self.tape.add(x, a);
            x = self.layer_norm(r, &l.ln1);
            let f = self.ffn(x, &l.ffn);
            let r = self.tape.add(x, f);
            x = self.layer_norm(r, &l.ln2);
        }
        Ok(x)
    }

    /// Decoder stack plus LM head; returns logits for every prefix position.
    pub fn decode(&mut self, memory: Var, tgt_in: &[u32], offset: usize) -> Result<Var, ModelError> {
        if tgt_in.first() != Some(&BOS_ID) {
            return Err(ModelError::MissingStart);
        }
        let max = self.cfg().max_tgt_len;
        if tgt_in.len() > max {
            return Err(ModelError::TooLong { len: tgt_in.len(), max });
        }
        let mut y = self.embed(tgt_in, offset)?;
        let layers = self.params.ids.dec.clone();
        for l in &layers {
            let a = self.attention(&l.attn, y, y, true, Some((offset, offset)));
            let r = self.tape.add(y, a);
            y = self.layer_norm(r, &l.ln1);
            let c = self.attention(&l.cross, y, memory, false, None);
            let r = self.tape.add(y, c);
            y = self.layer_norm(r, &l.ln2);
            let f = self.ffn(y, &l.ffn);
            let r = self.tape.add(y, f);
            y = self.layer_norm(r, &l.ln3);
        }
        let (w, b) = (self.params.ids.lm_w, self.params.ids.lm_b);
        Ok(self.linear(y, w, b))
    }

    /// Adds a constant encoder output (for decoding against cached states).
    pub fn memory(&mut self, states: &Tensor) -> Var {
        self.tape.constant(states.clone())
    }
}

/// Encoder hidden states, `n x d_model`.
pub fn encode_src(params: &Seq2SeqParams, src: &[u32]) -> Result<Tensor, ModelError> {
    let mut g = Graph::new(params);
    let x = g.encode(src, 0)?;
    Ok(g.tape.value(x).clone())
}

/// Logits for the position after `prefix`, which must start with the start token.
pub fn next_logits(params: &Seq2SeqParams, prefix: &[u32], src_states: &Tensor) -> Result<Vec<f64>, ModelError> {
    if src_states.cols != params.config.d_model || src_states.rows == 0 {
        return Err(ModelError::Shape(format!(
            "encoder states {:?} do not match d_model {}",
            src_states.shape(),
            params.config.d_model
        )));
    }
    let mut g = Graph::new(params);
    let mem = g.memory(src_states);
    let logits = g.decode(mem, prefix, 0)?;
    let l = g.tape.value(logits);
    Ok(l.row(l.rows - 1).to_vec())
}

/// Next-token distribution after `prefix`.
pub fn decode_step(params: &Seq2SeqParams, prefix: &[u32], src_states: &Tensor) -> Result<Vec<f64>, ModelError> {
    let mut row = next_logits(params, prefix, src_states)?;
    crate::tensor::softmax_in_place(&mut row);
    Ok(row)
}

/// Teacher-forced logits for every target position.
pub fn forward_logits(
    params: &Seq2SeqParams,
    src: &[u32],
    tgt_in: &[u32],
    offsets: Offsets,
) -> Result<Tensor, ModelError> {
    let mut g = Graph::new(params);
    let mem = g.encode(src, offsets.src)?;
    let logits = g.decode(mem, tgt_in, offsets.tgt)?;
    Ok(g.tape.value(logits).clone())
}

/// Decoder input (`<s>` + target) and expected outputs (target + `</s>`).
pub fn teacher_forcing(tgt: &[u32]) -> (Vec<u32>, Vec<usize>) {
    let mut input = Vec::with_capacity(tgt.len() + 1);
    input.push(BOS_ID);
    input.extend_from_slice(tgt);
    let mut expected: Vec<usize> = tgt.iter().map(|&t| t as usize).collect();
    expected.push(EOS_ID as usize);
    (input, expected)
}

/// Summed token cross-entropy of one pair, the number of target tokens, and
/// the gradient for every parameter group (zeros where unused).
pub fn example_loss_and_grad(
    params: &Seq2SeqParams,
    src: &[u32],
    tgt: &[u32],
) -> Result<(f64, usize, Vec<Tensor>), ModelError> {
    let (input, expected) = teacher_forcing(tgt);
    let mut g = Graph::new(params);
    let mem = g.encode(src, 0)?;
    let logits = g.decode(mem, &input, 0)?;
    let loss = g.tape.cross_entropy(logits, &expected);
    let value = g.tape.value(loss).data[0];
    let mut grads = params.zeros_like();
    for (i, t) in g.tape.backward(loss) {
        grads[i].add_assign(&t);
    }
    Ok((value, expected.len(), grads))
}

/// Summed token cross-entropy without gradients.
pub fn example_loss(params: &Seq2SeqParams, src: &[u32], tgt: &[u32]) -> Result<f64, ModelError> {
    let (input, expected) = teacher_forcing(tgt);
    let mut g = Graph::new(params);
    let mem = g.encode(src, 0)?;
    let logits = g.decode(mem, &input, 0)?;
    let loss = g.tape.cross_entropy(logits, &expected);
    Ok(g.tape.value(loss).data[0])
}
