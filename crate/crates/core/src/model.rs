//! Language-aware transformer encoder with a language-conditioned MLM head.
//!
//! Parameters live in a flat, name-ordered list owned by [`Model`]. Each
//! forward pass copies them into a fresh [`Graph`] as trainable leaves, so the
//! model itself is immutable during evaluation and can be shared across
//! threads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::examplegen::TrainingExample;
use crate::lang::LangId;
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{self, Vocab, CLS, NUM_SPECIAL, PAD, SEP};
use crate::{par, rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub lang_count: usize,
    pub lang_emb_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub conditioning_enabled: bool,
    pub tie_output_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            hidden: 64,
            layers: 4,
            heads: 4,
            ffn_dim: 256,
            lang_count: 2,
            lang_emb_dim: 64,
            max_positions: 64,
            dropout: 0.1,
            conditioning_enabled: true,
            tie_output_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= NUM_SPECIAL as usize {
            return Err(Error::config("vocab_size", "must exceed the special-token count"));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config("heads", "hidden must be a positive multiple of heads"));
        }
        if self.lang_emb_dim == 0 || self.lang_emb_dim > self.hidden {
            return Err(Error::config("lang_emb_dim", "must lie in 1..=hidden"));
        }
        if self.lang_count == 0 {
            return Err(Error::config("lang_count", "must be >= 1"));
        }
        if self.ffn_dim == 0 {
            return Err(Error::config("ffn_dim", "must be >= 1"));
        }
        if self.max_positions < 3 {
            return Err(Error::config("max_positions", "must be >= 3"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    fn head_input(&self) -> usize {
        if self.conditioning_enabled {
            self.hidden + self.lang_emb_dim
        } else {
            self.hidden
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug)]
struct LayerIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    token_emb: usize,
    pos_emb: usize,
    seg_emb: usize,
    lang_emb: usize,
    emb_ln_g: usize,
    emb_ln_b: usize,
    layers: Vec<LayerIdx>,
    head_w1: usize,
    head_b1: usize,
    head_ln_g: usize,
    head_ln_b: usize,
    out_bias: usize,
    out_weight: Option<usize>,
}

struct Spec {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Spec {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.names.push(name.into());
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }
}

fn layout(cfg: &ModelConfig) -> (Layout, Spec) {
    use Init::*;
    let (h, f, v) = (cfg.hidden, cfg.ffn_dim, cfg.vocab_size);
    let mut s = Spec { names: vec![], shapes: vec![], inits: vec![] };
    let token_emb = s.add("embeddings.token", &[v, h], Normal);
    let pos_emb = s.add("embeddings.position", &[cfg.max_positions, h], Normal);
    let seg_emb = s.add("embeddings.segment", &[2, h], Normal);
    let lang_emb = s.add("embeddings.language", &[cfg.lang_count, cfg.lang_emb_dim], Normal);
    let emb_ln_g = s.add("embeddings.ln.gain", &[h], Ones);
    let emb_ln_b = s.add("embeddings.ln.bias", &[h], Zeros);
    let layers = (0..cfg.layers)
        .map(|l| {
            let mut p = |n: &str, shape: &[usize], init| s.add(format!("layer{l}.{n}"), shape, init);
            LayerIdx {
                wq: p("attn.q.weight", &[h, h], Normal),
                bq: p("attn.q.bias", &[h], Zeros),
                wk: p("attn.k.weight", &[h, h], Normal),
                bk: p("attn.k.bias", &[h], Zeros),
                wv: p("attn.v.weight", &[h, h], Normal),
                bv: p("attn.v.bias", &[h], Zeros),
                wo: p("attn.out.weight", &[h, h], Normal),
                bo: p("attn.out.bias", &[h], Zeros),
                ln1_g: p("attn.ln.gain", &[h], Ones),
                ln1_b: p("attn.ln.bias", &[h], Zeros),
                w1: p("ffn.in.weight", &[h, f], Normal),
                b1: p("ffn.in.bias", &[f], Zeros),
                w2: p("ffn.out.weight", &[f, h], Normal),
                b2: p("ffn.out.bias", &[h], Zeros),
                ln2_g: p("ffn.ln.gain", &[h], Ones),
                ln2_b: p("ffn.ln.bias", &[h], Zeros),
            }
        })
        .collect();
    let head_w1 = s.add("head.dense.weight", &[cfg.head_input(), h], Normal);
    let head_b1 = s.add("head.dense.bias", &[h], Zeros);
    let head_ln_g = s.add("head.ln.gain", &[h], Ones);
    let head_ln_b = s.add("head.ln.bias", &[h], Zeros);
    let out_bias = s.add("head.out.bias", &[v], Zeros);
    let out_weight = (!cfg.tie_output_embeddings).then(|| s.add("head.out.weight", &[v, h], Normal));
    let l = Layout {
        token_emb,
        pos_emb,
        seg_emb,
        lang_emb,
        emb_ln_g,
        emb_ln_b,
        layers,
        head_w1,
        head_b1,
        head_ln_g,
        head_ln_b,
        out_bias,
        out_weight,
    };
    (l, s)
}

pub const INIT_STD: f64 = 0.02;

/// Draws from N(0, σ²) truncated to ±2σ by rejection.
fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let n = Normal::new(0.0, std).expect("positive std");
    loop {
        let x: f64 = n.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

/// A padded batch in flat `[B·S]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub token_ids: Vec<usize>,
    pub lang_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub padding: Vec<bool>,
    /// Flat indices `b·S + p` of masked positions, example-major.
    pub masked: Vec<usize>,
    pub label_ids: Vec<usize>,
    pub label_langs: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&TrainingExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyInput("batch has no examples".into()));
        }
        let b = examples.len();
        let s = examples.iter().map(|e| e.len()).max().unwrap();
        let mut out = Batch {
            batch: b,
            seq: s,
            token_ids: vec![PAD as usize; b * s],
            lang_ids: vec![0; b * s],
            segment_ids: vec![0; b * s],
            padding: vec![true; b * s],
            masked: Vec::new(),
            label_ids: Vec::new(),
            label_langs: Vec::new(),
        };
        for (i, e) in examples.iter().enumerate() {
            for j in 0..s {
                let k = i * s + j;
                if j < e.len() {
                    out.token_ids[k] = e.token_ids[j] as usize;
                    out.lang_ids[k] = e.lang_ids[j].index();
                    out.segment_ids[k] = e.segment_ids[j] as usize;
                    out.padding[k] = false;
                } else {
                    out.lang_ids[k] = e.sentence_lang().index();
                }
            }
            for ((&p, &l), &ll) in e.masked_positions.iter().zip(&e.label_ids).zip(&e.label_lang_ids) {
                out.masked.push(i * s + p as usize);
                out.label_ids.push(l as usize);
                out.label_langs.push(ll.index());
            }
        }
        Ok(out)
    }

    /// Unmasked `[CLS] pieces [SEP]` rows for embedding sentences.
    pub fn from_pieces(rows: &[(&[u32], LangId)]) -> Result<Self> {
        let examples: Vec<TrainingExample> = rows
            .iter()
            .map(|(pieces, lang)| {
                let mut token_ids = vec![CLS];
                token_ids.extend_from_slice(pieces);
                token_ids.push(SEP);
                let n = token_ids.len();
                TrainingExample {
                    token_ids,
                    lang_ids: vec![*lang; n],
                    segment_ids: vec![0; n],
                    masked_positions: vec![],
                    label_ids: vec![],
                    label_lang_ids: vec![],
                }
            })
            .collect();
        Self::from_examples(&examples.iter().collect::<Vec<_>>())
    }
}

/// Handles into the graph produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// Trainable leaves, in the model's parameter order.
    pub params: Vec<Var>,
    /// `layers + 1` hidden states, each `[B·S, H]`; index 0 is the embedding
    /// output.
    pub hidden: Vec<Var>,
    /// Attention probabilities per layer, `[B·heads, S, S]`.
    pub attention: Vec<Var>,
    /// `[M, V]` logits at masked positions, absent when the batch has none.
    pub logits: Option<Var>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, spec) = layout(&config);
        let params = spec
            .shapes
            .iter()
            .zip(&spec.inits)
            .enumerate()
            .map(|(i, (shape, init))| match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, 1.0),
                Init::Normal => {
                    let mut r = rng::stream(seed, &[rng::tag::INIT, i as u64]);
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| truncated_normal(&mut r, INIT_STD)).collect();
                    Tensor::new(shape.clone(), data).expect("spec shape")
                }
            })
            .collect();
        Ok(Self { config, names: spec.names, params, layout })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    /// Weight matrices get weight decay; biases and layer-norm gains do not.
    pub fn decays(&self, index: usize) -> bool {
        self.params[index].shape().len() == 2
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let (layout, spec) = layout(&config);
        if params.len() != spec.shapes.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                spec.shapes.len(),
                params.len()
            )));
        }
        for ((p, s), n) in params.iter().zip(&spec.shapes).zip(&spec.names) {
            if p.shape() != &s[..] {
                return Err(Error::Checkpoint(format!("parameter `{n}` has shape {:?}, expected {s:?}", p.shape())));
            }
        }
        Ok(Self { config, names: spec.names, params, layout })
    }

    /// Runs the encoder and, when the batch has masked positions, the MLM
    /// head. Dropout is active only when `dropout_rng` is given.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, dropout_rng: Option<&mut rng::Rng>) -> Result<Forward> {
        let cfg = &self.config;
        let s = batch.seq;
        if s > cfg.max_positions {
            return Err(Error::OutOfRange { op: "position", index: s - 1, size: cfg.max_positions });
        }
        if let Some(&m) = batch.masked.iter().find(|&&m| batch.token_ids[m] == PAD as usize) {
            return Err(Error::Vocab(format!("[PAD] at masked position {m}")));
        }
        let params: Vec<Var> = self.params.iter().map(|t| g.param(t.clone())).collect();
        self.forward_on(g, &params, batch, dropout_rng)
    }

    /// [`Model::forward`] on parameter leaves the caller already placed in
    /// `g`, in the model's parameter order. Only the configuration and layout
    /// of `self` are used.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        params: &[Var],
        batch: &Batch,
        mut dropout_rng: Option<&mut rng::Rng>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let (b, s, h) = (batch.batch, batch.seq, cfg.hidden);
        if params.len() != self.params.len() {
            return Err(Error::Shape { op: "forward", lhs: vec![params.len()], rhs: vec![self.params.len()] });
        }
        let p = |i: usize| params[i];
        let l = &self.layout;
        let drop = |g: &mut Graph, x: Var, r: &mut Option<&mut rng::Rng>| match r {
            Some(r) => g.dropout(x, cfg.dropout, &mut **r),
            None => x,
        };

        let positions: Vec<usize> = (0..b * s).map(|k| k % s).collect();
        let tok = g.gather(p(l.token_emb), &batch.token_ids)?;
        let pos = g.gather(p(l.pos_emb), &positions)?;
        let seg = g.gather(p(l.seg_emb), &batch.segment_ids)?;
        let mut lang = g.gather(p(l.lang_emb), &batch.lang_ids)?;
        if cfg.lang_emb_dim < h {
            let zeros = g.constant(Tensor::zeros(&[b * s, h - cfg.lang_emb_dim]));
            lang = g.concat(lang, zeros)?;
        }
        let x = g.add(tok, pos)?;
        let x = g.add(x, seg)?;
        let x = g.add(x, lang)?;
        let x = g.layer_norm(x, p(l.emb_ln_g), p(l.emb_ln_b))?;
        let mut x = drop(g, x, &mut dropout_rng);

        let (a, dh) = (cfg.heads, h / cfg.heads);
        let mut hidden = vec![x];
        let mut attention = Vec::with_capacity(cfg.layers);
        for li in &l.layers {
            let split = |g: &mut Graph, w: usize, bias: usize| -> Result<Var> {
                let y = g.matmul(x, p(w))?;
                let y = g.add(y, p(bias))?;
                let y = g.reshape(y, &[b, s, a, dh])?;
                let y = g.permute(y, &[0, 2, 1, 3])?;
                g.reshape(y, &[b * a, s, dh])
            };
            let q = split(g, li.wq, li.bq)?;
            let k = split(g, li.wk, li.bk)?;
            let v = split(g, li.wv, li.bv)?;
            let scores = g.batch_matmul(q, k, true)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = g.attention_mask(scores, &batch.padding, a)?;
            let probs = g.softmax(scores);
            attention.push(probs);
            let probs = drop(g, probs, &mut dropout_rng);
            let ctx = g.batch_matmul(probs, v, false)?;
            let ctx = g.reshape(ctx, &[b, a, s, dh])?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[b * s, h])?;
            let o = g.matmul(ctx, p(li.wo))?;
            let o = g.add(o, p(li.bo))?;
            let o = drop(g, o, &mut dropout_rng);
            let r = g.add(x, o)?;
            let y = g.layer_norm(r, p(li.ln1_g), p(li.ln1_b))?;

            let f = g.matmul(y, p(li.w1))?;
            let f = g.add(f, p(li.b1))?;
            let f = g.gelu(f);
            let f = g.matmul(f, p(li.w2))?;
            let f = g.add(f, p(li.b2))?;
            let f = drop(g, f, &mut dropout_rng);
            let r = g.add(y, f)?;
            x = g.layer_norm(r, p(li.ln2_g), p(li.ln2_b))?;
            hidden.push(x);
        }

        let logits = if batch.masked.is_empty() {
            None
        } else {
            let hm = g.gather(x, &batch.masked)?;
            let hin = if cfg.conditioning_enabled {
                let le = g.gather(p(l.lang_emb), &batch.label_langs)?;
                g.concat(hm, le)?
            } else {
                hm
            };
            let z = g.matmul(hin, p(l.head_w1))?;
            let z = g.add(z, p(l.head_b1))?;
            let z = g.gelu(z);
            let z = g.layer_norm(z, p(l.head_ln_g), p(l.head_ln_b))?;
            let out_w = g.transpose(p(l.out_weight.unwrap_or(l.token_emb)))?;
            let logits = g.matmul(z, out_w)?;
            Some(g.add(logits, p(l.out_bias))?)
        };
        Ok(Forward { params: params.to_vec(), hidden, attention, logits })
    }

    /// Mean MLM cross-entropy of a batch, with the forward handles.
    pub fn mlm_loss(&self, g: &mut Graph, batch: &Batch, dropout_rng: Option<&mut rng::Rng>) -> Result<(Var, Forward)> {
        let fwd = self.forward(g, batch, dropout_rng)?;
        let logits = fwd.logits.ok_or_else(|| Error::EmptyInput("batch has no masked positions".into()))?;
        let loss = mlm_loss(g, logits, &batch.label_ids)?;
        Ok((loss, fwd))
    }

    /// Mean-pooled layer-`layer` states of pre-tokenised rows, excluding
    /// special and padded positions. Returns `[row][H]`.
    pub fn embed_pieces(&self, rows: &[(&[u32], LangId)], layer: usize) -> Result<Vec<Vec<f64>>> {
        Ok(self.embed_all_layers(rows)?.swap_remove(layer))
    }

    /// Like [`Model::embed_pieces`] for every layer at once: `[layer][row][H]`.
    pub fn embed_all_layers(&self, rows: &[(&[u32], LangId)]) -> Result<Vec<Vec<Vec<f64>>>> {
        for (i, (pieces, _)) in rows.iter().enumerate() {
            if !pieces.iter().any(|&t| !Vocab::is_special(t)) {
                return Err(Error::EmptyInput(format!("sentence {i} has no content tokens")));
            }
        }
        let mut g = Graph::new();
        let batch = Batch::from_pieces(rows)?;
        let fwd = self.forward(&mut g, &batch, None)?;
        let h = self.config.hidden;
        let s = batch.seq;
        let mut out = Vec::with_capacity(fwd.hidden.len());
        for &hv in &fwd.hidden {
            let states = g.value(hv);
            let layer = (0..rows.len())
                .map(|i| {
                    let mut acc = vec![0.0; h];
                    let mut n = 0usize;
                    for j in 0..s {
                        let k = i * s + j;
                        if batch.padding[k] || Vocab::is_special(batch.token_ids[k] as u32) {
                            continue;
                        }
                        for (a, v) in acc.iter_mut().zip(states.row(k)) {
                            *a += v;
                        }
                        n += 1;
                    }
                    acc.iter_mut().for_each(|a| *a /= n as f64);
                    acc
                })
                .collect();
            out.push(layer);
        }
        Ok(out)
    }

    /// Sentence vector at `layer` (0 = embedding output).
    pub fn embed_sentence(&self, text: &str, lang: LangId, layer: usize, vocab: &Vocab) -> Result<Vec<f64>> {
        if layer > self.config.layers {
            return Err(Error::OutOfRange { op: "embed_sentence", index: layer, size: self.config.layers + 1 });
        }
        let pieces = encode_for_model(text, lang, vocab, self.config.max_positions)?;
        Ok(self.embed_pieces(&[(&pieces, lang)], layer)?.remove(0))
    }

    /// Embeds many sentences at every layer in fixed-size batches, optionally
    /// in parallel. Output is independent of `workers`.
    pub fn embed_corpus(
        &self,
        sentences: &[(Vec<u32>, LangId)],
        batch_size: usize,
        workers: usize,
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let bs = batch_size.max(1);
        let chunks = sentences.len().div_ceil(bs);
        let parts = par::map_indexed(chunks, workers, |c| {
            let rows: Vec<(&[u32], LangId)> = sentences[c * bs..((c + 1) * bs).min(sentences.len())]
                .iter()
                .map(|(p, l)| (p.as_slice(), *l))
                .collect();
            self.embed_all_layers(&rows)
        });
        let mut out = vec![Vec::with_capacity(sentences.len()); self.config.layers + 1];
        for part in parts {
            for (layer, rows) in part?.into_iter().enumerate() {
                out[layer].extend(rows);
            }
        }
        Ok(out)
    }
}

/// Encodes `text` to pieces, dropping whole words from the right so that the
/// framed sequence fits in `max_positions`.
pub fn encode_for_model(text: &str, lang: LangId, vocab: &Vocab, max_positions: usize) -> Result<Vec<u32>> {
    let sent = tokenizer::encode(text, lang, vocab)?;
    if sent.word_count() == 0 {
        return Err(Error::EmptyInput(format!("empty sentence: {text:?}")));
    }
    let room = max_positions.saturating_sub(2);
    let end = sent.word_spans.iter().map(|&(_, e)| e).take_while(|&e| e <= room).last().unwrap_or(0);
    if end == 0 {
        return Err(Error::EmptyInput(format!("first word does not fit: {text:?}")));
    }
    Ok(sent.piece_ids[..end].to_vec())
}

/// Mean cross-entropy over masked positions.
pub fn mlm_loss(g: &mut Graph, logits: Var, label_ids: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, label_ids)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DMLMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimiser state stored alongside the weights for resuming.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    lang_codes: Vec<String>,
    params: Vec<ManifestEntry>,
    train_step: Option<u64>,
}

/// Writes weights, and optionally optimiser moments, as a JSON header
/// followed by little-endian f64 arrays in manifest order.
pub fn save_checkpoint(path: &Path, model: &Model, lang_codes: &[String], state: Option<&TrainState>) -> Result<()> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        model_config: model.config.clone(),
        lang_codes: lang_codes.to_vec(),
        params: model
            .names
            .iter()
            .zip(&model.params)
            .map(|(n, p)| ManifestEntry { name: n.clone(), shape: p.shape().to_vec() })
            .collect(),
        train_step: state.map(|s| s.step),
    };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(path, e);
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let mut arrays: Vec<&Tensor> = model.params.iter().collect();
        if let Some(s) = state {
            arrays.extend(s.m.iter());
            arrays.extend(s.v.iter());
        }
        for t in arrays {
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub lang_codes: Vec<String>,
    pub state: Option<TrainState>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
    }
    let mut read = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("{}: truncated data: {e}", path.display())))?;
        let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape.to_vec(), data)
    };
    let params = header.params.iter().map(|e| read(&e.shape)).collect::<Result<Vec<_>>>()?;
    let state = match header.train_step {
        Some(step) => {
            let m = header.params.iter().map(|e| read(&e.shape)).collect::<Result<Vec<_>>>()?;
            let v = header.params.iter().map(|e| read(&e.shape)).collect::<Result<Vec<_>>>()?;
            Some(TrainState { step, m, v })
        }
        None => None,
    };
    let model = Model::from_params(header.model_config, params)?;
    for (e, n) in header.params.iter().zip(&model.names) {
        if &e.name != n {
            return Err(Error::Checkpoint(format!("manifest name `{}` where `{n}` expected", e.name)));
        }
    }
    Ok(Checkpoint { model, lang_codes: header.lang_codes, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn tiny(v: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            hidden: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 12,
            lang_count: 3,
            lang_emb_dim: 8,
            max_positions: 16,
            dropout: 0.0,
            conditioning_enabled: true,
            tie_output_embeddings: true,
        }
    }

    fn example(tokens: &[u32], masked: &[u32], lang: u16) -> TrainingExample {
        let n = tokens.len();
        TrainingExample {
            token_ids: tokens.to_vec(),
            lang_ids: vec![LangId(lang); n],
            segment_ids: vec![0; n],
            masked_positions: masked.to_vec(),
            label_ids: masked.iter().map(|&p| 5 + p).collect(),
            label_lang_ids: vec![LangId(lang); masked.len()],
        }
    }

    #[test]
    fn shape_contract() {
        let cfg = ModelConfig {
            vocab_size: 1000,
            hidden: 32,
            lang_emb_dim: 32,
            layers: 2,
            max_positions: 16,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, 1).unwrap();
        let mut toks = vec![CLS];
        toks.extend((0..14).map(|i| 10 + i));
        toks.push(SEP);
        let a = example(&toks, &[1, 2, 3], 0);
        let b = example(&toks, &[4, 5], 1);
        let batch = Batch::from_examples(&[&a, &b]).unwrap();
        let mut g = Graph::new();
        let f = m.forward(&mut g, &batch, None).unwrap();
        assert_eq!(g.value(f.logits.unwrap()).shape(), [5, 1000]);
        assert_eq!(f.hidden.len(), 3);
        for h in &f.hidden {
            assert_eq!(g.value(*h).shape(), [32, 32]);
        }
    }

    #[test]
    fn zero_head_gives_log_v() {
        let mut m = Model::new(tiny(50), 2).unwrap();
        m.param_mut("head.dense.weight").unwrap().data_mut().fill(0.0);
        let e = example(&[CLS, 7, 8, SEP], &[1, 2], 0);
        let batch = Batch::from_examples(&[&e]).unwrap();
        let mut g = Graph::new();
        let (loss, _) = m.mlm_loss(&mut g, &batch, None).unwrap();
        assert!((g.value(loss).item() - (50f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_cross_entropy() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.5, -1.0, 0.0]).unwrap());
        let loss = mlm_loss(&mut g, logits, &[2, 0]).unwrap();
        let l1 = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        let l2 = -(0.5f64.exp() / (0.5f64.exp() + (-1f64).exp() + 1.0)).ln();
        assert!((g.value(loss).item() - (l1 + l2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn conditioning_changes_logits_and_ablation_does_not() {
        let e0 = example(&[CLS, 7, 8, 9, SEP], &[2], 0);
        let mut e1 = e0.clone();
        e1.label_lang_ids = vec![LangId(1)];
        e1.lang_ids[2] = LangId(1);
        let mut e1_only_label = e0.clone();
        e1_only_label.label_lang_ids = vec![LangId(1)];
        for cond in [true, false] {
            let m = Model::new(ModelConfig { conditioning_enabled: cond, ..tiny(40) }, 3).unwrap();
            let logits = |e: &TrainingExample| {
                let mut g = Graph::new();
                let f = m.forward(&mut g, &Batch::from_examples(&[e]).unwrap(), None).unwrap();
                g.value(f.logits.unwrap()).clone()
            };
            let (a, b) = (logits(&e0), logits(&e1_only_label));
            if cond {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
            // input-layer language still matters in both variants
            assert_ne!(a, logits(&e1));
        }
    }

    #[test]
    fn padding_gets_no_attention_and_batches_do_not_leak() {
        let m = Model::new(tiny(40), 4).unwrap();
        let short = example(&[CLS, 7, SEP], &[1], 0);
        let long = example(&[CLS, 9, 10, 11, 12, SEP], &[2, 3], 1);
        let mut g = Graph::new();
        let batch = Batch::from_examples(&[&short, &long]).unwrap();
        let f = m.forward(&mut g, &batch, None).unwrap();
        for &att in &f.attention {
            let t = g.value(att);
            for r in 0..t.rows() {
                let row = t.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let b = r / (6 * 2);
                if b == 0 {
                    assert!(row[3..].iter().all(|&v| v == 0.0));
                }
            }
        }
        let swapped = Batch::from_examples(&[&long, &short]).unwrap();
        let mut g2 = Graph::new();
        let f2 = m.forward(&mut g2, &swapped, None).unwrap();
        let (l1, l2) = (g.value(f.logits.unwrap()), g2.value(f2.logits.unwrap()));
        assert_eq!(l1.row(0), l2.row(2));
        assert_eq!(l1.row(1), l2.row(0));
        assert_eq!(l1.row(2), l2.row(1));
    }

    #[test]
    fn masked_pad_is_rejected() {
        let m = Model::new(tiny(40), 4).unwrap();
        let e = example(&[CLS, PAD, SEP], &[1], 0);
        let mut g = Graph::new();
        assert!(m.forward(&mut g, &Batch::from_examples(&[&e]).unwrap(), None).is_err());
        let e = example(&[CLS, 99, SEP], &[1], 0);
        assert!(m.forward(&mut g, &Batch::from_examples(&[&e]).unwrap(), None).is_err());
    }

    #[test]
    fn pooling_excludes_frame_tokens() {
        let m = Model::new(tiny(40), 5).unwrap();
        let one = m.embed_pieces(&[(&[7], LangId(0))], 1).unwrap().remove(0);
        let mut g = Graph::new();
        let f = m.forward(&mut g, &Batch::from_pieces(&[(&[7], LangId(0))]).unwrap(), None).unwrap();
        let states = g.value(f.hidden[1]);
        assert_eq!(one, states.row(1));
        let with_frame: Vec<f64> = (0..8).map(|j| (0..3).map(|r| states.row(r)[j]).sum::<f64>() / 3.0).collect();
        assert_ne!(one, with_frame);
        let zero = m.embed_pieces(&[(&[7], LangId(0))], 0).unwrap().remove(0);
        assert_eq!(zero, g.value(f.hidden[0]).row(1));
        assert!(m.embed_pieces(&[(&[], LangId(0))], 0).is_err());
    }

    #[test]
    fn small_lang_embedding_dim_is_supported() {
        let m = Model::new(ModelConfig { lang_emb_dim: 3, ..tiny(40) }, 6).unwrap();
        assert_eq!(m.param("head.dense.weight").unwrap().shape(), [11, 8]);
        let e = example(&[CLS, 7, 8, SEP], &[1], 2);
        let mut g = Graph::new();
        m.mlm_loss(&mut g, &Batch::from_examples(&[&e]).unwrap(), None).unwrap();
    }

    #[test]
    fn gradient_check_on_tiny_model() {
        let cfg = ModelConfig { lang_emb_dim: 5, tie_output_embeddings: false, ..tiny(20) };
        let m = Model::new(cfg, 7).unwrap();
        let a = example(&[CLS, 7, 8, 9, SEP], &[1, 3], 0);
        let mut b = example(&[CLS, 10, 11, SEP], &[2], 1);
        b.label_lang_ids = vec![LangId(2)];
        b.lang_ids[2] = LangId(2);
        let batch = Batch::from_examples(&[&a, &b]).unwrap();
        let r = grad_check(
            |g, vars| {
                let f = m.forward_on(g, vars, &batch, None)?;
                mlm_loss(g, f.logits.unwrap(), &batch.label_ids)
            },
            m.params(),
            1e-5,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::new(tiny(30), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let state = TrainState {
            step: 7,
            m: m.params().iter().map(|t| Tensor::full(t.shape(), 0.5)).collect(),
            v: m.params().iter().map(|t| Tensor::full(t.shape(), 0.25)).collect(),
        };
        save_checkpoint(&p, &m, &["en".into(), "es".into(), "fr".into()], Some(&state)).unwrap();
        let c = load_checkpoint(&p).unwrap();
        assert_eq!(c.model.params(), m.params());
        assert_eq!(c.state.unwrap(), state);
        assert_eq!(c.lang_codes, ["en", "es", "fr"]);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
