//! Compiles tokenized sentences into masked-LM training examples.
//!
//! In DICT-MLM mode every selected whole word is first replaced by its label
//! word (a sampled cross-lingual synonym with probability `t`, otherwise the
//! word itself), and only then are the label pieces corrupted. Positions and
//! labels therefore line up exactly even when the synonym splits into a
//! different number of pieces than the original word.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::RawSentence;
use crate::lang::LangId;
use crate::lexicon::{Lexicon, SynonymSampling};
use crate::tokenizer::{self, TokenizedSentence, Vocab, CLS, MASK, NUM_SPECIAL, PAD, SEP};
use crate::{par, rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    DictMlm,
    DictTlm,
    VanillaMlm,
}

/// How the per-sentence masking budget is filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Budget over all words, lexicon-covered words drawn first.
    #[default]
    EligibleFirst,
    /// Budget over covered words only; sentences without any covered word
    /// fall back to a budget over all words.
    EligibleOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetRounding {
    /// `floor(r·n)` plus one with probability `frac(r·n)`; unbiased.
    #[default]
    Stochastic,
    /// `round(r·n)`.
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub mask_rate: f64,
    /// Probability that a covered word is labelled with a cross-lingual synonym.
    pub t: f64,
    /// Copies of the corpus, each with fresh masks and labels.
    pub duplication: usize,
    pub mode: GenMode,
    /// Per-word code-switch probability for the second half of DICT-TLM pairs.
    pub tlm_replace_prob: f64,
    pub max_seq_len: usize,
    pub seed: u64,
    pub selection: Selection,
    pub rounding: BudgetRounding,
    pub synonym_sampling: SynonymSampling,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            t: 0.5,
            duplication: 5,
            mode: GenMode::DictMlm,
            tlm_replace_prob: 1.0,
            max_seq_len: 64,
            seed: 0,
            selection: Selection::default(),
            rounding: BudgetRounding::default(),
            synonym_sampling: SynonymSampling::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::config("mask_rate", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::config("t", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.tlm_replace_prob) {
            return Err(Error::config("tlm_replace_prob", "must lie in [0, 1]"));
        }
        if self.duplication == 0 {
            return Err(Error::config("duplication", "must be >= 1"));
        }
        if self.max_seq_len < 3 {
            return Err(Error::config("max_seq_len", "must be >= 3"));
        }
        Ok(())
    }

    fn effective_t(&self) -> f64 {
        match self.mode {
            GenMode::VanillaMlm => 0.0,
            _ => self.t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub token_ids: Vec<u32>,
    pub lang_ids: Vec<LangId>,
    pub segment_ids: Vec<u8>,
    pub masked_positions: Vec<u32>,
    pub label_ids: Vec<u32>,
    pub label_lang_ids: Vec<LangId>,
}

impl TrainingExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Language of the sentence the example came from (carried by `[CLS]`).
    pub fn sentence_lang(&self) -> LangId {
        self.lang_ids[0]
    }

    /// Checks every structural invariant of an emitted example.
    pub fn validate(&self, vocab_size: usize, max_seq_len: usize, allow_segments: bool) -> Result<()> {
        let bad = |m: String| Err(Error::Vocab(format!("invalid example: {m}")));
        let n = self.token_ids.len();
        if n == 0 || n > max_seq_len {
            return bad(format!("length {n} outside 1..={max_seq_len}"));
        }
        if self.lang_ids.len() != n || self.segment_ids.len() != n {
            return bad("per-token arrays differ in length".into());
        }
        let m = self.masked_positions.len();
        if m == 0 || self.label_ids.len() != m || self.label_lang_ids.len() != m {
            return bad("masked arrays empty or of unequal length".into());
        }
        if !self.masked_positions.windows(2).all(|w| w[0] < w[1]) {
            return bad("masked positions not strictly increasing".into());
        }
        if self.token_ids.iter().chain(&self.label_ids).any(|&t| t as usize >= vocab_size) {
            return bad("token id out of range".into());
        }
        if self.token_ids[0] != CLS || *self.token_ids.last().unwrap() != SEP {
            return bad("missing [CLS]/[SEP] frame".into());
        }
        for (i, &p) in self.masked_positions.iter().enumerate() {
            let p = p as usize;
            if p >= n {
                return bad(format!("masked position {p} beyond length"));
            }
            if matches!(self.token_ids[p], CLS | SEP | PAD) {
                return bad(format!("masked position {p} is a special-token slot"));
            }
            if matches!(self.label_ids[i], PAD | CLS | SEP | MASK) {
                return bad("label is a frame or mask token".into());
            }
            if self.label_lang_ids[i] != self.lang_ids[p] {
                return bad("label language differs from token language".into());
            }
        }
        if !allow_segments && self.segment_ids.iter().any(|&s| s != 0) {
            return bad("non-zero segment outside DICT-TLM".into());
        }
        if self.segment_ids.iter().any(|&s| s > 1) {
            return bad("segment id above 1".into());
        }
        Ok(())
    }
}

/// Counters describing generated examples. Merging is associative.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub examples: u64,
    pub skipped: u64,
    pub words: u64,
    pub masked_words: u64,
    /// Masked words whose label language differs from the sentence language.
    pub xling_words: u64,
    pub masked_pieces: u64,
    pub xling_pieces: u64,
    pub corrupt_mask: u64,
    pub corrupt_keep: u64,
    pub corrupt_random: u64,
    pub per_language: BTreeMap<LangId, LangStats>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LangStats {
    pub examples: u64,
    pub words: u64,
    pub masked_words: u64,
    pub xling_words: u64,
}

impl GenStats {
    pub fn merge(&mut self, other: &GenStats) {
        self.examples += other.examples;
        self.skipped += other.skipped;
        self.words += other.words;
        self.masked_words += other.masked_words;
        self.xling_words += other.xling_words;
        self.masked_pieces += other.masked_pieces;
        self.xling_pieces += other.xling_pieces;
        self.corrupt_mask += other.corrupt_mask;
        self.corrupt_keep += other.corrupt_keep;
        self.corrupt_random += other.corrupt_random;
        for (l, s) in &other.per_language {
            let e = self.per_language.entry(*l).or_default();
            e.examples += s.examples;
            e.words += s.words;
            e.masked_words += s.masked_words;
            e.xling_words += s.xling_words;
        }
    }

    pub fn mask_rate(&self) -> f64 {
        ratio(self.masked_words, self.words)
    }

    pub fn xling_fraction(&self) -> f64 {
        ratio(self.xling_words, self.masked_words)
    }

    pub fn xling_piece_fraction(&self) -> f64 {
        ratio(self.xling_pieces, self.masked_pieces)
    }

    /// `(mask, keep, random)` shares of corrupted pieces.
    pub fn corruption_split(&self) -> (f64, f64, f64) {
        let n = self.corrupt_mask + self.corrupt_keep + self.corrupt_random;
        (ratio(self.corrupt_mask, n), ratio(self.corrupt_keep, n), ratio(self.corrupt_random, n))
    }
}

pub(crate) fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Why a sentence produced no example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skipped(pub String);

/// Words chosen for masking, in increasing order, with their eligibility.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSelection {
    pub words: Vec<usize>,
    pub eligible: Vec<bool>,
}

fn budget<R: Rng + ?Sized>(n: usize, cfg: &GenConfig, rng: &mut R) -> usize {
    let x = cfg.mask_rate * n as f64;
    let b = match cfg.rounding {
        BudgetRounding::Nearest => x.round() as usize,
        BudgetRounding::Stochastic => {
            let floor = x.floor();
            floor as usize + usize::from(rng.gen::<f64>() < x - floor)
        }
    };
    b.clamp(1, n.max(1))
}

fn draw<R: Rng + ?Sized>(pool: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    index::sample(rng, pool.len(), k.min(pool.len())).into_iter().map(|i| pool[i]).collect()
}

/// Picks the whole words to mask.
pub fn select_mask_words<R: Rng + ?Sized>(
    sent: &TokenizedSentence,
    lex: &Lexicon,
    cfg: &GenConfig,
    rng: &mut R,
) -> MaskSelection {
    let n = sent.word_count();
    if n == 0 {
        return MaskSelection { words: Vec::new(), eligible: Vec::new() };
    }
    let is_eligible: Vec<bool> = (0..n).map(|w| lex.contains(&sent.words[w], sent.lang_per_word[w])).collect();
    let (eligible, other): (Vec<usize>, Vec<usize>) = (0..n).partition(|&w| is_eligible[w]);

    let mut words = match cfg.selection {
        Selection::EligibleOnly if !eligible.is_empty() => {
            let b = budget(eligible.len(), cfg, rng);
            draw(&eligible, b, rng)
        }
        _ => {
            let b = budget(n, cfg, rng);
            let mut chosen = draw(&eligible, b, rng);
            let rest = b - chosen.len();
            chosen.extend(draw(&other, rest, rng));
            chosen
        }
    };
    words.sort_unstable();
    let eligible = words.iter().map(|&w| is_eligible[w]).collect();
    MaskSelection { words, eligible }
}

/// Label for one masked word: a sampled synonym with probability `t` when the
/// word is covered, otherwise the word itself in its own language.
pub fn choose_label<R: Rng + ?Sized>(
    word: &str,
    lang: LangId,
    eligible: bool,
    lex: &Lexicon,
    cfg: &GenConfig,
    rng: &mut R,
) -> (String, LangId) {
    // always consume the Bernoulli draw so every mode walks the same stream
    let cross = rng.gen::<f64>() < cfg.effective_t();
    if eligible && cross {
        if let Some(s) = lex.sample_synonym(word, lang, cfg.synonym_sampling, rng) {
            return (s.word.clone(), s.lang);
        }
    }
    (word.to_string(), lang)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Corruption {
    Mask,
    Keep,
    Random,
}

fn corrupt<R: Rng + ?Sized>(label: u32, vocab_size: usize, rng: &mut R) -> (u32, Corruption) {
    let u = rng.gen::<f64>();
    if u < 0.8 {
        (MASK, Corruption::Mask)
    } else if u < 0.9 {
        (label, Corruption::Keep)
    } else {
        (rng.gen_range(NUM_SPECIAL..vocab_size as u32), Corruption::Random)
    }
}

struct WordSlot {
    pieces: Vec<u32>,
    lang: LangId,
    segment: u8,
    masked: bool,
}

/// Assembles the framed token stream and applies per-piece corruption.
fn assemble<R: Rng + ?Sized>(
    halves: &[Vec<WordSlot>],
    sent_lang: LangId,
    vocab_size: usize,
    rng: &mut R,
    stats: &mut GenStats,
) -> TrainingExample {
    let mut ex = TrainingExample {
        token_ids: vec![CLS],
        lang_ids: vec![sent_lang],
        segment_ids: vec![0],
        masked_positions: Vec::new(),
        label_ids: Vec::new(),
        label_lang_ids: Vec::new(),
    };
    for (h, words) in halves.iter().enumerate() {
        let seg = h as u8;
        for w in words {
            stats.words += 1;
            if w.masked {
                stats.masked_words += 1;
                if w.lang != sent_lang {
                    stats.xling_words += 1;
                }
            }
            for &p in &w.pieces {
                let pos = ex.token_ids.len();
                if w.masked {
                    let (tok, kind) = corrupt(p, vocab_size, rng);
                    match kind {
                        Corruption::Mask => stats.corrupt_mask += 1,
                        Corruption::Keep => stats.corrupt_keep += 1,
                        Corruption::Random => stats.corrupt_random += 1,
                    }
                    stats.masked_pieces += 1;
                    if w.lang != sent_lang {
                        stats.xling_pieces += 1;
                    }
                    ex.token_ids.push(tok);
                    ex.masked_positions.push(pos as u32);
                    ex.label_ids.push(p);
                    ex.label_lang_ids.push(w.lang);
                } else {
                    ex.token_ids.push(p);
                }
                ex.lang_ids.push(w.lang);
                ex.segment_ids.push(w.segment);
            }
        }
        ex.token_ids.push(SEP);
        ex.lang_ids.push(sent_lang);
        ex.segment_ids.push(seg);
    }
    stats.examples += 1;
    let ls = stats.per_language.entry(sent_lang).or_default();
    ls.examples += 1;
    ls.words += halves.iter().map(|h| h.len() as u64).sum::<u64>();
    ls.masked_words += halves.iter().flatten().filter(|w| w.masked).count() as u64;
    ls.xling_words += halves.iter().flatten().filter(|w| w.masked && w.lang != sent_lang).count() as u64;
    ex
}

fn piece_total(words: &[WordSlot]) -> usize {
    words.iter().map(|w| w.pieces.len()).sum()
}

/// Drops whole words from the right until at most `budget` pieces remain.
fn truncate_words(sent: &TokenizedSentence, budget: usize) -> usize {
    let mut keep = sent.word_count();
    while keep > 0 && sent.word_spans[keep - 1].1 > budget {
        keep -= 1;
    }
    keep
}

/// DICT-MLM (and vanilla MLM, which is the `t = 0` special case).
pub fn build_dict_mlm_example<R: Rng + ?Sized>(
    sent: &TokenizedSentence,
    cfg: &GenConfig,
    lex: &Lexicon,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<(TrainingExample, GenStats), Skipped> {
    let room = cfg.max_seq_len.saturating_sub(2);
    let keep = truncate_words(sent, room);
    if keep == 0 {
        return Err(Skipped("sentence has no words that fit".into()));
    }
    let view = truncated(sent, keep);
    let sel = select_mask_words(&view, lex, cfg, rng);

    let mut slots: Vec<WordSlot> = (0..view.word_count())
        .map(|w| WordSlot {
            pieces: view.word_pieces(w).to_vec(),
            lang: view.lang_per_word[w],
            segment: 0,
            masked: false,
        })
        .collect();
    for (&w, &eligible) in sel.words.iter().zip(&sel.eligible) {
        let (label, label_lang) = choose_label(&view.words[w], view.lang_per_word[w], eligible, lex, cfg, rng);
        let slot = &mut slots[w];
        if label_lang != slot.lang || label != view.words[w] {
            slot.pieces = vocab.tokenize_word(&label);
            slot.lang = label_lang;
        }
        slot.masked = true;
    }
    while piece_total(&slots) > room {
        slots.pop();
    }
    if !slots.iter().any(|s| s.masked) {
        return Err(Skipped("all masked words truncated".into()));
    }
    let mut stats = GenStats::default();
    let ex = assemble(&[slots], view.lang, vocab.len(), rng, &mut stats);
    Ok((ex, stats))
}

fn truncated(sent: &TokenizedSentence, keep: usize) -> TokenizedSentence {
    if keep == sent.word_count() {
        return sent.clone();
    }
    let end = sent.word_spans[keep - 1].1;
    TokenizedSentence {
        piece_ids: sent.piece_ids[..end].to_vec(),
        word_spans: sent.word_spans[..keep].to_vec(),
        words: sent.words[..keep].to_vec(),
        lang_per_word: sent.lang_per_word[..keep].to_vec(),
        lang: sent.lang,
    }
}

/// DICT-TLM: `[CLS] A [SEP] B [SEP]` where B is a code-switched copy of A,
/// then plain whole-word MLM over both halves.
pub fn build_tlm_example<R: Rng + ?Sized>(
    sent: &TokenizedSentence,
    cfg: &GenConfig,
    lex: &Lexicon,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<(TrainingExample, GenStats), Skipped> {
    if sent.word_count() == 0 {
        return Err(Skipped("sentence has no words".into()));
    }
    let mut a: Vec<WordSlot> = (0..sent.word_count())
        .map(|w| WordSlot {
            pieces: sent.word_pieces(w).to_vec(),
            lang: sent.lang_per_word[w],
            segment: 0,
            masked: false,
        })
        .collect();
    let mut b: Vec<WordSlot> = Vec::with_capacity(a.len());
    for w in 0..sent.word_count() {
        let (word, lang) = (&sent.words[w], sent.lang_per_word[w]);
        let switch = rng.gen::<f64>() < cfg.tlm_replace_prob;
        let syn = if switch && lex.contains(word, lang) {
            lex.sample_synonym(word, lang, cfg.synonym_sampling, rng)
        } else {
            None
        };
        b.push(match syn {
            Some(s) => WordSlot { pieces: vocab.tokenize_word(&s.word), lang: s.lang, segment: 1, masked: false },
            None => WordSlot { pieces: sent.word_pieces(w).to_vec(), lang, segment: 1, masked: false },
        });
    }
    // trim the relatively longer half until the frame fits
    let room = cfg.max_seq_len.saturating_sub(3);
    while piece_total(&a) + piece_total(&b) > room {
        if piece_total(&a) > piece_total(&b) {
            a.pop();
        } else {
            b.pop();
        }
    }
    if a.is_empty() && b.is_empty() {
        return Err(Skipped("sentence pair does not fit".into()));
    }
    let total = a.len() + b.len();
    let k = budget(total, cfg, rng);
    for i in index::sample(rng, total, k.min(total)) {
        if i < a.len() {
            a[i].masked = true;
        } else {
            b[i - a.len()].masked = true;
        }
    }
    let mut stats = GenStats::default();
    let ex = assemble(&[a, b], sent.lang, vocab.len(), rng, &mut stats);
    Ok((ex, stats))
}

pub fn build_example<R: Rng + ?Sized>(
    sent: &TokenizedSentence,
    cfg: &GenConfig,
    lex: &Lexicon,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<(TrainingExample, GenStats), Skipped> {
    match cfg.mode {
        GenMode::DictTlm => build_tlm_example(sent, cfg, lex, vocab, rng),
        GenMode::DictMlm | GenMode::VanillaMlm => build_dict_mlm_example(sent, cfg, lex, vocab, rng),
    }
}

#[derive(Clone, Debug, Default)]
pub struct GenOutput {
    pub examples: Vec<TrainingExample>,
    pub stats: GenStats,
    /// `(sentence index, message)` for sentences that produced no example.
    pub diagnostics: Vec<(usize, String)>,
}

/// Emits every sentence `duplication` times, copy-major. Copy `d` of sentence
/// `i` uses the RNG stream `(seed, i, d)`, so output is independent of
/// `workers`.
pub fn generate(
    sentences: &[RawSentence],
    cfg: &GenConfig,
    lex: &Lexicon,
    vocab: &Vocab,
    workers: usize,
) -> Result<GenOutput> {
    cfg.validate()?;
    let tokenized: Vec<Result<TokenizedSentence>> =
        par::map_indexed(sentences.len(), workers, |i| tokenizer::encode(&sentences[i].text, sentences[i].lang, vocab));
    let n = sentences.len();
    let items = par::map_indexed(n * cfg.duplication, workers, |k| {
        let (d, i) = (k / n.max(1), k % n.max(1));
        let sent = match &tokenized[i] {
            Ok(s) => s,
            Err(e) => return Err(Skipped(e.to_string())),
        };
        let mut g = rng::stream(cfg.seed, &[rng::tag::GENERATE, i as u64, d as u64]);
        build_example(sent, cfg, lex, vocab, &mut g)
    });
    let mut out = GenOutput::default();
    for (k, item) in items.into_iter().enumerate() {
        match item {
            Ok((ex, s)) => {
                out.examples.push(ex);
                out.stats.merge(&s);
            }
            Err(Skipped(msg)) => {
                out.stats.skipped += 1;
                out.diagnostics.push((k % n.max(1), msg));
            }
        }
    }
    Ok(out)
}

pub fn write_examples_jsonl<W: Write>(examples: &[TrainingExample], mut out: W) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n").map_err(|e| Error::io("<examples output>", e))?;
    }
    Ok(())
}

pub fn read_examples_jsonl<R: BufRead>(input: R) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<examples input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: "<examples input>".into(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
