//! Cross-lingual retrieval per layer and masking statistics.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::examplegen::{ratio, TrainingExample};
use crate::lang::{LangId, LanguageRegistry};
use crate::model::{encode_for_model, Model};
use crate::tokenizer::{Vocab, CLS, MASK, PAD, SEP};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub src: (String, LangId),
    pub tgt: (String, LangId),
}

/// Reads a pairs file: a header line `src_code<TAB>tgt_code`, then one
/// `src_text<TAB>tgt_text` line per pair.
pub fn read_pairs_tsv(path: &Path, registry: &LanguageRegistry) -> Result<Vec<ParallelPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs_tsv(&text, path, registry)
}

pub fn parse_pairs_tsv(text: &str, path: &Path, registry: &LanguageRegistry) -> Result<Vec<ParallelPair>> {
    let parse_err = |line: usize, message: String| Error::Parse { path: path.into(), line, message };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "missing language header".into()))?;
    let codes: Vec<&str> = header.split('\t').map(str::trim).collect();
    if codes.len() != 2 {
        return Err(parse_err(1, format!("header must hold two language codes, got {header:?}")));
    }
    let (ls, lt) = (registry.require(codes[0])?, registry.require(codes[1])?);
    if ls == lt {
        return Err(parse_err(1, "source and target languages must differ".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 2 {
            return Err(parse_err(i + 2, format!("expected 2 tab-separated fields, got {}", parts.len())));
        }
        out.push(ParallelPair { src: (parts[0].to_string(), ls), tgt: (parts[1].to_string(), lt) });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!("{}: no pairs", path.display())));
    }
    Ok(out)
}

pub fn write_pairs_tsv<W: Write>(pairs: &[ParallelPair], registry: &LanguageRegistry, mut out: W) -> Result<()> {
    let io = |e| Error::io("<pairs output>", e);
    let first = pairs.first().ok_or_else(|| Error::EmptyInput("no pairs to write".into()))?;
    writeln!(out, "{}\t{}", registry.code(first.src.1), registry.code(first.tgt.1)).map_err(io)?;
    for p in pairs {
        writeln!(out, "{}\t{}", p.src.0, p.tgt.0).map_err(io)?;
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Accuracy@1 of src→tgt cosine nearest-neighbour retrieval where pair `i`
/// is the correct match. Ties go to the lowest target index.
pub fn retrieval_accuracy(src: &[Vec<f64>], tgt: &[Vec<f64>]) -> Result<f64> {
    if src.is_empty() || src.len() != tgt.len() {
        return Err(Error::Retrieval(format!("need equal non-zero counts, got {} and {}", src.len(), tgt.len())));
    }
    let unit = |vs: &[Vec<f64>], side: &str| -> Result<Vec<Vec<f64>>> {
        vs.iter()
            .enumerate()
            .map(|(i, v)| {
                let n = norm(v);
                if n == 0.0 || !n.is_finite() {
                    return Err(Error::Retrieval(format!("{side} sentence {i} has a zero or non-finite vector")));
                }
                Ok(v.iter().map(|x| x / n).collect())
            })
            .collect()
    };
    let (s, t) = (unit(src, "source")?, unit(tgt, "target")?);
    let mut correct = 0usize;
    for (i, a) in s.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (j, b) in t.iter().enumerate() {
            let c: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            if c > best.0 {
                best = (c, j);
            }
        }
        correct += usize::from(best.1 == i);
    }
    Ok(correct as f64 / src.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub per_layer_acc: Vec<f64>,
    pub last4_avg: f64,
    pub pair_count: usize,
}

impl RetrievalReport {
    pub fn new(per_layer_acc: Vec<f64>, pair_count: usize) -> Self {
        let tail = &per_layer_acc[per_layer_acc.len().saturating_sub(4)..];
        let last4_avg = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
        Self { per_layer_acc, last4_avg, pair_count }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,accuracy\n");
        for (l, a) in self.per_layer_acc.iter().enumerate() {
            s.push_str(&format!("{l},{a}\n"));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const EMBED_BATCH: usize = 32;

/// Embeds both sides of every pair at every layer (each side with its own
/// language id) and scores retrieval per layer.
pub fn layerwise_report(
    model: &Model,
    pairs: &[ParallelPair],
    vocab: &Vocab,
    workers: usize,
) -> Result<RetrievalReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no evaluation pairs".into()));
    }
    let p = model.config.max_positions;
    let side = |get: fn(&ParallelPair) -> &(String, LangId)| -> Result<Vec<(Vec<u32>, LangId)>> {
        pairs
            .iter()
            .map(|pair| {
                let (text, lang) = get(pair);
                Ok((encode_for_model(text, *lang, vocab, p)?, *lang))
            })
            .collect()
    };
    let src = model.embed_corpus(&side(|p| &p.src)?, EMBED_BATCH, workers)?;
    let tgt = model.embed_corpus(&side(|p| &p.tgt)?, EMBED_BATCH, workers)?;
    let acc = src.iter().zip(&tgt).map(|(s, t)| retrieval_accuracy(s, t)).collect::<Result<Vec<_>>>()?;
    Ok(RetrievalReport::new(acc, pairs.len()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSplit {
    pub mask: f64,
    pub keep: f64,
    pub random: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LanguageMaskStats {
    pub examples: u64,
    pub masked_words: u64,
    pub xling_frac: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskingStats {
    pub examples: u64,
    pub words: u64,
    pub masked_words: u64,
    pub masked_pieces: u64,
    pub mask_rate: f64,
    pub corruption: CorruptionSplit,
    /// Share of masked words labelled in a language other than the sentence's.
    pub xling_frac: f64,
    pub xling_piece_frac: f64,
    pub per_language: BTreeMap<String, LanguageMaskStats>,
}

/// Recomputes generator statistics from emitted examples alone.
///
/// Word boundaries come from continuation markers, read from the label at
/// masked positions and from the token elsewhere. The corruption type is
/// inferred from the emitted token: `[MASK]`, the label itself, or anything
/// else. A random replacement that happens to equal the label therefore
/// counts as kept.
pub fn masking_stats_report(examples: &[TrainingExample], vocab: &Vocab, registry: &LanguageRegistry) -> MaskingStats {
    let mut words = 0u64;
    let mut masked_words = 0u64;
    let mut xling_words = 0u64;
    let (mut c_mask, mut c_keep, mut c_rand) = (0u64, 0u64, 0u64);
    let mut xling_pieces = 0u64;
    let mut masked_pieces = 0u64;
    let mut per_lang: BTreeMap<LangId, (u64, u64, u64)> = BTreeMap::new();
    for e in examples {
        let sent_lang = e.sentence_lang();
        let entry = per_lang.entry(sent_lang).or_default();
        entry.0 += 1;
        let mut label_at = vec![None; e.len()];
        for (i, &p) in e.masked_positions.iter().enumerate() {
            label_at[p as usize] = Some((e.label_ids[i], e.label_lang_ids[i]));
        }
        for p in 0..e.len() {
            let tok = e.token_ids[p];
            let piece = label_at[p].map_or(tok, |(l, _)| l);
            if matches!(piece, CLS | SEP | PAD) && label_at[p].is_none() {
                continue;
            }
            let starts_word =
                !vocab.is_continuation(piece) || p == 0 || label_at[p].is_some() != label_at[p - 1].is_some();
            if starts_word {
                words += 1;
            }
            if let Some((label, lang)) = label_at[p] {
                masked_pieces += 1;
                if tok == MASK {
                    c_mask += 1;
                } else if tok == label {
                    c_keep += 1;
                } else {
                    c_rand += 1;
                }
                let cross = lang != sent_lang;
                xling_pieces += u64::from(cross);
                if starts_word {
                    masked_words += 1;
                    xling_words += u64::from(cross);
                    entry.1 += 1;
                    entry.2 += u64::from(cross);
                }
            }
        }
    }
    let split_n = c_mask + c_keep + c_rand;
    MaskingStats {
        examples: examples.len() as u64,
        words,
        masked_words,
        masked_pieces,
        mask_rate: ratio(masked_words, words),
        corruption: CorruptionSplit {
            mask: ratio(c_mask, split_n),
            keep: ratio(c_keep, split_n),
            random: ratio(c_rand, split_n),
        },
        xling_frac: ratio(xling_words, masked_words),
        xling_piece_frac: ratio(xling_pieces, masked_pieces),
        per_language: per_lang
            .into_iter()
            .map(|(l, (n, m, x))| {
                let code = if l.index() < registry.len() { registry.code(l).to_string() } else { l.0.to_string() };
                (code, LanguageMaskStats { examples: n, masked_words: m, xling_frac: ratio(x, m) })
            })
            .collect(),
    }
}
