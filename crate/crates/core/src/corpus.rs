//! Monolingual corpora, temperature-based language balancing and the
//! deterministic sentence stream that feeds example generation.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lang::{LangId, LanguageRegistry};
use crate::lexicon::Diagnostic;
use crate::{par, rng, Error, Result};

/// Items per shard of the language schedule. Each shard draws from its own
/// RNG stream so shards can be planned independently.
pub const SHARD_LEN: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self { temperature: 5.0, seed: 0 }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 1.0) || !self.temperature.is_finite() {
            return Err(Error::config("temperature", format!("must be >= 1, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// `p_l ∝ (n_l / Σn)^(1/T)`.
pub fn temperature_weights(sizes: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::InvalidManifest("no languages".into()));
    }
    if let Some(bad) = sizes.iter().find(|&&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::InvalidManifest(format!("corpus size must be positive, got {bad}")));
    }
    if !(temperature >= 1.0) || !temperature.is_finite() {
        return Err(Error::config("temperature", format!("must be >= 1, got {temperature}")));
    }
    let log_total = sizes.iter().sum::<f64>().ln();
    let logits: Vec<f64> = sizes.iter().map(|n| (n.ln() - log_total) / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|u| u / z).collect())
}

/// One categorical draw over language indices.
pub fn sample_language<R: Rng + ?Sized>(weights: &WeightedIndex<f64>, rng: &mut R) -> LangId {
    LangId(weights.sample(rng) as u16)
}

pub fn weighted_index(weights: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(weights).map_err(|e| Error::config("weights", e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub lang: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_count: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub lang: LangId,
    pub code: String,
    pub path: PathBuf,
    pub sentence_count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub total_sentences: u64,
}

impl CorpusManifest {
    /// Reads a JSON array of `{"lang","path"}` records. Relative paths are
    /// resolved against the manifest's directory; missing sentence counts are
    /// computed by scanning the files.
    pub fn load(path: &Path, registry: &LanguageRegistry) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<ManifestRecord> =
            serde_json::from_str(&text).map_err(|e| Error::InvalidManifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_records(records, base, registry)
    }

    pub fn from_records(records: Vec<ManifestRecord>, base: &Path, registry: &LanguageRegistry) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(records.len());
        for rec in records {
            let lang = registry.require(&rec.lang)?;
            if !seen.insert(lang) {
                return Err(Error::InvalidManifest(format!("duplicate language `{}`", rec.lang)));
            }
            let path = if rec.path.is_absolute() { rec.path } else { base.join(rec.path) };
            let sentence_count = match rec.sentence_count {
                Some(n) => n,
                None => count_sentences(&path)?,
            };
            if sentence_count == 0 {
                return Err(Error::InvalidManifest(format!("{} has no sentences", path.display())));
            }
            entries.push(ManifestEntry { lang, code: registry.code(lang).to_string(), path, sentence_count });
        }
        if entries.is_empty() {
            return Err(Error::InvalidManifest("no entries".into()));
        }
        let total_sentences = entries.iter().map(|e| e.sentence_count).sum();
        Ok(Self { entries, total_sentences })
    }

    /// Writes the manifest back with sentence counts cached.
    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<ManifestRecord> = self
            .entries
            .iter()
            .map(|e| ManifestRecord {
                lang: e.code.clone(),
                path: e.path.clone(),
                sentence_count: Some(e.sentence_count),
            })
            .collect();
        let text = serde_json::to_string_pretty(&records)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn count_sentences(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes.split(|&b| b == b'\n').filter(|l| std::str::from_utf8(l).is_ok_and(|s| !s.trim().is_empty())).count()
        as u64)
}

/// Reads a one-sentence-per-line file. Invalid UTF-8 lines are skipped with
/// a diagnostic; blank lines are ignored.
pub fn read_sentences(path: &Path) -> Result<(Vec<String>, Vec<Diagnostic>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut diags = Vec::new();
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        match std::str::from_utf8(line) {
            Ok(s) => {
                let s = s.trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
            }
            Err(e) => diags.push(Diagnostic { line: i + 1, message: format!("invalid UTF-8: {e}") }),
        }
    }
    Ok((out, diags))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSentence {
    pub text: String,
    pub lang: LangId,
}

/// Sentences of every manifest language held in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    langs: Vec<LangId>,
    sentences: Vec<Vec<String>>,
    pub diagnostics: Vec<(PathBuf, Diagnostic)>,
}

impl Corpus {
    pub fn load(manifest: &CorpusManifest) -> Result<Self> {
        let mut langs = Vec::new();
        let mut sentences = Vec::new();
        let mut diagnostics = Vec::new();
        for e in &manifest.entries {
            let (s, d) = read_sentences(&e.path)?;
            if s.is_empty() {
                return Err(Error::InvalidManifest(format!("{} has no valid sentences", e.path.display())));
            }
            diagnostics.extend(d.into_iter().map(|d| (e.path.clone(), d)));
            langs.push(e.lang);
            sentences.push(s);
        }
        Ok(Self { langs, sentences, diagnostics })
    }

    pub fn from_sentences(per_language: Vec<(LangId, Vec<String>)>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut langs = Vec::new();
        let mut sentences = Vec::new();
        for (l, s) in per_language {
            if !seen.insert(l) {
                return Err(Error::InvalidManifest(format!("duplicate language {l}")));
            }
            if s.is_empty() {
                return Err(Error::InvalidManifest(format!("language {l} has no sentences")));
            }
            langs.push(l);
            sentences.push(s);
        }
        if langs.is_empty() {
            return Err(Error::InvalidManifest("no entries".into()));
        }
        Ok(Self { langs, sentences, diagnostics: Vec::new() })
    }

    pub fn languages(&self) -> &[LangId] {
        &self.langs
    }

    pub fn sentences(&self, slot: usize) -> &[String] {
        &self.sentences[slot]
    }

    pub fn sizes(&self) -> Vec<f64> {
        self.sentences.iter().map(|s| s.len() as f64).collect()
    }

    pub fn weights(&self, policy: &SamplingPolicy) -> Result<Vec<f64>> {
        temperature_weights(&self.sizes(), policy.temperature)
    }

    /// Stream of `limit` sentences (or endless with `None`).
    pub fn stream(&self, policy: &SamplingPolicy, limit: Option<usize>) -> Result<SentenceStream<'_>> {
        policy.validate()?;
        let weights = weighted_index(&self.weights(policy)?)?;
        Ok(SentenceStream {
            corpus: self,
            weights,
            seed: policy.seed,
            position: 0,
            limit,
            cursors: vec![0; self.langs.len()],
            shard_rng: None,
        })
    }

    /// Materializes the first `n` stream items with shard-parallel language
    /// planning. Identical to collecting [`Corpus::stream`] for any `workers`.
    pub fn plan(&self, policy: &SamplingPolicy, n: usize, workers: usize) -> Result<Vec<RawSentence>> {
        policy.validate()?;
        let weights = weighted_index(&self.weights(policy)?)?;
        let shards = n.div_ceil(SHARD_LEN);
        let slots: Vec<Vec<u16>> = par::map_indexed(shards, workers, |s| {
            let len = SHARD_LEN.min(n - s * SHARD_LEN);
            let mut g = rng::stream(policy.seed, &[rng::tag::CORPUS, s as u64]);
            (0..len).map(|_| sample_language(&weights, &mut g).0).collect()
        });
        let mut cursors = vec![0usize; self.langs.len()];
        let mut out = Vec::with_capacity(n);
        for slot in slots.into_iter().flatten() {
            let slot = slot as usize;
            let pool = &self.sentences[slot];
            out.push(RawSentence { text: pool[cursors[slot] % pool.len()].clone(), lang: self.langs[slot] });
            cursors[slot] += 1;
        }
        Ok(out)
    }
}

/// Language choice follows the temperature weights; within a language,
/// sentences cycle in file order.
pub struct SentenceStream<'a> {
    corpus: &'a Corpus,
    weights: WeightedIndex<f64>,
    seed: u64,
    position: usize,
    limit: Option<usize>,
    cursors: Vec<usize>,
    shard_rng: Option<rng::Rng>,
}

impl Iterator for SentenceStream<'_> {
    type Item = RawSentence;

    fn next(&mut self) -> Option<RawSentence> {
        if self.limit.is_some_and(|l| self.position >= l) {
            return None;
        }
        if self.position.is_multiple_of(SHARD_LEN) {
            let shard = (self.position / SHARD_LEN) as u64;
            self.shard_rng = Some(rng::stream(self.seed, &[rng::tag::CORPUS, shard]));
        }
        let g = self.shard_rng.as_mut().expect("shard rng initialized");
        let slot = sample_language(&self.weights, g).index();
        self.position += 1;
        let pool = &self.corpus.sentences[slot];
        let text = pool[self.cursors[slot] % pool.len()].clone();
        self.cursors[slot] += 1;
        Some(RawSentence { text, lang: self.corpus.langs[slot] })
    }
}
