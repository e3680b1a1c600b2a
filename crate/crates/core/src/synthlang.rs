//! Artificial languages with exact dictionaries and parallel text.
//!
//! Every language renders the same lemma inventory. A sentence is a lemma
//! sequence: the first lemma is Zipf-distributed, and each following lemma is
//! either the *partner* of its predecessor (lemma `k ^ 1`) with probability
//! `partner_prob` or a fresh Zipf draw. The partner links give masked-word
//! prediction something to learn from context.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, ManifestRecord};
use crate::evalsuite::{write_pairs_tsv, ParallelPair};
use crate::lang::{LangId, LanguageRegistry};
use crate::lexicon::{merge, Lexicon, SynonymEntry};
use crate::{par, rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relatedness {
    /// Shared CV-syllable stems with a per-language suffix.
    #[default]
    Near,
    /// Disjoint character inventories per language.
    Far,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub lemma_count: usize,
    pub languages: Vec<String>,
    pub relatedness: Relatedness,
    pub zipf_s: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub sentences_per_language: usize,
    /// Target share of lemma tokens whose lemma is in the dictionaries.
    pub coverage: f64,
    pub eval_pairs: usize,
    pub partner_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            lemma_count: 400,
            languages: vec!["aa".into(), "bb".into()],
            relatedness: Relatedness::Near,
            zipf_s: 1.2,
            min_len: 5,
            max_len: 15,
            sentences_per_language: 2000,
            coverage: 1.0,
            eval_pairs: 200,
            partner_prob: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lemma_count < 50 {
            return Err(Error::config("lemma_count", "must be >= 50"));
        }
        if self.languages.len() < 2 {
            return Err(Error::config("languages", "need at least two languages"));
        }
        if !(0.0..=1.0).contains(&self.coverage) {
            return Err(Error::config("coverage", "must lie in [0, 1]"));
        }
        if self.eval_pairs < 10 {
            return Err(Error::config("eval_pairs", "must be >= 10"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("min_len", "need 1 <= min_len <= max_len"));
        }
        if !(self.zipf_s > 0.0) {
            return Err(Error::config("zipf_s", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.partner_prob) {
            return Err(Error::config("partner_prob", "must lie in [0, 1]"));
        }
        if self.relatedness == Relatedness::Far && self.languages.len() > FAR_ALPHABETS.len() {
            return Err(Error::config(
                "languages",
                format!("the far preset supports at most {} languages", FAR_ALPHABETS.len()),
            ));
        }
        Ok(())
    }
}

const NEAR_CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const NEAR_VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const SUFFIX_CONSONANTS: &[char] = &['h', 'j', 'c', 'q', 'w', 'x'];

/// (consonants, vowels) per language in the far preset; no character repeats.
const FAR_ALPHABETS: &[(&str, &str)] =
    &[("bdgklmnp", "aei"), ("cfhjrstv", "ouy"), ("βγδζθκλμ", "αεο"), ("бвгджзкл", "аеу")];

fn syllables(consonants: &[char], vowels: &[char]) -> Vec<String> {
    consonants.iter().flat_map(|c| vowels.iter().map(move |v| format!("{c}{v}"))).collect()
}

/// Two syllables for the first `|S|²` codes, three after that.
fn stem(code: usize, syl: &[String]) -> String {
    let n = syl.len();
    if code < n * n {
        format!("{}{}", syl[code / n], syl[code % n])
    } else {
        let c = code - n * n;
        format!("{}{}{}", syl[(c / n / n) % n], syl[(c / n) % n], syl[c % n])
    }
}

/// Zipf probabilities `∝ 1 / (k+1)^s` over lemma indices.
pub fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|k| 1.0 / ((k + 1) as f64).powf(s)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Lemma paired with `k` in sentence structure and in coverage selection.
pub fn partner(k: usize, n: usize) -> usize {
    let p = k ^ 1;
    if p < n {
        p
    } else {
        k
    }
}

/// A generated family of languages.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub registry: LanguageRegistry,
    /// `surfaces[lang][lemma]`.
    pub surfaces: Vec<Vec<String>>,
    pub covered: Vec<bool>,
    zipf: WeightedIndex<f64>,
}

impl SynthWorld {
    pub fn generate(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let registry = LanguageRegistry::new(config.languages.iter().map(String::as_str))?;
        if registry.len() != config.languages.len() {
            return Err(Error::config("languages", "language codes must be distinct"));
        }
        let n = config.lemma_count;
        let mut surfaces = Vec::with_capacity(registry.len());
        for (li, code) in registry.codes().iter().enumerate() {
            let (syl, suffix, perm_key) = match config.relatedness {
                Relatedness::Near => {
                    let s = SUFFIX_CONSONANTS[li % SUFFIX_CONSONANTS.len()];
                    let v = NEAR_VOWELS[(li / SUFFIX_CONSONANTS.len()) % NEAR_VOWELS.len()];
                    (syllables(NEAR_CONSONANTS, NEAR_VOWELS), format!("{s}{v}"), 0)
                }
                Relatedness::Far => {
                    let (c, v) = FAR_ALPHABETS[li];
                    let (c, v): (Vec<char>, Vec<char>) = (c.chars().collect(), v.chars().collect());
                    (syllables(&c, &v), String::new(), li as u64 + 1)
                }
            };
            let mut codes: Vec<usize> = (0..n).collect();
            codes.shuffle(&mut rng::stream(config.seed, &[rng::tag::SYNTH, 0, perm_key]));
            let words: Vec<String> = codes.iter().map(|&c| format!("{}{suffix}", stem(c, &syl))).collect();
            let mut seen = HashSet::with_capacity(n);
            for (k, w) in words.iter().enumerate() {
                if !seen.insert(w.as_str()) {
                    return Err(Error::Synth(format!("language `{code}`: lemma {k} collides on surface `{w}`")));
                }
            }
            surfaces.push(words);
        }
        let probs = zipf_weights(n, config.zipf_s);
        let covered = select_coverage(&probs, config.coverage, config.seed);
        let zipf = WeightedIndex::new(&probs).map_err(|e| Error::Synth(e.to_string()))?;
        Ok(Self { config, registry, surfaces, covered, zipf })
    }

    pub fn lang(&self, code: &str) -> Result<LangId> {
        self.registry.require(code)
    }

    pub fn surface(&self, lang: LangId, lemma: usize) -> &str {
        &self.surfaces[lang.index()][lemma]
    }

    pub fn sample_lemmas<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let n = self.config.lemma_count;
        let len = rng.gen_range(self.config.min_len..=self.config.max_len);
        let mut out = Vec::with_capacity(len);
        let mut prev = self.zipf.sample(rng);
        out.push(prev);
        while out.len() < len {
            let follow = rng.gen::<f64>() < self.config.partner_prob;
            let next = self.zipf.sample(rng);
            prev = if follow { partner(prev, n) } else { next };
            out.push(prev);
        }
        out
    }

    pub fn render(&self, lemmas: &[usize], lang: LangId) -> String {
        lemmas.iter().map(|&k| self.surface(lang, k)).collect::<Vec<_>>().join(" ")
    }

    /// Monolingual corpus for `lang`; sentence `i` uses its own RNG stream.
    pub fn corpus(&self, lang: LangId, workers: usize) -> Vec<String> {
        self.corpus_lemmas(lang, workers).iter().map(|l| self.render(l, lang)).collect()
    }

    pub fn corpus_lemmas(&self, lang: LangId, workers: usize) -> Vec<Vec<usize>> {
        par::map_indexed(self.config.sentences_per_language, workers, |i| {
            self.sample_lemmas(&mut rng::stream(self.config.seed, &[rng::tag::SYNTH, 1, lang.0 as u64, i as u64]))
        })
    }

    /// Evaluation pairs sharing one lemma sequence per pair.
    pub fn parallel_pairs(&self, a: LangId, b: LangId) -> Vec<ParallelPair> {
        (0..self.config.eval_pairs)
            .map(|i| {
                let lemmas = self.sample_lemmas(&mut rng::stream(self.config.seed, &[rng::tag::SYNTH, 2, i as u64]));
                ParallelPair { src: (self.render(&lemmas, a), a), tgt: (self.render(&lemmas, b), b) }
            })
            .collect()
    }

    /// Word pairs for covered lemmas, in lemma order.
    pub fn dictionary(&self, a: LangId, b: LangId) -> Vec<(String, String)> {
        (0..self.config.lemma_count)
            .filter(|&k| self.covered[k])
            .map(|k| (self.surface(a, k).to_string(), self.surface(b, k).to_string()))
            .collect()
    }

    pub fn muse_text(&self, a: LangId, b: LangId) -> String {
        self.dictionary(a, b).iter().map(|(x, y)| format!("{x} {y}\n")).collect()
    }

    /// Symmetrised lexicon over the given language pairs.
    pub fn lexicon_for(&self, pairs: &[(LangId, LangId)]) -> Lexicon {
        let lists: Vec<Vec<(SynonymEntry, SynonymEntry)>> = pairs
            .iter()
            .map(|&(a, b)| {
                self.dictionary(a, b)
                    .into_iter()
                    .map(|(x, y)| (SynonymEntry::new(x, a), SynonymEntry::new(y, b)))
                    .collect()
            })
            .collect();
        merge(lists.iter().map(Vec::as_slice), true)
    }

    /// Lexicon over every language pair.
    pub fn lexicon(&self) -> Lexicon {
        self.lexicon_for(&self.language_pairs())
    }

    pub fn language_pairs(&self) -> Vec<(LangId, LangId)> {
        let ids = self.registry.ids().collect::<Vec<_>>();
        let mut out = Vec::new();
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                out.push((ids[i], ids[j]));
            }
        }
        out
    }

    /// Writes dictionaries, corpora, a corpus manifest and the evaluation
    /// pairs of the first two languages under `dir`.
    pub fn write_to_dir(&self, dir: &Path, workers: usize) -> Result<SynthFiles> {
        let io = |p: &Path, e| Error::io(p, e);
        for sub in ["dicts", "corpus"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
        }
        let mut dicts = Vec::new();
        for (a, b) in self.language_pairs() {
            let p = dir.join("dicts").join(format!("{}-{}.txt", self.registry.code(a), self.registry.code(b)));
            fs::write(&p, self.muse_text(a, b)).map_err(|e| io(&p, e))?;
            dicts.push(p);
        }
        let mut records = Vec::new();
        for lang in self.registry.ids() {
            let code = self.registry.code(lang);
            let rel = PathBuf::from("corpus").join(format!("{code}.txt"));
            let p = dir.join(&rel);
            let mut text = self.corpus(lang, workers).join("\n");
            text.push('\n');
            fs::write(&p, text).map_err(|e| io(&p, e))?;
            records.push(ManifestRecord { lang: code.to_string(), path: rel, sentence_count: None });
        }
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&records)?;
        fs::write(&manifest_path, json).map_err(|e| io(&manifest_path, e))?;
        CorpusManifest::load(&manifest_path, &self.registry)?;
        let (a, b) = (LangId(0), LangId(1));
        let pairs_path = dir.join(format!("pairs_{}_{}.tsv", self.registry.code(a), self.registry.code(b)));
        let mut buf = Vec::new();
        write_pairs_tsv(&self.parallel_pairs(a, b), &self.registry, &mut buf)?;
        fs::write(&pairs_path, buf).map_err(|e| io(&pairs_path, e))?;
        let cfg_path = dir.join("synth_config.json");
        fs::write(&cfg_path, serde_json::to_string_pretty(&self.config)?).map_err(|e| io(&cfg_path, e))?;
        Ok(SynthFiles { dicts, manifest: manifest_path, pairs: pairs_path })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthFiles {
    pub dicts: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub pairs: PathBuf,
}

/// Chooses covered lemmas partner-pair by partner-pair, in a seeded order,
/// taking a pair only while the covered Zipf mass stays within `target`.
fn select_coverage(probs: &[f64], target: f64, seed: u64) -> Vec<bool> {
    let n = probs.len();
    let mut covered = vec![false; n];
    if target >= 1.0 {
        covered.fill(true);
        return covered;
    }
    let mut groups: Vec<usize> = (0..n.div_ceil(2)).collect();
    groups.shuffle(&mut rng::stream(seed, &[rng::tag::SYNTH, 3]));
    let mut mass = 0.0;
    for gi in groups {
        let members: Vec<usize> = [2 * gi, 2 * gi + 1].into_iter().filter(|&k| k < n).collect();
        let m: f64 = members.iter().map(|&k| probs[k]).sum();
        if mass + m <= target {
            mass += m;
            for k in members {
                covered[k] = true;
            }
        }
    }
    covered
}
