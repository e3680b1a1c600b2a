//! Multilingual synonym lexicon built from MUSE-format bilingual dictionaries.
//!
//! Each dictionary file contributes `(word, lang) -> (synonym, lang)` pairs.
//! [`merge`] folds any number of files into a single [`Lexicon`] keyed by
//! `(word, lang)`, so a word that appears in several dictionaries collects
//! synonyms from every target language.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::lang::{LangId, LanguageRegistry};
use crate::{Error, Result};

/// A whole word tagged with its language. Ordered by `(lang, word)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SynonymEntry {
    pub lang: LangId,
    pub word: String,
}

impl SynonymEntry {
    pub fn new(word: impl Into<String>, lang: LangId) -> Self {
        Self { lang, word: word.into() }
    }
}

/// NFC-normalizes and lowercases a word.
pub fn normalize_word(word: &str) -> String {
    word.nfc().flat_map(char::to_lowercase).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// NFC + lowercase on both sides.
    #[default]
    NfcLowercase,
    /// Keep fields exactly as written.
    None,
}

impl Normalization {
    fn apply(self, word: &str) -> String {
        match self {
            Normalization::NfcLowercase => normalize_word(word),
            Normalization::None => word.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

/// Output of [`parse_muse`]: pairs in file order plus skipped-line notes.
#[derive(Clone, Debug, Default)]
pub struct ParsedDict {
    pub pairs: Vec<(SynonymEntry, SynonymEntry)>,
    pub diagnostics: Vec<Diagnostic>,
}

pub fn parse_muse(content: &str, src: LangId, tgt: LangId) -> ParsedDict {
    parse_muse_with(content, src, tgt, Normalization::default())
}

/// Parses one dictionary. Lines must hold exactly two whitespace-separated
/// fields; anything else is recorded as a diagnostic and skipped.
pub fn parse_muse_with(content: &str, src: LangId, tgt: LangId, norm: Normalization) -> ParsedDict {
    let mut out = ParsedDict::default();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            out.diagnostics
                .push(Diagnostic { line: line_no, message: format!("expected 2 fields, found {}", fields.len()) });
            continue;
        }
        let a = norm.apply(fields[0]);
        let b = norm.apply(fields[1]);
        if a.is_empty() || b.is_empty() {
            out.diagnostics.push(Diagnostic { line: line_no, message: "empty field after normalization".into() });
            continue;
        }
        out.pairs.push((SynonymEntry::new(a, src), SynonymEntry::new(b, tgt)));
    }
    out
}

/// Reads a dictionary file. Invalid UTF-8 or unreadable files are fatal.
pub fn read_muse_file(path: &Path, src: LangId, tgt: LangId, norm: Normalization) -> Result<ParsedDict> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_muse_with(&content, src, tgt, norm))
}

/// Extracts `("xx", "yy")` from a file named `xx-yy.txt` (or `xx-yy.*.txt`).
pub fn langs_from_filename(path: &Path) -> Option<(String, String)> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".txt")?;
    let stem = stem.split('.').next()?;
    let (a, b) = stem.split_once('-')?;
    let valid = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_alphanumeric() || c == '_');
    (valid(a) && valid(b)).then(|| (a.to_lowercase(), b.to_lowercase()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynonymSampling {
    /// Uniform over languages present, then uniform within the language.
    #[default]
    PerLanguage,
    /// Uniform over all synonyms regardless of language.
    Flat,
}

/// Aggregated synonym table. Immutable once built.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    // lang -> word -> synonyms sorted by (lang, word), deduplicated
    entries: BTreeMap<LangId, BTreeMap<String, Vec<SynonymEntry>>>,
    source_count: usize,
}

static EMPTY: Vec<SynonymEntry> = Vec::new();

/// Aggregates parsed dictionaries into one lexicon.
pub fn merge<'a, I>(pair_lists: I, symmetrize: bool) -> Lexicon
where
    I: IntoIterator<Item = &'a [(SynonymEntry, SynonymEntry)]>,
{
    let mut sets: BTreeMap<LangId, BTreeMap<String, BTreeSet<SynonymEntry>>> = BTreeMap::new();
    let mut insert = |key: &SynonymEntry, syn: &SynonymEntry| {
        if key == syn {
            return;
        }
        sets.entry(key.lang).or_default().entry(key.word.clone()).or_default().insert(syn.clone());
    };
    let mut source_count = 0;
    for list in pair_lists {
        source_count += 1;
        for (a, b) in list {
            insert(a, b);
            if symmetrize {
                insert(b, a);
            }
        }
    }
    let entries = sets
        .into_iter()
        .map(|(lang, words)| {
            let words =
                words.into_iter().filter(|(_, s)| !s.is_empty()).map(|(w, s)| (w, s.into_iter().collect())).collect();
            (lang, words)
        })
        .collect();
    Lexicon { entries, source_count }
}

impl Lexicon {
    pub fn source_count(&self) -> usize {
        self.source_count
    }

    /// Number of `(word, lang)` keys.
    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Languages that own at least one key.
    pub fn languages(&self) -> impl Iterator<Item = LangId> + '_ {
        self.entries.keys().copied()
    }

    pub fn has_language(&self, lang: LangId) -> bool {
        self.entries.contains_key(&lang)
    }

    /// Synonyms of `word` (normalized before lookup). Empty if absent.
    pub fn lookup(&self, word: &str, lang: LangId) -> &[SynonymEntry] {
        self.lookup_normalized(&normalize_word(word), lang)
    }

    /// Lookup for a key that is already normalized.
    pub fn lookup_normalized(&self, word: &str, lang: LangId) -> &[SynonymEntry] {
        self.entries.get(&lang).and_then(|m| m.get(word)).map_or(EMPTY.as_slice(), Vec::as_slice)
    }

    pub fn contains(&self, word: &str, lang: LangId) -> bool {
        !self.lookup_normalized(word, lang).is_empty()
    }

    /// Draws one synonym; `None` iff the word has no entry.
    pub fn sample_synonym<R: Rng + ?Sized>(
        &self,
        word: &str,
        lang: LangId,
        mode: SynonymSampling,
        rng: &mut R,
    ) -> Option<&SynonymEntry> {
        sample_from(self.lookup_normalized(word, lang), mode, rng)
    }

    /// Every `(key, synonym)` pair, in key order.
    pub fn pairs(&self) -> Vec<(SynonymEntry, SynonymEntry)> {
        self.iter().flat_map(|(key, syns)| syns.iter().map(move |s| (key.clone(), s.clone()))).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (SynonymEntry, &[SynonymEntry])> + '_ {
        self.entries.iter().flat_map(|(&lang, words)| {
            words.iter().map(move |(w, s)| (SynonymEntry::new(w.clone(), lang), s.as_slice()))
        })
    }

    /// Writes one JSON record per key, keys in `(lang, word)` order.
    pub fn write_jsonl<W: Write>(&self, registry: &LanguageRegistry, mut out: W) -> Result<()> {
        for (key, syns) in self.iter() {
            let record = LexiconRecord {
                word: key.word,
                lang: registry.code(key.lang).to_string(),
                synonyms: syns
                    .iter()
                    .map(|s| SynonymRecord { word: s.word.clone(), lang: registry.code(s.lang).to_string() })
                    .collect(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n").map_err(|e| Error::io("<lexicon output>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, registry: &LanguageRegistry) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<lexicon input>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { path: "<lexicon input>".into(), line: i + 1, message };
            let rec: LexiconRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let key = SynonymEntry::new(rec.word, registry.require(&rec.lang)?);
            for s in rec.synonyms {
                pairs.push((key.clone(), SynonymEntry::new(s.word, registry.require(&s.lang)?)));
            }
        }
        Ok(merge([pairs.as_slice()], false))
    }
}

/// Two-stage (or flat) draw from a synonym list sorted by `(lang, word)`.
pub fn sample_from<'a, R: Rng + ?Sized>(
    syns: &'a [SynonymEntry],
    mode: SynonymSampling,
    rng: &mut R,
) -> Option<&'a SynonymEntry> {
    if syns.is_empty() {
        return None;
    }
    match mode {
        SynonymSampling::Flat => Some(&syns[rng.gen_range(0..syns.len())]),
        SynonymSampling::PerLanguage => {
            let groups = syns.chunk_by(|a, b| a.lang == b.lang);
            let n_langs = groups.clone().count();
            let group = groups.clone().nth(rng.gen_range(0..n_langs))?;
            Some(&group[rng.gen_range(0..group.len())])
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LexiconRecord {
    word: String,
    lang: String,
    synonyms: Vec<SynonymRecord>,
}

#[derive(Serialize, Deserialize)]
struct SynonymRecord {
    word: String,
    lang: String,
}

/// Whole-word coverage of a corpus by a lexicon.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CoverageReport {
    pub covered: u64,
    pub total: u64,
    /// `lang -> (covered, total)`
    pub per_language: BTreeMap<LangId, (u64, u64)>,
    /// Set when the corpus held no words; `fraction()` is then 0.
    pub empty: bool,
}

impl CoverageReport {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.covered as f64 / self.total as f64
        }
    }

    pub fn language_fraction(&self, lang: LangId) -> f64 {
        match self.per_language.get(&lang) {
            Some(&(c, t)) if t > 0 => c as f64 / t as f64,
            _ => 0.0,
        }
    }
}

/// Fraction of language-tagged whole words that have at least one synonym.
pub fn coverage<'w, I>(words: I, lex: &Lexicon) -> CoverageReport
where
    I: IntoIterator<Item = (&'w str, LangId)>,
{
    let mut report = CoverageReport::default();
    for (word, lang) in words {
        let hit = lex.contains(word, lang);
        let slot = report.per_language.entry(lang).or_default();
        slot.1 += 1;
        report.total += 1;
        if hit {
            slot.0 += 1;
            report.covered += 1;
        }
    }
    if report.total == 0 {
        log::warn!("coverage requested on an empty corpus");
        report.empty = true;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn reg() -> LanguageRegistry {
        LanguageRegistry::new(["en", "es", "it", "ms", "no", "pt", "fr"]).unwrap()
    }

    fn syn(reg: &LanguageRegistry, code: &str, word: &str) -> SynonymEntry {
        SynonymEntry::new(word, reg.require(code).unwrap())
    }

    #[test]
    fn parses_single_pair() {
        let r = reg();
        let (pt, it) = (r.require("pt").unwrap(), r.require("it").unwrap());
        let parsed = parse_muse("andar camminare\n", pt, it);
        assert_eq!(parsed.pairs, vec![(syn(&r, "pt", "andar"), syn(&r, "it", "camminare"))]);
        assert!(parsed.diagnostics.is_empty());
    }

    #[test]
    fn empty_file_and_malformed_lines() {
        let r = reg();
        let (en, fr) = (r.require("en").unwrap(), r.require("fr").unwrap());
        assert!(parse_muse("", en, fr).pairs.is_empty());
        let parsed = parse_muse("cat\tchat\nbig red grand\n\n", en, fr);
        assert_eq!(parsed.pairs.len(), 1);
        assert_eq!(parsed.diagnostics.len(), 1);
        assert_eq!(parsed.diagnostics[0].line, 2);
    }

    #[test]
    fn normalizes_case_and_composition() {
        let r = reg();
        let (en, fr) = (r.require("en").unwrap(), r.require("fr").unwrap());
        // "e" + combining acute composes to a single code point
        let parsed = parse_muse("Coffee CAFE\u{301}\n", en, fr);
        assert_eq!(parsed.pairs[0].1.word, "caf\u{e9}");
        assert_eq!(parsed.pairs[0].0.word, "coffee");
        let raw = parse_muse_with("Coffee Café\n", en, fr, Normalization::None);
        assert_eq!(raw.pairs[0].0.word, "Coffee");
    }

    #[test]
    fn merges_andar_across_three_files() {
        let r = reg();
        let id = |c| r.require(c).unwrap();
        let a = parse_muse("andar camminare", id("pt"), id("it"));
        let b = parse_muse("andar piso", id("pt"), id("es"));
        let c = parse_muse("andar walking\nandar walk", id("pt"), id("en"));
        let lex = merge([&a.pairs[..], &b.pairs[..], &c.pairs[..]], true);
        let got: BTreeSet<_> = lex.lookup("andar", id("pt")).iter().cloned().collect();
        let want: BTreeSet<_> =
            [syn(&r, "it", "camminare"), syn(&r, "es", "piso"), syn(&r, "en", "walking"), syn(&r, "en", "walk")]
                .into_iter()
                .collect();
        assert_eq!(got, want);
        assert_eq!(lex.source_count(), 3);
        // sorted by (lang, word): en < es < it
        let codes: Vec<_> = lex.lookup("andar", id("pt")).iter().map(|s| (r.code(s.lang), s.word.as_str())).collect();
        assert_eq!(codes, [("en", "walk"), ("en", "walking"), ("es", "piso"), ("it", "camminare")]);
    }

    #[test]
    fn lookup_vokal_and_symmetry() {
        let r = reg();
        let id = |c| r.require(c).unwrap();
        let d = parse_muse("vokal vowels\nvokal vowel\n", id("no"), id("en"));
        let lex = merge([&d.pairs[..]], true);
        let got: Vec<_> = lex.lookup("vokal", id("no")).to_vec();
        assert_eq!(got, vec![syn(&r, "en", "vowel"), syn(&r, "en", "vowels")]);
        assert!(lex.lookup("unknown", id("no")).is_empty());
        assert_eq!(lex.lookup("vowel", id("en")), [syn(&r, "no", "vokal")]);

        let single = [(syn(&r, "en", "a"), syn(&r, "fr", "b"))];
        let lex = merge([&single[..]], true);
        assert_eq!(lex.len(), 2);
        assert_eq!(lex.lookup("b", id("fr")), [syn(&r, "en", "a")]);
        let one_way = merge([&single[..]], false);
        assert!(one_way.lookup("b", id("fr")).is_empty());
    }

    #[test]
    fn sampling_singleton_and_empty() {
        let r = reg();
        let only = [syn(&r, "it", "x")];
        let mut g = rng::stream(1, &[]);
        for _ in 0..100 {
            assert_eq!(sample_from(&only, SynonymSampling::PerLanguage, &mut g), Some(&only[0]));
        }
        assert_eq!(sample_from(&[], SynonymSampling::PerLanguage, &mut g), None);
    }

    /// Exact probabilities of the two-stage draw, enumerated from the tree
    /// language -> word, compared with frequencies from the implementation.
    #[test]
    fn two_stage_matches_enumerated_tree() {
        let r = reg();
        let syns = {
            let mut v = vec![syn(&r, "en", "a"), syn(&r, "en", "b"), syn(&r, "fr", "c")];
            v.sort();
            v
        };
        let mut exact: BTreeMap<&SynonymEntry, f64> = BTreeMap::new();
        let langs: BTreeSet<LangId> = syns.iter().map(|s| s.lang).collect();
        for l in &langs {
            let words: Vec<_> = syns.iter().filter(|s| s.lang == *l).collect();
            for w in &words {
                *exact.entry(w).or_default() += 1.0 / langs.len() as f64 / words.len() as f64;
            }
        }
        assert_eq!(exact[&syn(&r, "fr", "c")], 0.5);
        assert_eq!(exact[&syn(&r, "en", "a")], 0.25);

        let n = 100_000;
        let mut counts: BTreeMap<&SynonymEntry, usize> = BTreeMap::new();
        let mut g = rng::stream(2, &[]);
        for _ in 0..n {
            let s = sample_from(&syns, SynonymSampling::PerLanguage, &mut g).unwrap();
            *counts.entry(s).or_default() += 1;
        }
        for (s, p) in exact {
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let f = counts[s] as f64 / n as f64;
            assert!((f - p).abs() < 4.0 * sigma, "{s:?}: {f} vs {p}");
        }
    }

    #[test]
    fn cubaan_is_uniform_over_five_forms() {
        let r = reg();
        let id = |c| r.require(c).unwrap();
        let d = parse_muse(
            "cubaan attempt\ncubaan attempting\ncubaan attempted\ncubaan testing\ncubaan attempts\n",
            id("ms"),
            id("en"),
        );
        let lex = merge([&d.pairs[..]], true);
        let mut g = rng::stream(3, &[]);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for _ in 0..100_000 {
            let s = lex.sample_synonym("cubaan", id("ms"), SynonymSampling::PerLanguage, &mut g).unwrap();
            *counts.entry(s.word.clone()).or_default() += 1;
        }
        assert_eq!(counts.len(), 5);
        for c in counts.values() {
            assert!((*c as f64 / 1e5 - 0.2).abs() < 0.02);
        }
    }

    #[test]
    fn flat_sampling_weights_by_count() {
        let r = reg();
        let syns = vec![syn(&r, "en", "a"), syn(&r, "en", "b"), syn(&r, "en", "c"), syn(&r, "fr", "d")];
        let mut g = rng::stream(4, &[]);
        let n = 40_000;
        let fr = (0..n).filter(|_| sample_from(&syns, SynonymSampling::Flat, &mut g).unwrap().word == "d").count();
        assert!((fr as f64 / n as f64 - 0.25).abs() < 0.01);
    }

    #[test]
    fn coverage_cases() {
        let r = reg();
        let id = |c| r.require(c).unwrap();
        let d = parse_muse("cat chat\ndog chien\n", id("en"), id("fr"));
        let lex = merge([&d.pairs[..]], true);
        let full = coverage([("cat", id("en")), ("dog", id("en"))], &lex);
        assert_eq!(full.fraction(), 1.0);
        let mixed = coverage([("cat", id("en")), ("tree", id("en")), ("pesa", id("ms"))], &lex);
        assert!((mixed.fraction() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mixed.language_fraction(id("ms")), 0.0);
        let empty = coverage(std::iter::empty(), &lex);
        assert!(empty.empty);
        assert_eq!(empty.fraction(), 0.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let r = reg();
        let id = |c| r.require(c).unwrap();
        let d = parse_muse("andar walk\nandar walking\n", id("pt"), id("en"));
        let lex = merge([&d.pairs[..]], true);
        let mut buf = Vec::new();
        lex.write_jsonl(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"word":"walk","lang":"en","synonyms":[{"word":"andar","lang":"pt"}]}"#
        );
        let back = Lexicon::read_jsonl(buf.as_slice(), &r).unwrap();
        assert_eq!(back.pairs(), lex.pairs());
    }

    #[test]
    fn filename_pattern() {
        assert_eq!(langs_from_filename(Path::new("/d/pt-it.txt")), Some(("pt".into(), "it".into())));
        assert_eq!(langs_from_filename(Path::new("en-de.0-5000.txt")), Some(("en".into(), "de".into())));
        assert_eq!(langs_from_filename(Path::new("readme.md")), None);
    }
}
