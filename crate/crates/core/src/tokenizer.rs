//! Shared multilingual WordPiece vocabulary.
//!
//! Vocabulary learning uses frequency-scored pair merging over characters,
//! with the `##` prefix marking word-internal pieces. Encoding is greedy
//! longest-match-first per pre-token and records one span per whole word.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::lang::LangId;
use crate::{par, Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIAL: u32 = 5;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const CONTINUATION: &str = "##";
pub const MAX_PIECES_PER_WORD: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    continuation: Vec<bool>,
}

impl Vocab {
    /// Builds a vocabulary from pieces in id order. Specials must occupy ids 0..5.
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() < SPECIALS.len() || pieces[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Vocab(format!("first pieces must be {SPECIALS:?}")));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() || p.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid piece {p:?} at id {i}")));
            }
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate piece {p:?}")));
            }
        }
        let continuation = pieces.iter().map(|p| p.starts_with(CONTINUATION)).collect();
        Ok(Self { pieces, index, continuation })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIAL
    }

    pub fn is_continuation(&self, id: u32) -> bool {
        self.continuation.get(id as usize).copied().unwrap_or(false)
    }

    /// Vocab file: one piece per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for p in &self.pieces {
            writeln!(f, "{p}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_pieces(text.lines().map(str::to_string).collect())
    }

    /// Greedy longest-match-first segmentation of one pre-token. Returns
    /// `[UNK]` when a position cannot be matched or the word needs more than
    /// [`MAX_PIECES_PER_WORD`] pieces.
    pub fn tokenize_word(&self, word: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let bounds: Vec<usize> = word.char_indices().map(|(i, _)| i).chain(std::iter::once(word.len())).collect();
        let mut start = 0; // index into bounds
        let mut buf = String::with_capacity(word.len() + 2);
        while start + 1 < bounds.len() {
            let mut matched = None;
            for end in (start + 1..bounds.len()).rev() {
                buf.clear();
                if start > 0 {
                    buf.push_str(CONTINUATION);
                }
                buf.push_str(&word[bounds[start]..bounds[end]]);
                if let Some(id) = self.id(&buf) {
                    matched = Some((id, end));
                    break;
                }
            }
            match matched {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                    if out.len() > MAX_PIECES_PER_WORD {
                        return vec![UNK];
                    }
                }
                None => return vec![UNK],
            }
        }
        out
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '¡' | '¿'
                | '«'
                | '»'
                | '‘'
                | '’'
                | '“'
                | '”'
                | '…'
                | '–'
                | '—'
                | '·'
                | '。'
                | '、'
                | '，'
                | '：'
                | '；'
                | '！'
                | '？'
        )
}

/// Normalizes (NFC + lowercase), splits on Unicode whitespace and isolates
/// punctuation characters as standalone pre-tokens.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().flat_map(char::to_lowercase).collect();
    let mut out = Vec::new();
    for chunk in normalized.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if is_punctuation(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Learns a vocabulary of at most `vocab_size` pieces by repeatedly merging
/// the most frequent adjacent symbol pair (ties broken by piece strings).
pub fn train_vocab<I, S>(texts: I, vocab_size: usize, min_freq: u64) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    train_vocab_with_workers(texts, vocab_size, min_freq, 1)
}

pub fn train_vocab_with_workers<I, S>(texts: I, vocab_size: usize, min_freq: u64, workers: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for t in texts {
        for w in pre_tokenize(t.as_ref()) {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::EmptyInput("vocabulary training corpus".into()));
    }

    // symbol table: piece string <-> symbol id
    let mut symbols: Vec<String> = Vec::new();
    let mut symbol_id: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, symbols: &mut Vec<String>| -> u32 {
        *symbol_id.entry(s.clone()).or_insert_with(|| {
            symbols.push(s);
            (symbols.len() - 1) as u32
        })
    };

    let mut words: Vec<(Vec<u32>, u64)> = Vec::with_capacity(word_counts.len());
    let mut alphabet = BTreeSet::new();
    for (w, &count) in &word_counts {
        let seq: Vec<u32> = w
            .chars()
            .enumerate()
            .map(|(i, c)| {
                let s = if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") };
                alphabet.insert(s.clone());
                intern(s, &mut symbols)
            })
            .collect();
        words.push((seq, count));
    }

    let base = SPECIALS.len() + alphabet.len();
    if vocab_size < base {
        return Err(Error::Vocab(format!(
            "vocab_size {vocab_size} below alphabet ({}) + specials ({})",
            alphabet.len(),
            SPECIALS.len()
        )));
    }
    let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    pieces.extend(alphabet.iter().cloned());
    let mut in_vocab: BTreeSet<String> = alphabet;

    while pieces.len() < vocab_size {
        let counts = count_pairs(&words, workers);
        let best = counts.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                // prefer the lexicographically smallest pair on ties
                let ka = (&symbols[pa.0 as usize], &symbols[pa.1 as usize]);
                let kb = (&symbols[pb.0 as usize], &symbols[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((left, right), _)) = best else { break };
        let merged = format!("{}{}", symbols[left as usize], symbols[right as usize].trim_start_matches(CONTINUATION));
        let merged_id = intern(merged.clone(), &mut symbols);
        for (seq, _) in &mut words {
            apply_merge(seq, left, right, merged_id);
        }
        if in_vocab.insert(merged.clone()) {
            pieces.push(merged);
        }
    }
    Vocab::from_pieces(pieces)
}

fn count_pairs(words: &[(Vec<u32>, u64)], workers: usize) -> HashMap<(u32, u32), u64> {
    const CHUNK: usize = 2048;
    let chunks = words.len().div_ceil(CHUNK);
    let partial = par::map_indexed(chunks, workers, |c| {
        let mut m: HashMap<(u32, u32), u64> = HashMap::new();
        for (seq, count) in &words[c * CHUNK..((c + 1) * CHUNK).min(words.len())] {
            for w in seq.windows(2) {
                *m.entry((w[0], w[1])).or_default() += count;
            }
        }
        m
    });
    let mut total = HashMap::new();
    for m in partial {
        for (k, v) in m {
            *total.entry(k).or_default() += v;
        }
    }
    total
}

fn apply_merge(seq: &mut Vec<u32>, left: u32, right: u32, merged: u32) {
    if seq.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

/// Word-structured piece sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub piece_ids: Vec<u32>,
    /// Half-open piece ranges, one per whole word.
    pub word_spans: Vec<(usize, usize)>,
    /// Normalized surface of each word (lexicon key).
    pub words: Vec<String>,
    pub lang_per_word: Vec<LangId>,
    /// Language of the sentence as a whole.
    pub lang: LangId,
}

impl TokenizedSentence {
    pub fn word_count(&self) -> usize {
        self.word_spans.len()
    }

    pub fn word_pieces(&self, word: usize) -> &[u32] {
        let (s, e) = self.word_spans[word];
        &self.piece_ids[s..e]
    }
}

pub fn encode(text: &str, lang: LangId, vocab: &Vocab) -> Result<TokenizedSentence> {
    let words = pre_tokenize(text);
    if words.is_empty() {
        return Err(Error::EmptyInput("sentence is empty after whitespace trimming".into()));
    }
    let mut piece_ids = Vec::new();
    let mut word_spans = Vec::with_capacity(words.len());
    for w in &words {
        let start = piece_ids.len();
        piece_ids.extend(vocab.tokenize_word(w));
        word_spans.push((start, piece_ids.len()));
    }
    Ok(TokenizedSentence { piece_ids, word_spans, lang_per_word: vec![lang; words.len()], words, lang })
}

/// Joins pieces back into text. Continuations attach to the previous word,
/// `[UNK]` is kept literally and the other specials are dropped.
pub fn decode(piece_ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for &id in piece_ids {
        let piece = vocab.piece(id).ok_or(Error::OutOfRange { op: "decode", index: id as usize, size: vocab.len() })?;
        if Vocab::is_special(id) && id != UNK {
            continue;
        }
        if let Some(rest) = piece.strip_prefix(CONTINUATION).filter(|_| vocab.is_continuation(id)) {
            out.push_str(rest);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(piece);
        }
    }
    Ok(out)
}
