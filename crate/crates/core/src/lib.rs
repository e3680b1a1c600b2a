//! Dictionary-driven cross-lingual masked language model pretraining.
//!
//! The pipeline runs end to end on a single machine:
//!
//! * [`lexicon`] merges MUSE-style bilingual dictionaries into one multilingual
//!   synonym table and samples cross-lingual synonyms from it.
//! * [`corpus`] balances monolingual corpora with temperature sampling.
//! * [`tokenizer`] learns a shared WordPiece-style vocabulary and keeps the
//!   whole-word structure needed for whole-word masking.
//! * [`examplegen`] compiles sentences into code-switched masked-LM examples.
//! * [`tensor`], [`model`] and [`trainer`] provide a small reverse-mode autodiff
//!   engine, a language-aware transformer encoder with a language-conditioned
//!   MLM head, and an AdamW training loop.
//! * [`evalsuite`] measures how language-agnostic the learned sentence
//!   representations are with per-layer cosine nearest-neighbour retrieval.
//! * [`synthlang`] generates artificial language pairs with exact dictionaries,
//!   which the test suites use as ground truth.
//! * [`experiment`] wires the pieces into the paired DICT-MLM vs vanilla MLM run.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod evalsuite;
pub mod examplegen;
pub mod experiment;
pub mod lang;
pub mod lexicon;
pub mod model;
pub mod par;
pub mod rng;
pub mod synthlang;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use lang::{LangId, LanguageRegistry};
