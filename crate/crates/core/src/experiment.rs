//! Paired DICT-MLM vs vanilla MLM runs on a synthetic language pair.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::RawSentence;
use crate::evalsuite::{layerwise_report, RetrievalReport};
use crate::examplegen::{generate, GenConfig, GenMode};
use crate::lang::LangId;
use crate::model::{Model, ModelConfig};
use crate::synthlang::{SynthConfig, SynthWorld};
use crate::tokenizer::{train_vocab_with_workers, Vocab};
use crate::trainer::{train, TrainConfig, TrainOptions};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub synth: SynthConfig,
    pub vocab_size: usize,
    pub min_freq: u64,
    /// Used for the DICT-MLM runs; vanilla runs use the same settings in
    /// vanilla mode.
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Adds a DICT-MLM run with the language-conditioned head disabled.
    pub include_no_conditioning: bool,
    pub workers: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig { lemma_count: 60, max_len: 10, ..SynthConfig::default() },
            vocab_size: 100,
            min_freq: 2,
            gen: GenConfig { t: 0.5, duplication: 5, max_seq_len: 32, ..GenConfig::default() },
            model: ModelConfig {
                hidden: 64,
                layers: 4,
                heads: 4,
                ffn_dim: 128,
                lang_emb_dim: 64,
                max_positions: 32,
                dropout: 0.1,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr: 3e-3,
                warmup_steps: 50,
                total_steps: 1500,
                batch_size: 32,
                ..TrainConfig::default()
            },
            seeds: vec![1, 2, 3],
            include_no_conditioning: false,
            workers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    DictMlm,
    VanillaMlm,
    DictMlmNoConditioning,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::DictMlm => "dict_mlm",
            Variant::VanillaMlm => "vanilla_mlm",
            Variant::DictMlmNoConditioning => "dict_mlm_no_cond",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub report: RetrievalReport,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub runs: Vec<RunResult>,
    pub random_baseline: f64,
}

impl CompareSummary {
    pub fn variants(&self) -> Vec<Variant> {
        let mut v: Vec<Variant> = Vec::new();
        for r in &self.runs {
            if !v.contains(&r.variant) {
                v.push(r.variant);
            }
        }
        v
    }

    pub fn run(&self, variant: Variant, seed: u64) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    /// Mean `last4_avg` across seeds.
    pub fn mean_last4(&self, variant: Variant) -> f64 {
        let xs: Vec<f64> = self.runs.iter().filter(|r| r.variant == variant).map(|r| r.report.last4_avg).collect();
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    }

    /// One row per variant: `model,last4_avg`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("model,last4_avg\n");
        for v in self.variants() {
            s.push_str(&format!("{},{}\n", v.name(), self.mean_last4(v)));
        }
        s
    }

    /// One row per run: `model,seed,last4_avg,final_loss`.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("model,seed,last4_avg,final_loss\n");
        for r in &self.runs {
            s.push_str(&format!("{},{},{},{}\n", r.variant.name(), r.seed, r.report.last4_avg, r.final_loss));
        }
        s
    }
}

/// Shared inputs of every run: the synthetic world, its corpus and vocabulary.
pub struct Prepared {
    pub world: SynthWorld,
    pub sentences: Vec<RawSentence>,
    pub vocab: Vocab,
}

pub fn prepare(cfg: &CompareConfig) -> Result<Prepared> {
    let world = SynthWorld::generate(cfg.synth.clone())?;
    let per_lang: Vec<Vec<String>> = world.registry.ids().map(|l| world.corpus(l, cfg.workers)).collect();
    let n = cfg.synth.sentences_per_language;
    let mut sentences = Vec::with_capacity(n * per_lang.len());
    for i in 0..n {
        for (l, c) in per_lang.iter().enumerate() {
            sentences.push(RawSentence { text: c[i].clone(), lang: LangId(l as u16) });
        }
    }
    let vocab =
        train_vocab_with_workers(sentences.iter().map(|s| s.text.as_str()), cfg.vocab_size, cfg.min_freq, cfg.workers)?;
    Ok(Prepared { world, sentences, vocab })
}

/// Generates data for `variant`, trains a fresh model and scores retrieval on
/// the first two languages.
pub fn run_variant(cfg: &CompareConfig, prep: &Prepared, variant: Variant, seed: u64) -> Result<RunResult> {
    let start = Instant::now();
    let lex = prep.world.lexicon();
    let mut gen = cfg.gen.clone();
    gen.seed = seed;
    gen.mode = match variant {
        Variant::VanillaMlm => GenMode::VanillaMlm,
        _ => GenMode::DictMlm,
    };
    let data = generate(&prep.sentences, &gen, &lex, &prep.vocab, cfg.workers)?;
    let mut mcfg = cfg.model.clone();
    mcfg.vocab_size = prep.vocab.len();
    mcfg.lang_count = prep.world.registry.len();
    mcfg.conditioning_enabled = variant != Variant::DictMlmNoConditioning;
    mcfg.max_positions = mcfg.max_positions.max(gen.max_seq_len);
    let mut model = Model::new(mcfg, seed)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let report = train(&mut model, &data.examples, &tcfg, TrainOptions::default())?;
    let tail = report.steps.len().saturating_sub(50);
    let final_loss =
        report.steps[tail..].iter().map(|s| s.loss).sum::<f64>() / (report.steps.len() - tail).max(1) as f64;
    let pairs = prep.world.parallel_pairs(LangId(0), LangId(1));
    let retrieval = layerwise_report(&model, &pairs, &prep.vocab, cfg.workers)?;
    let seconds = start.elapsed().as_secs_f64();
    log::info!(
        "{} seed {seed}: last4_avg {:.3} loss {final_loss:.3} ({seconds:.0}s)",
        variant.name(),
        retrieval.last4_avg
    );
    Ok(RunResult { variant, seed, report: retrieval, final_loss, seconds })
}

pub fn run_compare(cfg: &CompareConfig) -> Result<CompareSummary> {
    if cfg.seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let prep = prepare(cfg)?;
    let mut variants = vec![Variant::DictMlm, Variant::VanillaMlm];
    if cfg.include_no_conditioning {
        variants.push(Variant::DictMlmNoConditioning);
    }
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for &v in &variants {
            runs.push(run_variant(cfg, &prep, v, seed)?);
        }
    }
    Ok(CompareSummary { runs, random_baseline: 1.0 / cfg.synth.eval_pairs as f64 })
}
