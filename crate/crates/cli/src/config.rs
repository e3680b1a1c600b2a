//! Flat run configuration shared by every subcommand.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dictmlm_core::corpus::SamplingPolicy;
use dictmlm_core::examplegen::{BudgetRounding, GenConfig, GenMode, Selection};
use dictmlm_core::experiment::CompareConfig;
use dictmlm_core::lexicon::SynonymSampling;
use dictmlm_core::model::ModelConfig;
use dictmlm_core::synthlang::{Relatedness, SynthConfig};
use dictmlm_core::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub languages: Vec<String>,

    pub normalize: bool,
    pub symmetrize: bool,

    pub temperature: f64,
    pub sample_sentences: usize,

    pub vocab_size: usize,
    pub min_freq: u64,

    pub mode: GenMode,
    pub mask_rate: f64,
    pub t: f64,
    pub duplication: usize,
    pub tlm_replace_prob: f64,
    pub max_seq_len: usize,
    pub selection: Selection,
    pub rounding: BudgetRounding,
    pub synonym_sampling: SynonymSampling,

    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub lang_emb_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub lang_conditioning: bool,
    pub tie_output_embeddings: bool,

    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub checkpoint_every: u64,

    pub synth_lemma_count: usize,
    pub synth_languages: Vec<String>,
    pub synth_relatedness: Relatedness,
    pub synth_zipf_s: f64,
    pub synth_min_len: usize,
    pub synth_max_len: usize,
    pub synth_sentences: usize,
    pub synth_coverage: f64,
    pub synth_eval_pairs: usize,
    pub synth_partner_prob: f64,
    pub synth_seed: u64,

    pub compare_seeds: Vec<u64>,
    pub compare_no_conditioning: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        let cmp = CompareConfig::default();
        let (m, tr, sy) = (&cmp.model, &cmp.train, &cmp.synth);
        Self {
            seed: 0,
            workers: 1,
            languages: Vec::new(),
            normalize: true,
            symmetrize: true,
            temperature: SamplingPolicy::default().temperature,
            sample_sentences: 0,
            vocab_size: cmp.vocab_size,
            min_freq: cmp.min_freq,
            mode: gen.mode,
            mask_rate: gen.mask_rate,
            t: gen.t,
            duplication: gen.duplication,
            tlm_replace_prob: gen.tlm_replace_prob,
            max_seq_len: cmp.gen.max_seq_len,
            selection: gen.selection,
            rounding: gen.rounding,
            synonym_sampling: gen.synonym_sampling,
            hidden: m.hidden,
            layers: m.layers,
            heads: m.heads,
            ffn_dim: m.ffn_dim,
            lang_emb_dim: 0,
            max_positions: m.max_positions,
            dropout: m.dropout,
            lang_conditioning: true,
            tie_output_embeddings: m.tie_output_embeddings,
            lr: tr.lr,
            warmup_steps: tr.warmup_steps,
            total_steps: tr.total_steps,
            batch_size: tr.batch_size,
            weight_decay: tr.weight_decay,
            beta1: tr.beta1,
            beta2: tr.beta2,
            eps: tr.eps,
            clip_norm: tr.clip_norm,
            checkpoint_every: tr.checkpoint_every,
            synth_lemma_count: sy.lemma_count,
            synth_languages: sy.languages.clone(),
            synth_relatedness: sy.relatedness,
            synth_zipf_s: sy.zipf_s,
            synth_min_len: sy.min_len,
            synth_max_len: sy.max_len,
            synth_sentences: sy.sentences_per_language,
            synth_coverage: sy.coverage,
            synth_eval_pairs: sy.eval_pairs,
            synth_partner_prob: sy.partner_prob,
            synth_seed: sy.seed,
            compare_seeds: cmp.seeds.clone(),
            compare_no_conditioning: false,
        }
    }
}

/// One-line description per key, in help order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "global seed threaded through every random stream"),
    ("workers", "worker threads for data generation and evaluation"),
    ("languages", "language codes; empty means derive from inputs"),
    ("normalize", "NFC + lowercase dictionary entries"),
    ("symmetrize", "add the reverse of every dictionary pair"),
    ("temperature", "corpus sampling temperature"),
    ("sample_sentences", "temperature-sampled sentences; 0 = every sentence once"),
    ("vocab_size", "wordpiece vocabulary budget including specials"),
    ("min_freq", "minimum pair frequency for a merge"),
    ("mode", "dict_mlm | dict_tlm | vanilla_mlm"),
    ("mask_rate", "share of whole words masked per sentence"),
    ("t", "probability of a cross-lingual label for a covered word"),
    ("duplication", "corpus copies with fresh masks"),
    ("tlm_replace_prob", "code-switch probability for the DICT-TLM copy"),
    ("max_seq_len", "maximum example length including [CLS]/[SEP]"),
    ("selection", "eligible_first | eligible_only"),
    ("rounding", "masking budget rounding: stochastic | nearest"),
    ("synonym_sampling", "per_language | flat"),
    ("hidden", "model width"),
    ("layers", "transformer layers"),
    ("heads", "attention heads"),
    ("ffn_dim", "feed-forward width"),
    ("lang_emb_dim", "language embedding width; 0 = hidden"),
    ("max_positions", "position embedding table size"),
    ("dropout", "dropout probability during training"),
    ("lang_conditioning", "concatenate the label language embedding in the MLM head"),
    ("tie_output_embeddings", "share the output projection with token embeddings"),
    ("lr", "peak learning rate"),
    ("warmup_steps", "linear warmup steps"),
    ("total_steps", "training steps"),
    ("batch_size", "examples per step"),
    ("weight_decay", "decoupled weight decay on weight matrices"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("eps", "Adam epsilon"),
    ("clip_norm", "global gradient norm limit; 0 disables"),
    ("checkpoint_every", "checkpoint period in steps; 0 = final only"),
    ("synth_lemma_count", "lemmas per synthetic language"),
    ("synth_languages", "synthetic language codes"),
    ("synth_relatedness", "near | far"),
    ("synth_zipf_s", "Zipf exponent of lemma frequencies"),
    ("synth_min_len", "shortest synthetic sentence"),
    ("synth_max_len", "longest synthetic sentence"),
    ("synth_sentences", "sentences per synthetic language"),
    ("synth_coverage", "dictionary coverage of lemma tokens"),
    ("synth_eval_pairs", "parallel evaluation pairs"),
    ("synth_partner_prob", "probability a lemma follows its partner"),
    ("synth_seed", "seed of the synthetic world"),
    ("compare_seeds", "run seeds for the compare harness"),
    ("compare_no_conditioning", "also run DICT-MLM without the conditioned head"),
];

fn default_table() -> toml::Table {
    toml::Table::try_from(RunConfig::default()).expect("config serialises")
}

/// Text listing every key with its default, for `--help`.
pub fn help_text() -> String {
    let table = default_table();
    let mut s = String::from("Configuration keys (config file or --set key=value):\n");
    for (k, doc) in KEY_DOCS {
        let v = table.get(*k).map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("  {k} = {v}\n      {doc}\n"));
    }
    s
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Builds the effective config: defaults, then the file, then `--set`
/// overrides. Unknown keys are rejected.
pub fn load(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut table = default_table();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let user: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        for (k, v) in user {
            if !table.contains_key(&k) {
                bail!("{}: unknown config key `{k}`", path.display());
            }
            table.insert(k, v);
        }
    }
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            bail!("--set expects key=value, got `{s}`");
        };
        let k = k.trim();
        if !table.contains_key(k) {
            bail!("--set: unknown config key `{k}`");
        }
        table.insert(k.to_string(), parse_value(v.trim()));
    }
    let cfg: RunConfig = table.try_into().context("invalid configuration value")?;
    Ok(cfg)
}

impl RunConfig {
    pub fn gen(&self) -> GenConfig {
        GenConfig {
            mask_rate: self.mask_rate,
            t: self.t,
            duplication: self.duplication,
            mode: self.mode,
            tlm_replace_prob: self.tlm_replace_prob,
            max_seq_len: self.max_seq_len,
            seed: self.seed,
            selection: self.selection,
            rounding: self.rounding,
            synonym_sampling: self.synonym_sampling,
        }
    }

    pub fn model(&self, vocab_size: usize, lang_count: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            lang_count,
            lang_emb_dim: if self.lang_emb_dim == 0 { self.hidden } else { self.lang_emb_dim },
            max_positions: self.max_positions.max(self.max_seq_len),
            dropout: self.dropout,
            conditioning_enabled: self.lang_conditioning,
            tie_output_embeddings: self.tie_output_embeddings,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: self.clip_norm,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn sampling(&self) -> SamplingPolicy {
        SamplingPolicy { temperature: self.temperature, seed: self.seed }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            lemma_count: self.synth_lemma_count,
            languages: self.synth_languages.clone(),
            relatedness: self.synth_relatedness,
            zipf_s: self.synth_zipf_s,
            min_len: self.synth_min_len,
            max_len: self.synth_max_len,
            sentences_per_language: self.synth_sentences,
            coverage: self.synth_coverage,
            eval_pairs: self.synth_eval_pairs,
            partner_prob: self.synth_partner_prob,
            seed: self.synth_seed,
        }
    }

    pub fn compare(&self) -> CompareConfig {
        CompareConfig {
            synth: self.synth(),
            vocab_size: self.vocab_size,
            min_freq: self.min_freq,
            gen: self.gen(),
            model: self.model(self.vocab_size, self.synth_languages.len()),
            train: self.train(),
            seeds: self.compare_seeds.clone(),
            include_no_conditioning: self.compare_no_conditioning,
            workers: self.workers,
        }
    }
}
