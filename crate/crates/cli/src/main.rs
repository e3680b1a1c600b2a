mod config;

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dictmlm_core::corpus::{Corpus, CorpusManifest, ManifestRecord, RawSentence};
use dictmlm_core::evalsuite::{layerwise_report, masking_stats_report, read_pairs_tsv};
use dictmlm_core::examplegen::{generate, read_examples_jsonl, write_examples_jsonl, GenConfig, GenStats};
use dictmlm_core::experiment::run_compare;
use dictmlm_core::lang::LanguageRegistry;
use dictmlm_core::lexicon::{langs_from_filename, merge, read_muse_file, Lexicon, Normalization};
use dictmlm_core::model::{load_checkpoint, save_checkpoint, Model};
use dictmlm_core::synthlang::SynthWorld;
use dictmlm_core::tokenizer::{train_vocab_with_workers, Vocab};
use dictmlm_core::trainer::{train, TrainOptions};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "dictmlm", version, about = "Dictionary-driven cross-lingual MLM pretraining")]
struct Cli {
    /// TOML file with configuration keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Global seed; overrides `seed` from the file and `--set`
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; output does not depend on it
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Disable the language-conditioned MLM head.
    #[arg(long, global = true)]
    no_lang_conditioning: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge bilingual dictionaries (`xx-yy.txt`, one pair per line) into a JSONL lexicon.
    MergeDicts {
        #[arg(long = "dict", required = true)]
        dicts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a subword vocabulary from a corpus manifest.
    BuildVocab {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate training examples; also writes `<out>.meta.json`.
    GenData {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masking statistics of an example file as JSON.
    Stats {
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; checkpoints and `train_log.csv` go to `--out-dir`.
    Train {
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint holding optimiser state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Layerwise parallel-sentence retrieval accuracy as CSV.
    EvalRetrieval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write a synthetic language world (dictionaries, corpora, manifest, pairs).
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train DICT-MLM and vanilla MLM on a synthetic pair and compare retrieval.
    Compare {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Usage errors exit 1, data errors exit 2.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let usage = e.chain().any(|c| {
            matches!(c.downcast_ref::<dictmlm_core::Error>(), Some(dictmlm_core::Error::InvalidConfig { .. }))
        });
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Data(e)
        }
    }
}

impl From<dictmlm_core::Error> for Failure {
    fn from(e: dictmlm_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = config::help_text();
    let cmd = Cli::command().after_long_help(help.clone()).after_help(help);
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn effective_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = config::load(cli.config.as_deref(), &cli.set).map_err(Failure::Usage)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if cli.no_lang_conditioning {
        cfg.lang_conditioning = false;
    }
    if cfg.workers == 0 {
        return Err(Failure::Usage(anyhow!("workers must be at least 1")));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = effective_config(&cli)?;
    match &cli.command {
        Command::MergeDicts { dicts, out } => merge_dicts(&cfg, dicts, out),
        Command::BuildVocab { manifest, out } => build_vocab(&cfg, manifest, out),
        Command::GenData { manifest, lexicon, vocab, out } => gen_data(&cfg, manifest, lexicon, vocab, out),
        Command::Stats { examples, vocab, out } => stats(&cfg, examples, vocab, out.as_deref()),
        Command::Train { examples, vocab, out_dir, resume } => {
            train_cmd(&cfg, examples, vocab, out_dir, resume.as_deref())
        }
        Command::EvalRetrieval { checkpoint, vocab, pairs, out, json } => {
            eval_retrieval(&cfg, checkpoint, vocab, pairs, out, json.as_deref())
        }
        Command::Synth { out_dir } => synth(&cfg, out_dir),
        Command::Compare { out_dir } => compare(&cfg, out_dir),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// The configured languages, or else the given codes.
fn registry_or(cfg: &RunConfig, derived: impl IntoIterator<Item = String>) -> CliResult<LanguageRegistry> {
    let codes: Vec<String> =
        if cfg.languages.is_empty() { derived.into_iter().collect() } else { cfg.languages.clone() };
    if codes.is_empty() {
        return Err(Failure::Usage(anyhow!("no languages: set `languages` or provide inputs naming them")));
    }
    Ok(LanguageRegistry::new(codes)?)
}

fn manifest_codes(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records: Vec<ManifestRecord> =
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
    Ok(records.into_iter().map(|r| r.lang).collect())
}

fn lexicon_codes(path: &Path) -> CliResult<BTreeSet<String>> {
    #[derive(Deserialize)]
    struct Entry {
        lang: String,
        #[serde(default)]
        synonyms: Vec<Syn>,
    }
    #[derive(Deserialize)]
    struct Syn {
        lang: String,
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut codes = BTreeSet::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: Entry = serde_json::from_str(line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        codes.insert(e.lang);
        codes.extend(e.synonyms.into_iter().map(|s| s.lang));
    }
    Ok(codes)
}

fn load_vocab(path: &Path) -> CliResult<Vocab> {
    Ok(Vocab::load(path).with_context(|| format!("loading vocabulary {}", path.display()))?)
}

fn merge_dicts(cfg: &RunConfig, dicts: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut pairs_of = Vec::with_capacity(dicts.len());
    for p in dicts {
        let (a, b) = langs_from_filename(p)
            .ok_or_else(|| Failure::Usage(anyhow!("{}: expected a file named xx-yy.txt", p.display())))?;
        pairs_of.push((p, a, b));
    }
    let registry = registry_or(cfg, pairs_of.iter().flat_map(|(_, a, b)| [a.clone(), b.clone()]))?;
    let norm = if cfg.normalize { Normalization::NfcLowercase } else { Normalization::None };
    let mut lists = Vec::with_capacity(dicts.len());
    for (p, a, b) in &pairs_of {
        let parsed = read_muse_file(p, registry.require(a)?, registry.require(b)?, norm)?;
        for d in &parsed.diagnostics {
            log::warn!("{}:{}: {}", p.display(), d.line, d.message);
        }
        log::info!("{}: {} pairs, {} skipped lines", p.display(), parsed.pairs.len(), parsed.diagnostics.len());
        lists.push(parsed.pairs);
    }
    let lex = merge(lists.iter().map(Vec::as_slice), cfg.symmetrize);
    let mut buf = Vec::new();
    lex.write_jsonl(&registry, &mut buf)?;
    write_file(out, &buf)?;
    log::info!("{} keys written to {}", lex.len(), out.display());
    Ok(())
}

fn load_corpus(manifest: &Path, registry: &LanguageRegistry) -> CliResult<Corpus> {
    let m = CorpusManifest::load(manifest, registry)?;
    Ok(Corpus::load(&m)?)
}

fn build_vocab(cfg: &RunConfig, manifest: &Path, out: &Path) -> CliResult<()> {
    let registry = registry_or(cfg, manifest_codes(manifest)?)?;
    let corpus = load_corpus(manifest, &registry)?;
    let texts = (0..corpus.languages().len()).flat_map(|s| corpus.sentences(s).iter().map(String::as_str));
    let vocab = train_vocab_with_workers(texts, cfg.vocab_size, cfg.min_freq, cfg.workers)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    vocab.save(out)?;
    log::info!("{} pieces written to {}", vocab.len(), out.display());
    Ok(())
}

/// Sidecar describing an example file.
#[derive(Serialize, Deserialize)]
struct ExamplesMeta {
    languages: Vec<String>,
    vocab_size: usize,
    sentences: usize,
    examples: usize,
    gen: GenConfig,
    stats: GenStats,
}

fn meta_path(examples: &Path) -> PathBuf {
    let mut s = examples.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn read_meta(examples: &Path) -> CliResult<Option<ExamplesMeta>> {
    let p = meta_path(examples);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?))
}

fn gen_data(cfg: &RunConfig, manifest: &Path, lexicon: &Path, vocab: &Path, out: &Path) -> CliResult<()> {
    let mut derived: BTreeSet<String> = manifest_codes(manifest)?.into_iter().collect();
    derived.extend(lexicon_codes(lexicon)?);
    let registry = registry_or(cfg, derived)?;
    let corpus = load_corpus(manifest, &registry)?;
    let lex_file = File::open(lexicon).with_context(|| format!("opening {}", lexicon.display()))?;
    let lex = Lexicon::read_jsonl(BufReader::new(lex_file), &registry)?;
    let vocab = load_vocab(vocab)?;
    let sentences: Vec<RawSentence> = if cfg.sample_sentences == 0 {
        corpus
            .languages()
            .iter()
            .enumerate()
            .flat_map(|(slot, &lang)| corpus.sentences(slot).iter().map(move |t| RawSentence { text: t.clone(), lang }))
            .collect()
    } else {
        corpus.plan(&cfg.sampling(), cfg.sample_sentences, cfg.workers)?
    };
    let gen = cfg.gen();
    let output = generate(&sentences, &gen, &lex, &vocab, cfg.workers)?;
    for (i, msg) in output.diagnostics.iter().take(20) {
        log::warn!("sentence {i}: {msg}");
    }
    let mut buf = Vec::new();
    write_examples_jsonl(&output.examples, &mut buf)?;
    write_file(out, &buf)?;
    let meta = ExamplesMeta {
        languages: registry.codes().to_vec(),
        vocab_size: vocab.len(),
        sentences: sentences.len(),
        examples: output.examples.len(),
        gen,
        stats: output.stats,
    };
    write_file(&meta_path(out), serde_json::to_string_pretty(&meta).map_err(anyhow::Error::from)?.as_bytes())?;
    log::info!(
        "{} examples from {} sentences; mask rate {:.4}, cross-lingual labels {:.4}",
        meta.examples,
        meta.sentences,
        meta.stats.mask_rate(),
        meta.stats.xling_fraction()
    );
    Ok(())
}

fn load_examples(path: &Path) -> CliResult<Vec<dictmlm_core::examplegen::TrainingExample>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_examples_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?)
}

fn examples_registry(cfg: &RunConfig, examples: &Path) -> CliResult<LanguageRegistry> {
    let derived = read_meta(examples)?.map(|m| m.languages).unwrap_or_default();
    registry_or(cfg, derived)
}

fn stats(cfg: &RunConfig, examples: &Path, vocab: &Path, out: Option<&Path>) -> CliResult<()> {
    let registry = examples_registry(cfg, examples)?;
    let vocab = load_vocab(vocab)?;
    let exs = load_examples(examples)?;
    let report = masking_stats_report(&exs, &vocab, &registry);
    let mut json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    json.push('\n');
    match out {
        Some(p) => write_file(p, json.as_bytes())?,
        None => print!("{json}"),
    }
    Ok(())
}

fn train_cmd(cfg: &RunConfig, examples: &Path, vocab: &Path, out_dir: &Path, resume: Option<&Path>) -> CliResult<()> {
    let registry = examples_registry(cfg, examples)?;
    let vocab = load_vocab(vocab)?;
    let exs = load_examples(examples)?;
    for (i, ex) in exs.iter().enumerate() {
        ex.validate(vocab.len(), cfg.max_positions.max(cfg.max_seq_len), true)
            .with_context(|| format!("{}: example {}", examples.display(), i + 1))?;
        if ex.lang_ids.iter().chain(&ex.label_lang_ids).any(|l| l.index() >= registry.len()) {
            return Err(Failure::Data(anyhow!(
                "{}: example {} uses an unknown language id",
                examples.display(),
                i + 1
            )));
        }
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let (mut model, state) = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.lang_codes != registry.codes() {
                return Err(Failure::Data(anyhow!(
                    "{}: checkpoint languages {:?} differ from the examples' {:?}",
                    p.display(),
                    ck.lang_codes,
                    registry.codes()
                )));
            }
            let state =
                ck.state.ok_or_else(|| Failure::Data(anyhow!("{}: checkpoint has no optimiser state", p.display())))?;
            (ck.model, Some(state))
        }
        None => (Model::new(cfg.model(vocab.len(), registry.len()), cfg.seed)?, None),
    };
    let log_path = out_dir.join("train_log.csv");
    let log_file = if state.is_some() {
        fs::OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log_w = BufWriter::new(log_file);
    let tcfg = cfg.train();
    let report = train(
        &mut model,
        &exs,
        &tcfg,
        TrainOptions {
            log: Some(&mut log_w),
            checkpoint_dir: Some(out_dir.to_path_buf()),
            lang_codes: registry.codes().to_vec(),
            resume: state,
            stop_at: None,
        },
    )?;
    log_w.flush().with_context(|| format!("writing {}", log_path.display()))?;
    let final_path = out_dir.join("final.ckpt");
    save_checkpoint(&final_path, &model, registry.codes(), Some(&report.state))?;
    if let Some(last) = report.steps.last() {
        log::info!("step {} loss {:.4}; final checkpoint {}", last.step, last.loss, final_path.display());
    }
    Ok(())
}

fn eval_retrieval(
    cfg: &RunConfig,
    checkpoint: &Path,
    vocab: &Path,
    pairs: &Path,
    out: &Path,
    json: Option<&Path>,
) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint)?;
    let registry = LanguageRegistry::new(&ck.lang_codes)?;
    let vocab = load_vocab(vocab)?;
    let pairs = read_pairs_tsv(pairs, &registry)?;
    let report = layerwise_report(&ck.model, &pairs, &vocab, cfg.workers)?;
    write_file(out, report.to_csv().as_bytes())?;
    if let Some(p) = json {
        write_file(p, report.to_json()?.as_bytes())?;
    }
    log::info!("last4_avg {:.4} over {} pairs", report.last4_avg, report.pair_count);
    Ok(())
}

fn synth(cfg: &RunConfig, out_dir: &Path) -> CliResult<()> {
    let world = SynthWorld::generate(cfg.synth())?;
    let files = world.write_to_dir(out_dir, cfg.workers)?;
    log::info!(
        "manifest {}, pairs {}, {} dictionaries",
        files.manifest.display(),
        files.pairs.display(),
        files.dicts.len()
    );
    Ok(())
}

fn compare(cfg: &RunConfig, out_dir: &Path) -> CliResult<()> {
    let summary = run_compare(&cfg.compare())?;
    write_file(&out_dir.join("summary.csv"), summary.summary_csv().as_bytes())?;
    write_file(&out_dir.join("runs.csv"), summary.runs_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)?;
    write_file(&out_dir.join("compare.json"), json.as_bytes())?;
    print!("{}", summary.summary_csv());
    println!("random_baseline,{}", summary.random_baseline);
    Ok(())
}
