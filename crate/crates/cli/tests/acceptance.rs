//! Acceptance criteria A1-A8. Each test prints one PASS/FAIL line to stderr
//! (bypassing output capture) and then asserts. Criteria run one at a time so
//! their runtime bounds are measured without contention.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use dictmlm_core::examplegen::TrainingExample;
use dictmlm_core::experiment::{CompareSummary, Variant};
use dictmlm_core::lang::LangId;
use dictmlm_core::model::{mlm_loss, Batch, Model, ModelConfig};
use dictmlm_core::tensor::{grad_check, Graph};
use dictmlm_core::tokenizer::{CLS, SEP};
use dictmlm_core::trainer::{train, TrainConfig, TrainOptions};
use serde_json::Value;

// Tolerances and bounds, pinned.
const A1_RATE_TOL: f64 = 0.005;
const A1_SPLIT_TOL: f64 = 0.005;
const A1_MIN_SENTENCES: usize = 100_000;
const A1_SECONDS: f64 = 120.0;
const A2_FULL_TOL: f64 = 0.01;
const A2_PARTIAL_TOL: f64 = 0.02;
const A2_SECONDS: f64 = 120.0;
const A3_MAX_REL: f64 = 1e-4;
// Near-uniform attention at init leaves q/k gradients around 1e-7, where a
// 1e-5 step loses digits to rounding; 1e-4 keeps truncation error smaller.
const A3_STEP: f64 = 1e-4;
const A3_SECONDS: f64 = 300.0;
const A4_INIT_TOL: f64 = 0.10;
const A4_MEMO_LOSS: f64 = 0.1;
const A4_MEMO_STEPS: u64 = 500;
const A4_SECONDS: f64 = 600.0;
const A5_MARGIN: f64 = 0.10;
const A5_SECONDS: f64 = 3600.0;
const A6_NOISE_TOL: f64 = 0.01;
const A6_SECONDS: f64 = 120.0;
const A8_SECONDS: f64 = 600.0;

static SERIAL: Mutex<()> = Mutex::new(());
static COMPARE: OnceLock<(CompareSummary, f64)> = OnceLock::new();

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: &str, name: &str, ok: bool, detail: &str) {
    let line = format!("{id} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(ok, "{line}");
}

fn dictmlm<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) {
    let out =
        Command::new(env!("CARGO_BIN_EXE_dictmlm")).args(args).env("RUST_LOG", "warn").output().expect("spawn dictmlm");
    assert!(
        out.status.success(),
        "dictmlm {args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Synthetic world plus vocabulary under `dir`, built through the CLI.
struct World {
    dir: PathBuf,
}

impl World {
    fn build(dir: &Path, sets: &[&str]) -> World {
        let mut args = vec!["synth", "--out-dir", p(dir)];
        for s in sets {
            args.extend(["--set", s]);
        }
        dictmlm(&args);
        let vocab = dir.join("vocab.txt");
        dictmlm(&["build-vocab", "--manifest", p(&dir.join("manifest.json")), "--out", p(&vocab)]);
        World { dir: dir.to_path_buf() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn merge(&self, dicts: &[&str], out: &str) -> PathBuf {
        let out = self.path(out);
        let mut args = vec!["merge-dicts".to_string()];
        for d in dicts {
            args.push("--dict".into());
            args.push(self.path(&format!("dicts/{d}")).to_str().unwrap().into());
        }
        args.extend(["--out".into(), out.to_str().unwrap().into()]);
        dictmlm(&args);
        out
    }

    fn gen(&self, lexicon: &Path, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let (manifest, vocab) = (self.path("manifest.json"), self.path("vocab.txt"));
        let mut args = vec![
            "gen-data",
            "--manifest",
            p(&manifest),
            "--lexicon",
            p(lexicon),
            "--vocab",
            p(&vocab),
            "--out",
            p(&out),
        ];
        args.extend_from_slice(extra);
        dictmlm(&args);
        out
    }

    fn stats(&self, examples: &Path) -> Value {
        let out = examples.with_extension("stats.json");
        dictmlm(&["stats", "--examples", p(examples), "--vocab", p(&self.path("vocab.txt")), "--out", p(&out)]);
        read_json(&out)
    }
}

#[test]
fn a1_masking_rate_and_corruption_split() {
    let _g = serial();
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    // Sentences of at least 8 words keep the one-word minimum from inflating the rate.
    let w = World::build(
        tmp.path(),
        &["synth_sentences=50000", "synth_min_len=8", "synth_max_len=20", "synth_eval_pairs=10", "vocab_size=300"],
    );
    let lex = w.merge(&["aa-bb.txt"], "lex.jsonl");
    let ex = w.gen(&lex, "a1.jsonl", &["--set", "duplication=1", "--seed", "11"]);
    let s = w.stats(&ex);
    let n = s["examples"].as_u64().unwrap() as usize;
    let rate = s["mask_rate"].as_f64().unwrap();
    let c = &s["corruption"];
    let (m, k, r) = (c["mask"].as_f64().unwrap(), c["keep"].as_f64().unwrap(), c["random"].as_f64().unwrap());
    let secs = start.elapsed().as_secs_f64();
    let ok = n >= A1_MIN_SENTENCES
        && (rate - 0.15).abs() <= A1_RATE_TOL
        && (m - 0.8).abs() <= A1_SPLIT_TOL
        && (k - 0.1).abs() <= A1_SPLIT_TOL
        && (r - 0.1).abs() <= A1_SPLIT_TOL
        && secs < A1_SECONDS;
    report(
        "A1",
        "masking rate",
        ok,
        &format!("{n} sentences, word rate {rate:.4}, split ({m:.4}, {k:.4}, {r:.4}), {secs:.0}s"),
    );
}

/// Share of corpus word tokens whose surface appears in the given MUSE files.
fn coverage_oracle(corpus_files: &[PathBuf], dicts: &[PathBuf]) -> f64 {
    let mut known = HashSet::new();
    for d in dicts {
        for line in std::fs::read_to_string(d).unwrap().lines() {
            known.extend(line.split_whitespace().map(str::to_string));
        }
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for f in corpus_files {
        for w in std::fs::read_to_string(f).unwrap().split_whitespace() {
            total += 1;
            hit += known.contains(w) as usize;
        }
    }
    hit as f64 / total as f64
}

#[test]
fn a2_cross_lingual_label_fractions() {
    let _g = serial();
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let full = World::build(&tmp.path().join("full"), &["synth_sentences=4000", "synth_eval_pairs=10"]);
    let lex = full.merge(&["aa-bb.txt"], "lex.jsonl");
    let mut lines = Vec::new();
    let mut ok = true;
    for t in [0.5, 0.7, 0.9] {
        let ex = full.gen(&lex, &format!("t{t}.jsonl"), &["--set", &format!("t={t}")]);
        let x = full.stats(&ex)["xling_frac"].as_f64().unwrap();
        ok &= (x - t).abs() <= A2_FULL_TOL;
        lines.push(format!("c=1 t={t}: {x:.4}"));
    }
    // Partial coverage: a third language that no dictionary mentions.
    let part = World::build(
        &tmp.path().join("part"),
        &["synth_sentences=3000", "synth_eval_pairs=10", "synth_languages=[\"aa\",\"bb\",\"cc\"]"],
    );
    let lex = part.merge(&["aa-bb.txt"], "lex.jsonl");
    let corpus: Vec<PathBuf> = ["aa", "bb", "cc"].iter().map(|l| part.path(&format!("corpus/{l}.txt"))).collect();
    let c = coverage_oracle(&corpus, &[part.path("dicts/aa-bb.txt")]);
    for t in [0.5, 0.9] {
        let ex = part.gen(&lex, &format!("t{t}.jsonl"), &["--set", &format!("t={t}")]);
        let x = part.stats(&ex)["xling_frac"].as_f64().unwrap();
        ok &= (x - t * c).abs() <= A2_PARTIAL_TOL;
        lines.push(format!("c={c:.3} t={t}: {x:.4} vs {:.4}", t * c));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < A2_SECONDS;
    report("A2", "label fractions", ok, &format!("{}; {secs:.0}s", lines.join(", ")));
}

fn example(tokens: &[u32], masked: &[u32], labels: &[u32], lang: u16, label_lang: u16) -> TrainingExample {
    let n = tokens.len();
    let mut lang_ids = vec![LangId(lang); n];
    for &m in masked {
        lang_ids[m as usize] = LangId(label_lang);
    }
    TrainingExample {
        token_ids: tokens.to_vec(),
        lang_ids,
        segment_ids: vec![0; n],
        masked_positions: masked.to_vec(),
        label_ids: labels.to_vec(),
        label_lang_ids: vec![LangId(label_lang); masked.len()],
    }
}

#[test]
fn a3_full_model_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 200,
        hidden: 16,
        layers: 2,
        heads: 2,
        ffn_dim: 32,
        lang_count: 2,
        lang_emb_dim: 16,
        max_positions: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 3).unwrap();
    let a = example(&[CLS, 17, 40, 123, 9, SEP], &[2, 4], &[41, 150], 0, 1);
    let b = example(&[CLS, 88, 199, SEP], &[1], &[7], 1, 1);
    let batch = Batch::from_examples(&[&a, &b]).unwrap();
    let r = grad_check(
        |g, vars| {
            let f = model.forward_on(g, vars, &batch, None)?;
            mlm_loss(g, f.logits.unwrap(), &batch.label_ids)
        },
        model.params(),
        A3_STEP,
        0,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = r.max_rel_error < A3_MAX_REL && secs < A3_SECONDS;
    report(
        "A3",
        "gradient check",
        ok,
        &format!("max rel error {:.2e} over {} elements, {secs:.0}s", r.max_rel_error, r.checked),
    );
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn a4_training_sanity() {
    let _g = serial();
    let start = Instant::now();
    // (a) initial loss at the desk config
    let desk = ModelConfig { dropout: 0.0, ..ModelConfig::default() };
    let v = desk.vocab_size as f64;
    let model = Model::new(desk.clone(), 5).unwrap();
    let exs: Vec<TrainingExample> = (0..16u32)
        .map(|i| {
            let toks: Vec<u32> = std::iter::once(CLS)
                .chain((0..20).map(|j| 5 + (i * 131 + j * 37) % 4000))
                .chain(std::iter::once(SEP))
                .collect();
            example(&toks, &[3, 9, 15], &[100 + i, 2000 + i, 3000 + i], (i % 2) as u16, (i % 2) as u16)
        })
        .collect();
    let batch = Batch::from_examples(&exs.iter().collect::<Vec<_>>()).unwrap();
    let mut g = Graph::new();
    let (loss, _) = model.mlm_loss(&mut g, &batch, None).unwrap();
    let init = g.value(loss).item();
    let ok_a = (init - v.ln()).abs() <= A4_INIT_TOL * v.ln();

    // (b) memorise one sentence at the desk config
    let one = example(&[CLS, 12, 57, 300, 41, 9, 77, SEP], &[2, 5], &[57, 9], 0, 0);
    let copies = vec![one; 8];
    let mut model = Model::new(ModelConfig::default(), 6).unwrap();
    let cfg = TrainConfig { total_steps: A4_MEMO_STEPS, batch_size: 8, ..TrainConfig::default() };
    let rep = train(&mut model, &copies, &cfg, TrainOptions::default()).unwrap();
    let memo = rep.steps.last().unwrap().loss;
    let ok_b = memo < A4_MEMO_LOSS && rep.steps.iter().all(|s| s.loss.is_finite());

    // (c) toy corpus through the CLI
    let tmp = tempfile::tempdir().unwrap();
    let w = World::build(
        tmp.path(),
        &["synth_sentences=500", "synth_lemma_count=60", "synth_eval_pairs=10", "vocab_size=200"],
    );
    let lex = w.merge(&["aa-bb.txt"], "lex.jsonl");
    let ex = w.gen(&lex, "toy.jsonl", &["--set", "duplication=2", "--set", "max_seq_len=24"]);
    let out = tmp.path().join("run");
    dictmlm(&[
        "train",
        "--examples",
        p(&ex),
        "--vocab",
        p(&w.path("vocab.txt")),
        "--out-dir",
        p(&out),
        "--set",
        "total_steps=400",
        "--set",
        "hidden=32",
        "--set",
        "layers=2",
        "--set",
        "ffn_dim=64",
        "--set",
        "batch_size=16",
    ]);
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let (lead, trail) = (median(&losses[..100]), median(&losses[losses.len() - 100..]));
    let ok_c = trail < lead;

    let secs = start.elapsed().as_secs_f64();
    report(
        "A4",
        "training sanity",
        ok_a && ok_b && ok_c && secs < A4_SECONDS,
        &format!(
            "(a) init {init:.3} vs ln V {:.3}; (b) memorised loss {memo:.4}; (c) median {lead:.3} -> {trail:.3}; {secs:.0}s",
            v.ln()
        ),
    );
}

/// Paired DICT-MLM / vanilla / no-conditioning runs at the compare defaults,
/// shared by A5 and A7.
fn compare_runs() -> &'static (CompareSummary, f64) {
    COMPARE.get_or_init(|| {
        let start = Instant::now();
        let tmp = tempfile::tempdir().unwrap();
        dictmlm(&["compare", "--out-dir", p(tmp.path()), "--set", "compare_no_conditioning=true"]);
        let summary: CompareSummary = serde_json::from_value(read_json(&tmp.path().join("compare.json"))).unwrap();
        (summary, start.elapsed().as_secs_f64())
    })
}

#[test]
fn a5_dict_mlm_beats_vanilla_retrieval() {
    let _g = serial();
    let (s, secs) = compare_runs();
    let base = s.random_baseline;
    let mut ok = *secs < A5_SECONDS;
    let mut parts = Vec::new();
    let seeds: Vec<u64> = s.runs.iter().filter(|r| r.variant == Variant::DictMlm).map(|r| r.seed).collect();
    ok &= seeds.len() == 3;
    for seed in seeds {
        let d = s.run(Variant::DictMlm, seed).unwrap().report.last4_avg;
        let v = s.run(Variant::VanillaMlm, seed).unwrap().report.last4_avg;
        ok &= d - v >= A5_MARGIN && d > base && v > base;
        parts.push(format!("seed {seed}: {d:.3} vs {v:.3}"));
    }
    report("A5", "cross-linguality", ok, &format!("{}; baseline {base:.3}; {secs:.0}s", parts.join(", ")));
}

#[test]
fn a7_conditioning_toggle() {
    let _g = serial();
    // exact invariance with the head ablated
    let cfg = ModelConfig {
        vocab_size: 60,
        hidden: 16,
        layers: 2,
        heads: 2,
        ffn_dim: 32,
        lang_count: 3,
        lang_emb_dim: 8,
        max_positions: 16,
        dropout: 0.0,
        conditioning_enabled: false,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg.clone(), 2).unwrap();
    let a = example(&[CLS, 11, 12, 13, 14, SEP], &[1, 3], &[20, 30], 0, 0);
    let b = example(&[CLS, 21, 22, SEP], &[2], &[40], 1, 1);
    let base = Batch::from_examples(&[&a, &b]).unwrap();
    let logits = |m: &Model, batch: &Batch| {
        let mut g = Graph::new();
        let f = m.forward(&mut g, batch, None).unwrap();
        g.value(f.logits.unwrap()).data().to_vec()
    };
    let reference = logits(&model, &base);
    let mut invariant = true;
    for shift in 1..3 {
        let mut other = base.clone();
        other.label_langs.iter_mut().for_each(|l| *l = (*l + shift) % 3);
        invariant &= logits(&model, &other) == reference;
    }
    // the conditioned head does react, so the check has teeth
    let conditioned = Model::new(ModelConfig { conditioning_enabled: true, ..cfg }, 2).unwrap();
    let mut other = base.clone();
    other.label_langs.iter_mut().for_each(|l| *l = (*l + 1) % 3);
    let reacts = logits(&conditioned, &other) != logits(&conditioned, &base);

    let (s, secs) = compare_runs();
    let mut parts = Vec::new();
    let mut reported = true;
    for r in s.runs.iter().filter(|r| r.variant == Variant::DictMlmNoConditioning) {
        let with = s.run(Variant::DictMlm, r.seed).unwrap().report.last4_avg;
        reported &= (0.0..=1.0).contains(&r.report.last4_avg);
        parts.push(format!("seed {}: cond {with:.3} / no-cond {:.3}", r.seed, r.report.last4_avg));
    }
    reported &= parts.len() == 3;
    report(
        "A7",
        "conditioning toggle",
        invariant && reacts && reported && *secs < A5_SECONDS,
        &format!("logits invariant {invariant}, conditioned head reacts {reacts}; {}", parts.join(", ")),
    );
}

#[test]
fn a6_zero_t_matches_vanilla() {
    let _g = serial();
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let w = World::build(tmp.path(), &["synth_sentences=3000", "synth_eval_pairs=10"]);
    let lex = w.merge(&["aa-bb.txt"], "lex.jsonl");
    let zero = w.gen(&lex, "zero.jsonl", &["--set", "t=0", "--seed", "7"]);
    let van = w.gen(&lex, "vanilla.jsonl", &["--set", "mode=\"vanilla_mlm\"", "--seed", "7"]);
    let van8 = w.gen(&lex, "vanilla8.jsonl", &["--set", "mode=\"vanilla_mlm\"", "--seed", "8"]);
    let bitwise = bytes(&zero) == bytes(&van);
    let (sz, sv, s8) = (w.stats(&zero), w.stats(&van), w.stats(&van8));
    let same_stats = sz == sv;
    let f = |s: &Value, k: &str| s[k].as_f64().unwrap();
    let g = |s: &Value, k: &str| s["corruption"][k].as_f64().unwrap();
    let noise = [
        (f(&sz, "mask_rate") - f(&s8, "mask_rate")).abs(),
        (g(&sz, "mask") - g(&s8, "mask")).abs(),
        (g(&sz, "keep") - g(&s8, "keep")).abs(),
        (g(&sz, "random") - g(&s8, "random")).abs(),
    ];
    let close = noise.iter().all(|&d| d <= A6_NOISE_TOL) && f(&sz, "xling_frac") == 0.0 && f(&s8, "xling_frac") == 0.0;
    let secs = start.elapsed().as_secs_f64();
    report(
        "A6",
        "reduction to vanilla",
        bitwise && same_stats && close && secs < A6_SECONDS,
        &format!(
            "bitwise {bitwise}, stats equal {same_stats}, cross-seed max diff {:.4}; {secs:.0}s",
            noise.iter().cloned().fold(0.0, f64::max)
        ),
    );
}

#[test]
fn a8_determinism() {
    let _g = serial();
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let w = World::build(
        tmp.path(),
        &["synth_sentences=600", "synth_lemma_count=60", "synth_eval_pairs=40", "vocab_size=200"],
    );
    let lex = w.merge(&["aa-bb.txt"], "lex.jsonl");
    let g1 = w.gen(&lex, "w1.jsonl", &["--workers", "1", "--set", "max_seq_len=24"]);
    let g4 = w.gen(&lex, "w4.jsonl", &["--workers", "4", "--set", "max_seq_len=24"]);
    let gen_same = bytes(&g1) == bytes(&g4)
        && bytes(&PathBuf::from(format!("{}.meta.json", g1.display())))
            == bytes(&PathBuf::from(format!("{}.meta.json", g4.display())));

    let small = [
        "--set",
        "hidden=16",
        "--set",
        "layers=2",
        "--set",
        "heads=2",
        "--set",
        "ffn_dim=32",
        "--set",
        "batch_size=8",
        "--set",
        "total_steps=30",
        "--set",
        "warmup_steps=5",
        "--set",
        "checkpoint_every=15",
    ];
    let run = |name: &str, resume: Option<&Path>| -> PathBuf {
        let out = tmp.path().join(name);
        let vocab = w.path("vocab.txt");
        let mut args = vec!["train", "--examples", p(&g1), "--vocab", p(&vocab), "--out-dir", p(&out)];
        if let Some(ck) = resume {
            args.extend(["--resume", p(ck)]);
        }
        args.extend_from_slice(&small);
        dictmlm(&args);
        out
    };
    let a = run("a", None);
    let b = run("b", None);
    let train_same = bytes(&a.join("final.ckpt")) == bytes(&b.join("final.ckpt"))
        && bytes(&a.join("train_log.csv")) == bytes(&b.join("train_log.csv"));
    let c = run("c", Some(&a.join("step_0000015.ckpt")));
    let resume_same = bytes(&a.join("final.ckpt")) == bytes(&c.join("final.ckpt"));

    let eval = |workers: &str| -> (Vec<u8>, Vec<u8>) {
        let csv = tmp.path().join(format!("ret{workers}.csv"));
        let json = tmp.path().join(format!("ret{workers}.json"));
        dictmlm(&[
            "eval-retrieval",
            "--checkpoint",
            p(&a.join("final.ckpt")),
            "--vocab",
            p(&w.path("vocab.txt")),
            "--pairs",
            p(&w.path("pairs_aa_bb.tsv")),
            "--out",
            p(&csv),
            "--json",
            p(&json),
            "--workers",
            workers,
        ]);
        (bytes(&csv), bytes(&json))
    };
    let eval_same = eval("1") == eval("4");
    let secs = start.elapsed().as_secs_f64();
    report(
        "A8",
        "determinism",
        gen_same && train_same && resume_same && eval_same && secs < A8_SECONDS,
        &format!(
            "gen-data workers 1=4 {gen_same}, train repeat {train_same}, resume {resume_same}, eval-retrieval workers 1=4 {eval_same}; {secs:.0}s"
        ),
    );
}
