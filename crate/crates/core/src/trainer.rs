//! AdamW training loop with linear warmup/decay, clipping and checkpoints.
//!
//! Batch `s` is drawn with the RNG stream `(seed, s)` and its dropout masks
//! with another stream keyed the same way, so a run resumed from a checkpoint
//! at step `k` replays steps `k+1..` exactly.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::examplegen::TrainingExample;
use crate::model::{save_checkpoint, Batch, Model, TrainState};
use crate::tensor::{Graph, Tensor};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 50,
            total_steps: 1000,
            batch_size: 32,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("warmup_steps", "must not exceed total_steps"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1", "betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::config("weight_decay", "weight_decay >= 0 and eps > 0 required"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let (s, w, t) = (step as f64, cfg.warmup_steps as f64, cfg.total_steps as f64);
    if step < cfg.warmup_steps {
        cfg.lr * s / w
    } else if step >= cfg.total_steps {
        0.0
    } else {
        cfg.lr * (t - s) / (t - w)
    }
}

impl TrainState {
    pub fn zeros(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction. Increments
/// `state.step` first, so the first call uses `t = 1`.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    names: &[String],
    decays: &[bool],
    state: &mut TrainState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    for (g, n) in grads.iter().zip(names) {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(n.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let wd = if decays[i] { cfg.weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((p, &g), m), v) in params[i].data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
            *p -= lr * (update + wd * *p);
        }
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Indices of the examples forming batch `step` (1-based).
pub fn batch_indices(cfg: &TrainConfig, n: usize, step: u64) -> Vec<usize> {
    let mut r = rng::stream(cfg.seed, &[rng::tag::BATCH, step]);
    let mut idx = index::sample(&mut r, n, cfg.batch_size.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Fraction of masked pieces in `examples` whose label language differs
/// from the sentence language.
pub fn xling_fraction(examples: &[&TrainingExample]) -> f64 {
    let (mut x, mut n) = (0u64, 0u64);
    for e in examples {
        n += e.label_lang_ids.len() as u64;
        x += e.label_lang_ids.iter().filter(|&&l| l != e.sentence_lang()).count() as u64;
    }
    crate::examplegen::ratio(x, n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub xling_frac: f64,
}

pub const LOG_HEADER: &str = "step,loss,lr,xling_frac";

impl StepLog {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.lr, self.xling_frac)
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives one CSV row per step, after [`LOG_HEADER`] when starting fresh.
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<PathBuf>,
    pub lang_codes: Vec<String>,
    /// Optimiser state to continue from.
    pub resume: Option<TrainState>,
    /// Stop after this global step even if `total_steps` is larger.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub state: TrainState,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:07}.ckpt"))
}

/// Trains `model` in place for steps `state.step + 1 ..= total_steps`.
pub fn train(
    model: &mut Model,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyInput("no training examples".into()));
    }
    let names = model.param_names().to_vec();
    let decays: Vec<bool> = (0..names.len()).map(|i| model.decays(i)).collect();
    let mut state = opts.resume.take().unwrap_or_else(|| TrainState::zeros(model.params()));
    if state.m.len() != names.len() {
        return Err(Error::Checkpoint("optimiser state does not match the model".into()));
    }
    if state.step == 0 {
        if let Some(w) = opts.log.as_mut() {
            writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io("<train log>", e))?;
        }
    }
    let last = opts.stop_at.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut report = TrainReport { steps: Vec::new(), state: state.clone(), checkpoints: Vec::new() };
    while state.step < last {
        let step = state.step + 1;
        let batch_ex: Vec<&TrainingExample> =
            batch_indices(cfg, examples.len(), step).into_iter().map(|i| &examples[i]).collect();
        let batch = Batch::from_examples(&batch_ex)?;
        let mut g = Graph::new();
        let mut drop_rng = rng::stream(cfg.seed, &[rng::tag::DROPOUT, step]);
        let dr = (model.config.dropout > 0.0).then_some(&mut drop_rng);
        let (loss, fwd) = model.mlm_loss(&mut g, &batch, dr)?;
        g.backward(loss).map_err(|e| match e {
            Error::NonFiniteGradient(node) => Error::NonFiniteGradient(format!("{node} at step {step}")),
            other => other,
        })?;
        let mut grads: Vec<Tensor> = fwd
            .params
            .iter()
            .zip(model.params())
            .map(|(v, p)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let loss_value = g.value(loss).item();
        drop(g);
        clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = lr_at(step, cfg);
        adamw_step(model.params_mut(), &grads, &names, &decays, &mut state, cfg, lr)?;
        let entry = StepLog { step, loss: loss_value, lr, xling_frac: xling_fraction(&batch_ex) };
        if let Some(w) = opts.log.as_mut() {
            writeln!(w, "{}", entry.csv()).map_err(|e| Error::io("<train log>", e))?;
        }
        log::debug!("step {step} loss {loss_value:.4}");
        report.steps.push(entry);
        if let Some(dir) = &opts.checkpoint_dir {
            let periodic = cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every);
            if periodic || step == last {
                let p = checkpoint_path(dir, step);
                save_checkpoint(&p, model, &opts.lang_codes, Some(&state))?;
                report.checkpoints.push(p);
            }
        }
    }
    report.state = state;
    Ok(report)
}
