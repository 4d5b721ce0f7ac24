//! Adam, cosine learning-rate schedule, training and evaluation loops.
//!
//! A batch is a set of whole clips. Each clip gets its own tape, starts from
//! the zero stream state and contributes `loss / batch` to the accumulated
//! gradients, so the update equals that of the batch-mean loss while only one
//! tape is alive per worker.

use std::cell::Cell;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::geometry::ScreenGeometry;
use crate::loss::{clip_loss, BatchMetrics, LossWeights};
use crate::model::{Ablation, ModelConfig, StGaze};
use crate::params::{Gradients, ParamStore};
use crate::synth::{derive_seed, offset_augment, ClipSource, SequenceSample};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| p.tensor.map(|_| T::zero())).collect::<Vec<_>>();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
            config,
        }
    }
}

/// One Adam update from the accumulated gradients in `store`.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::invalid("optimizer state does not match the parameter store"));
    }
    if let Some(p) = store.iter().find(|p| p.trainable && !p.grad.all_finite()) {
        return Err(Error::numeric(format!("non-finite gradient in parameter `{}`", p.name)));
    }
    state.step += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
    let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
    let (lr, eps) = (T::lit(lr), T::lit(c.eps));
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        let grads = p.grad.data();
        let theta = p.tensor.data_mut();
        for (((th, &g), mi), vi) in theta.iter_mut().zip(grads).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + one_b1 * g;
            *vi = b2 * *vi + one_b2 * g * g;
            let m_hat = *mi * inv_bc1;
            let v_hat = *vi * inv_bc2;
            *th -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `base` at step 0 to 0 at `total`.
pub fn lr_at(step: u64, total: u64, base: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("total_steps must be ≥ 1"));
    }
    if step > total {
        return Err(Error::invalid(format!("step {step} beyond total {total}")));
    }
    Ok(0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate at the reference batch size of 6.
    pub base_lr: f64,
    pub weights: LossWeights,
    pub seq_len: usize,
    pub seed: u64,
    /// Per-clip label offset std in degrees; 0 disables augmentation.
    pub offset_std_deg: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
    /// Worker threads for per-clip forward/backward.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 6,
            base_lr: 1e-4,
            weights: LossWeights::default(),
            seq_len: 8,
            seed: 0,
            offset_std_deg: 3.0,
            clip_norm: Some(10.0),
            adam: AdamConfig::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// `base_lr · batch_size / 6`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 6.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be ≥ 1"));
        }
        if self.seq_len == 0 {
            return Err(Error::invalid("seq_len must be ≥ 1"));
        }
        if self.threads == 0 {
            return Err(Error::invalid("threads must be ≥ 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr must be positive"));
        }
        if !(self.offset_std_deg >= 0.0) {
            return Err(Error::invalid("offset_std_deg must be ≥ 0"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip_norm must be positive"));
            }
        }
        self.weights.validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_ang_deg: f64,
    pub val_ang_deg: Option<f64>,
    pub val_pog_cm: Option<f64>,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub steps: u64,
    pub first_batch_loss: f64,
    pub best_val_ang_deg: Option<f64>,
}

/// Where training writes its best checkpoint and where it reports epochs.
pub struct TrainSinks<'a> {
    pub checkpoint: Option<PathBuf>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

impl TrainSinks<'_> {
    pub fn none() -> Self {
        TrainSinks {
            checkpoint: None,
            on_epoch: None,
        }
    }
}

thread_local! {
    static AUGMENTED: Cell<u64> = const { Cell::new(0) };
}

/// Number of clips label-augmented on the current thread.
pub fn augmentation_count() -> u64 {
    AUGMENTED.with(Cell::get)
}

/// Per-clip result of one forward/backward pass.
struct ClipPass {
    grads: Gradients<f32>,
    loss: f64,
    ang_deg: f64,
}

fn clip_pass(
    model: &StGaze,
    store: &ParamStore<f32>,
    clip: &SequenceSample,
    weights: &LossWeights,
    geom: &ScreenGeometry,
    scale: f32,
) -> Result<ClipPass> {
    let mut g = Graph::new(store);
    let out = model.forward(&mut g, &clip.frames, None, false)?;
    let terms = clip_loss(&mut g, out.gaze_vectors, &clip.targets(), geom, weights)?;
    let loss = g.value(terms.total).data()[0] as f64;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("clip {}: loss is {loss}", clip.id)));
    }
    let ang = g.value(terms.angular).data();
    let ang_deg = ang.iter().map(|&a| a as f64).sum::<f64>() / ang.len() as f64;
    let root = g.scale(terms.total, scale);
    let grads = g.backward(root)?.params;
    Ok(ClipPass { grads, loss, ang_deg })
}

fn run_passes(
    model: &StGaze,
    store: &ParamStore<f32>,
    clips: &[SequenceSample],
    weights: &LossWeights,
    geom: &ScreenGeometry,
    threads: usize,
) -> Result<Vec<ClipPass>> {
    let scale = 1.0 / clips.len() as f32;
    if threads <= 1 || clips.len() <= 1 {
        return clips.iter().map(|c| clip_pass(model, store, c, weights, geom, scale)).collect();
    }
    let chunk = clips.len().div_ceil(threads);
    let results: Vec<Result<Vec<ClipPass>>> = std::thread::scope(|s| {
        let handles: Vec<_> = clips
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|c| clip_pass(model, store, c, weights, geom, scale))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(clips.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Mean loss and angular error of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub ang_deg: f64,
    pub grad_norm: f64,
}

/// Zero grads, accumulate per-clip gradients in clip order, clip, update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &StGaze,
    store: &mut ParamStore<f32>,
    adam: &mut AdamState<f32>,
    clips: &[SequenceSample],
    lr: f64,
    cfg: &TrainConfig,
    geom: &ScreenGeometry,
) -> Result<StepStats> {
    if clips.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    store.zero_grad();
    let passes = run_passes(model, store, clips, &cfg.weights, geom, cfg.threads)?;
    let n = passes.len() as f64;
    let (mut loss, mut ang) = (0.0, 0.0);
    for p in &passes {
        store.accumulate(&p.grads);
        loss += p.loss;
        ang += p.ang_deg;
    }
    let norm = store.grad_norm() as f64;
    if !norm.is_finite() {
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::numeric(format!("non-finite gradient in parameter `{}`", p.name)));
        }
    }
    if let Some(c) = cfg.clip_norm {
        if norm > c {
            let s = (c / norm) as f32;
            for p in store.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
    }
    adam_step(store, adam, lr)?;
    Ok(StepStats {
        loss: loss / n,
        ang_deg: ang / n,
        grad_norm: norm,
    })
}

/// Mean/std angular error and PoG errors of the model on every clip of `set`.
pub fn evaluate(model: &StGaze, store: &ParamStore<f32>, set: &dyn ClipSource, geom: &ScreenGeometry) -> Result<BatchMetrics> {
    let mut metrics = BatchMetrics::empty();
    for i in 0..set.len() {
        let clip = set.clip(i)?;
        let (preds, _) = model.predict(store, &clip.frames, None)?;
        metrics = metrics.merge(&BatchMetrics::evaluate(&preds, &clip.targets(), geom)?);
    }
    Ok(metrics)
}

/// Full training run. The best checkpoint by validation angular error (or the
/// last epoch without a validation set) is written to `sinks.checkpoint`.
/// A non-finite loss or gradient stops training with an error; the last
/// written checkpoint is left untouched.
pub fn train(
    cfg: &TrainConfig,
    model: &StGaze,
    store: &mut ParamStore<f32>,
    train_set: &dyn ClipSource,
    val_set: Option<&dyn ClipSource>,
    geom: &ScreenGeometry,
    mut sinks: TrainSinks<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train_set.seq_len() != cfg.seq_len {
        return Err(Error::invalid(format!(
            "dataset clips have {} frames, config expects {}",
            train_set.seq_len(),
            cfg.seq_len
        )));
    }
    let n = train_set.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total = (cfg.epochs * batches_per_epoch) as u64;
    let peak = cfg.peak_lr();
    let mut adam = AdamState::new(store, cfg.adam);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<f64> = None;
    let mut first_batch_loss = f64::NAN;
    let mut step = 0u64;
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1 + epoch as u64)));
        let (mut loss_sum, mut ang_sum, mut count) = (0.0, 0.0, 0usize);
        let mut epoch_lr = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut clips = Vec::with_capacity(idx.len());
            for (k, &i) in idx.iter().enumerate() {
                let clip = train_set.clip(i)?;
                let clip = if cfg.offset_std_deg > 0.0 {
                    let aug_seed = derive_seed(derive_seed(cfg.seed ^ 0xA5A5_5A5A, step), k as u64);
                    AUGMENTED.with(|c| c.set(c.get() + 1));
                    offset_augment(&clip, cfg.offset_std_deg, &mut ChaCha8Rng::seed_from_u64(aug_seed))
                } else {
                    clip
                };
                clips.push(clip);
            }
            let lr = lr_at(step, total, peak)?;
            if b == 0 {
                epoch_lr = lr;
            }
            let stats = train_step(model, store, &mut adam, &clips, lr, cfg, geom)?;
            if step == 0 {
                first_batch_loss = stats.loss;
            }
            loss_sum += stats.loss * clips.len() as f64;
            ang_sum += stats.ang_deg * clips.len() as f64;
            count += clips.len();
            step += 1;
        }
        let (val_ang, val_cm) = match val_set {
            Some(v) => {
                let m = evaluate(model, store, v, geom)?;
                (Some(m.mean_ang_deg), Some(m.mean_pog_cm))
            }
            None => (None, None),
        };
        let improved = match (val_ang, best) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = val_ang.or(best);
            if let Some(path) = &sinks.checkpoint {
                store.save(path)?;
            }
        }
        let rec = EpochRecord {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / count as f64,
            train_ang_deg: ang_sum / count as f64,
            val_ang_deg: val_ang,
            val_pog_cm: val_cm,
            wall_s: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = sinks.on_epoch.as_deref_mut() {
            f(&rec);
        }
        records.push(rec);
    }
    Ok(TrainReport {
        records,
        steps: step,
        first_batch_loss,
        best_val_ang_deg: best,
    })
}

/// Outcome of one ablation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub ablation: Ablation,
    pub seed: u64,
    pub parameters: usize,
    pub val_ang_deg: f64,
    pub val_pog_cm: f64,
}

/// Trains and evaluates every requested variant for every seed, in order.
pub fn run_ablations(
    base: &ModelConfig,
    ablations: &[Ablation],
    seeds: &[u64],
    cfg: &TrainConfig,
    train_set: &dyn ClipSource,
    val_set: &dyn ClipSource,
    geom: &ScreenGeometry,
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(ablations.len() * seeds.len());
    for &ablation in ablations {
        for &seed in seeds {
            let mut store = ParamStore::new();
            let model = StGaze::new(
                &mut store,
                &mut ChaCha8Rng::seed_from_u64(seed),
                ablation.apply(base.clone()),
            )?;
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            train(&run_cfg, &model, &mut store, train_set, None, geom, TrainSinks::none())?;
            let m = evaluate(&model, &store, val_set, geom)?;
            out.push(AblationResult {
                ablation,
                seed,
                parameters: store.num_scalars(),
                val_ang_deg: m.mean_ang_deg,
                val_pog_cm: m.mean_pog_cm,
            });
        }
    }
    Ok(out)
}
