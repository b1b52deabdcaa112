//! Training loop: corpus ingestion, AdamW with warmup+cosine schedule,
//! gradient clipping, early stopping, and checkpointing.
//!
//! The topographic/baseline switch is the `spatial` argument of [`fit`]:
//! `None`, or a config where every alpha is zero, runs the plain next-token
//! baseline with no capture and no spatial code on the hot path at all.

use crate::autodiff::{Scalar, Tape};
use crate::checkpoint::{self, CheckpointError};
use crate::model::{ModelError, ParamSet, TopoTransformer};
use crate::seeds::derive_seed;
use crate::spatial_loss::{
    combined_loss, layer_spatial_loss, LossBreakdown, SpatialLossConfig, SpatialLossError,
};
use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spatial(#[from] SpatialLossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at step {step}; task {task:.4}, per-hook spatial {per_hook:?}")]
    NonFiniteLoss { step: u64, task: f64, per_hook: Vec<(String, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Linear warmup length; defaults to 2% of total_steps when absent.
    pub warmup_steps: Option<u64>,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_batches: usize,
    pub early_stop_patience: u32,
    /// Early stopping watches the validation task loss; set this to add the
    /// latest training batch's weighted spatial term to the monitored value.
    pub monitor_combined: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr_max: 6e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            grad_clip: 1.0,
            warmup_steps: None,
            total_steps: 2000,
            eval_interval: 200,
            eval_batches: 8,
            early_stop_patience: 3,
            monitor_combined: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or_else(|| (self.total_steps / 50).max(1))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.total_steps == 0 || self.eval_interval == 0 || self.eval_batches == 0 {
            return bad("batch_size, total_steps, eval_interval, eval_batches must be positive");
        }
        if !(self.lr_max > 0.0) {
            return bad("lr_max must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return bad("weight_decay must be >= 0 and grad_clip > 0");
        }
        if self.warmup() >= self.total_steps {
            return bad("warmup_steps must be smaller than total_steps");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerKind {
    /// Raw bytes, vocab 256. Undecodable UTF-8 is kept verbatim.
    ByteLevel,
    /// Pre-tokenized streams with an externally defined vocabulary.
    External { vocab_size: usize },
}

impl TokenizerKind {
    pub fn vocab_size(&self) -> usize {
        match self {
            TokenizerKind::ByteLevel => 256,
            TokenizerKind::External { vocab_size } => *vocab_size,
        }
    }
}

/// Tokenized text with a deterministic contiguous train/validation split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub tokenizer: TokenizerKind,
}

impl Corpus {
    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    pub fn from_tokens(train: Vec<u32>, val: Vec<u32>, tokenizer: TokenizerKind) -> Result<Self, TrainError> {
        if train.is_empty() || val.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let vocab = tokenizer.vocab_size() as u32;
        if train.iter().chain(val.iter()).any(|&t| t >= vocab) {
            return Err(TrainError::InvalidConfig(format!("token id >= vocab size {vocab}")));
        }
        Ok(Corpus { train, val, tokenizer })
    }

    /// Byte-level tokenization of `text`, split at `floor(split_fraction * len)`.
    pub fn from_bytes(bytes: &[u8], split_fraction: f64) -> Result<Self, TrainError> {
        if bytes.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        if !(0.0 < split_fraction && split_fraction < 1.0) {
            return Err(TrainError::InvalidConfig("split_fraction must lie in (0, 1)".into()));
        }
        let cut = (bytes.len() as f64 * split_fraction).floor() as usize;
        if cut == 0 || cut == bytes.len() {
            return Err(TrainError::EmptyCorpus);
        }
        let tokens: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        Ok(Corpus {
            train: tokens[..cut].to_vec(),
            val: tokens[cut..].to_vec(),
            tokenizer: TokenizerKind::ByteLevel,
        })
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.tokenizer).as_bytes());
        for part in [&self.train, &self.val] {
            h.update((part.len() as u64).to_le_bytes());
            for &t in part.iter() {
                h.update(t.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Concatenate text files in order and split byte-level into train/validation.
pub fn ingest(paths: &[PathBuf], split_fraction: f64) -> Result<Corpus, TrainError> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(std::fs::read(p)?);
    }
    Corpus::from_bytes(&bytes, split_fraction)
}

/// Warmup then cosine: linear 0 -> lr_max over the warmup, cosine decay to
/// lr_max/10 at total_steps, constant floor afterwards.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    let warmup = config.warmup();
    let lr_min = config.lr_max / 10.0;
    if step < warmup {
        return config.lr_max * step as f64 / warmup as f64;
    }
    if step >= config.total_steps {
        return lr_min;
    }
    let progress = (step - warmup) as f64 / (config.total_steps - warmup) as f64;
    lr_min + 0.5 * (config.lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First/second moment accumulators, index-aligned with the model's params.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<ArrayD<f32>> = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        AdamWState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW update with decoupled weight decay. `step` is 1-based for the
/// bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    value: &mut ArrayD<T>,
    grad: &ArrayD<T>,
    m: &mut ArrayD<T>,
    v: &mut ArrayD<T>,
    step: u64,
    lr: T,
    beta1: T,
    beta2: T,
    weight_decay: T,
) {
    let eps = T::cast(ADAM_EPS);
    let bc1 = T::one() - beta1.powi(step as i32);
    let bc2 = T::one() - beta2.powi(step as i32);
    ndarray::Zip::from(value)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, mi, vi| {
            *mi = beta1 * *mi + (T::one() - beta1) * g;
            *vi = beta2 * *vi + (T::one() - beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p = *p - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
        });
}

/// Scale gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [ArrayD<f32>], max_norm: f64) -> f64 {
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Draw `batch_size` random contiguous windows and their shift-by-one targets.
pub fn sample_batch<R: Rng>(
    stream: &[u32],
    batch_size: usize,
    block_size: usize,
    rng: &mut R,
) -> (Array2<usize>, Array2<usize>) {
    assert!(stream.len() > block_size, "stream shorter than one window");
    let max_start = stream.len() - block_size - 1;
    let mut inputs = Array2::zeros((batch_size, block_size));
    let mut targets = Array2::zeros((batch_size, block_size));
    for b in 0..batch_size {
        let start = rng.random_range(0..=max_start);
        for t in 0..block_size {
            inputs[[b, t]] = stream[start + t] as usize;
            targets[[b, t]] = stream[start + t + 1] as usize;
        }
    }
    (inputs, targets)
}

/// One optimization step: forward (capture only when the spatial path is
/// live), combined loss, backward, global-norm clip, AdamW update.
pub fn train_step<R: Rng>(
    model: &mut TopoTransformer,
    inputs: &Array2<usize>,
    targets: &Array2<usize>,
    spatial: Option<&SpatialLossConfig>,
    opt: &mut AdamWState,
    config: &TrainConfig,
    neighborhood_rng: &mut R,
) -> Result<LossBreakdown, TrainError> {
    let live_spatial = spatial.filter(|s| !s.is_inert(&model.hooks()));
    let tape = Tape::new();
    let pass = model.forward(&tape, inputs, live_spatial.is_some())?;
    let target_ids: Vec<usize> = targets.iter().copied().collect();
    let task = pass.logits.softmax_cross_entropy(&target_ids, None);

    let (total, breakdown) = match live_spatial {
        None => (task, LossBreakdown::task_only(task.scalar_value() as f64)),
        Some(spatial_config) => {
            let (b, t) = inputs.dim();
            let c = model.config().d_model;
            let hooks = pass.hooks.as_ref().expect("capture was requested");
            let mut layer_losses = Vec::with_capacity(hooks.len());
            for (hook, acts) in hooks.iter() {
                let flat = acts.reshape(&[b * t, c]);
                let layout = model.layout(hook)?;
                let sl = layer_spatial_loss(flat, layout, spatial_config, neighborhood_rng)?;
                layer_losses.push((hook, sl));
            }
            combined_loss(task, &layer_losses, spatial_config)
        }
    };

    if !breakdown.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step: opt.step,
            task: breakdown.task_loss,
            per_hook: breakdown.per_hook.iter().map(|(h, v)| (h.to_string(), *v)).collect(),
        });
    }

    tape.backward(total);
    let mut grads: Vec<ArrayD<f32>> = pass
        .bound_params
        .iter()
        .zip(model.params().iter())
        .map(|(t, p)| t.grad().unwrap_or_else(|| ArrayD::zeros(p.value.raw_dim())))
        .collect();
    clip_global_norm(&mut grads, config.grad_clip);

    let step = opt.step + 1;
    let lr = lr_schedule(step, config) as f32;
    let (beta1, beta2) = (config.beta1 as f32, config.beta2 as f32);
    for (i, param) in model.params_mut().iter_mut().enumerate() {
        let wd = if param.decay { config.weight_decay as f32 } else { 0.0 };
        adamw_update(&mut param.value, &grads[i], &mut opt.m[i], &mut opt.v[i], step, lr, beta1, beta2, wd);
    }
    opt.step = step;
    Ok(breakdown)
}

/// Mean validation task loss over a fixed, seed-derived set of windows, so
/// successive evaluations are comparable.
pub fn eval_task_loss(model: &TopoTransformer, corpus: &Corpus, config: &TrainConfig) -> Result<f64, TrainError> {
    let block = model.config().block_size.min(corpus.val.len() - 1);
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, "eval-windows"));
    let mut total = 0.0;
    for _ in 0..config.eval_batches {
        let (inputs, targets) = sample_batch(&corpus.val, config.batch_size, block, &mut rng);
        let tape = Tape::new();
        let pass = model.forward(&tape, &inputs, false)?;
        let target_ids: Vec<usize> = targets.iter().copied().collect();
        total += pass.logits.softmax_cross_entropy(&target_ids, None).scalar_value() as f64;
    }
    Ok(total / config.eval_batches as f64)
}

/// Early-stopping rule: stop after `patience` consecutive increases of the
/// monitored loss, keeping the state snapshotted before the first increase.
#[derive(Debug)]
pub struct EarlyStopper {
    patience: u32,
    streak: u32,
    prev: Option<f64>,
}

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
pub enum StopDecision {
    /// Loss did not increase: snapshot this state, keep going.
    SnapshotAndContinue,
    /// Loss increased but patience not exhausted.
    Continue,
    /// Patience exhausted: restore the last snapshot and stop.
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: u32) -> Self {
        EarlyStopper { patience, streak: 0, prev: None }
    }

    pub fn observe(&mut self, val: f64) -> StopDecision {
        let decision = match self.prev {
            None => StopDecision::SnapshotAndContinue,
            Some(prev) if val > prev => {
                self.streak += 1;
                if self.patience > 0 && self.streak >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            Some(_) => {
                self.streak = 0;
                StopDecision::SnapshotAndContinue
            }
        };
        self.prev = Some(val);
        decision
    }
}

#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub breakdown: LossBreakdown,
}

#[derive(Debug)]
pub struct FitReport {
    pub checkpoint_path: PathBuf,
    pub loss_csv_path: PathBuf,
    pub steps_completed: u64,
    pub early_stopped: bool,
    pub evaluations: Vec<(u64, f64)>,
    pub logs: Vec<StepLog>,
}

struct Snapshot {
    params: ParamSet,
    opt: AdamWState,
    step: u64,
}

/// Full training run. Writes `loss.csv` and `model.ckpt` under `out_dir` and
/// returns the per-step log.
pub fn fit(
    model: &mut TopoTransformer,
    corpus: &Corpus,
    config: &TrainConfig,
    spatial: Option<&SpatialLossConfig>,
    out_dir: &Path,
) -> Result<FitReport, TrainError> {
    config.validate()?;
    if let Some(s) = spatial {
        s.validate().map_err(TrainError::InvalidConfig)?;
    }
    if corpus.vocab_size() != model.config().vocab_size {
        return Err(TrainError::InvalidConfig(format!(
            "corpus vocab {} != model vocab {}",
            corpus.vocab_size(),
            model.config().vocab_size
        )));
    }
    let block = model.config().block_size;
    if corpus.train.len() <= block || corpus.val.len() <= block {
        return Err(TrainError::InvalidConfig(
            "corpus splits must exceed one block".into(),
        ));
    }

    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("loss.csv");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    let hook_names: Vec<String> = model.hooks().iter().map(|h| format!("sl_{h}")).collect();
    writeln!(csv, "step,lr,task_loss,spatial_sum,weighted_spatial_sum,{}", hook_names.join(","))?;

    let mut opt = AdamWState::new(model.params());
    let mut batch_rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, "batch-windows"));
    let mut neigh_rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, "neighborhoods"));
    let mut stopper = EarlyStopper::new(config.early_stop_patience);
    let mut snapshot: Option<Snapshot> = None;
    let mut evaluations = Vec::new();
    let mut logs = Vec::with_capacity(config.total_steps as usize);
    let mut early_stopped = false;

    for s in 0..config.total_steps {
        let (inputs, targets) = sample_batch(&corpus.train, config.batch_size, block, &mut batch_rng);
        let breakdown = train_step(model, &inputs, &targets, spatial, &mut opt, config, &mut neigh_rng)?;
        let step = s + 1;
        let lr = lr_schedule(step, config);
        let per_hook: Vec<String> = model
            .hooks()
            .iter()
            .map(|h| {
                breakdown
                    .per_hook
                    .iter()
                    .find(|(hook, _)| hook == h)
                    .map_or("0".to_string(), |(_, v)| format!("{v:.9}"))
            })
            .collect();
        writeln!(
            csv,
            "{step},{lr:.9e},{:.9},{:.9},{:.9},{}",
            breakdown.task_loss,
            breakdown.spatial_sum,
            breakdown.weighted_spatial_sum,
            per_hook.join(",")
        )?;
        logs.push(StepLog { step, lr, breakdown: breakdown.clone() });

        if step % config.eval_interval == 0 || step == config.total_steps {
            let mut monitored = eval_task_loss(model, corpus, config)?;
            if config.monitor_combined {
                monitored += breakdown.weighted_spatial_sum;
            }
            evaluations.push((step, monitored));
            match stopper.observe(monitored) {
                StopDecision::SnapshotAndContinue => {
                    snapshot = Some(Snapshot { params: model.params().clone(), opt: opt.clone(), step });
                }
                StopDecision::Continue => {}
                StopDecision::Stop => {
                    early_stopped = true;
                    break;
                }
            }
        }
    }

    let mut final_step = opt.step;
    if early_stopped {
        let snap = snapshot.expect("stop implies an earlier snapshot");
        *model.params_mut() = snap.params;
        opt = snap.opt;
        final_step = snap.step;
    }
    csv.flush()?;

    let ckpt_path = out_dir.join("model.ckpt");
    checkpoint::save(&ckpt_path, model, Some(&opt), final_step, spatial)?;
    Ok(FitReport {
        checkpoint_path: ckpt_path,
        loss_csv_path: csv_path,
        steps_completed: final_step,
        early_stopped,
        evaluations,
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;

    #[test]
    fn byte_ingestion_examples() {
        let c = Corpus::from_bytes(b"abcabcabca", 0.7).unwrap();
        assert_eq!(c.train[..3], [97, 98, 99]);
        assert_eq!(c.train.len(), 7);
        assert_eq!(c.val.len(), 3);

        let big = vec![7u8; 1000];
        let c = Corpus::from_bytes(&big, 0.9).unwrap();
        assert_eq!((c.train.len(), c.val.len()), (900, 100));

        assert!(matches!(Corpus::from_bytes(b"", 0.9), Err(TrainError::EmptyCorpus)));
    }

    #[test]
    fn corpus_digest_is_content_determined() {
        let a = Corpus::from_bytes(b"hello world, hello grid", 0.8).unwrap();
        let b = Corpus::from_bytes(b"hello world, hello grid", 0.8).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = Corpus::from_bytes(b"hello world, hello grld", 0.8).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn lr_schedule_shape() {
        let config = TrainConfig {
            lr_max: 6e-4,
            warmup_steps: Some(100),
            total_steps: 1000,
            ..Default::default()
        };
        assert_eq!(lr_schedule(0, &config), 0.0);
        assert_abs_diff_eq!(lr_schedule(100, &config), 6e-4, epsilon = 1e-12);
        assert_abs_diff_eq!(lr_schedule(1000, &config), 6e-5, epsilon = 1e-12);
        assert_abs_diff_eq!(lr_schedule(5000, &config), 6e-5, epsilon = 1e-12);
        // midpoint of the cosine
        assert_abs_diff_eq!(lr_schedule(550, &config), (6e-4 + 6e-5) / 2.0, epsilon = 1e-12);
        // monotone decay after warmup
        let mut prev = lr_schedule(100, &config);
        for s in 101..=1000 {
            let lr = lr_schedule(s, &config);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adamw_matches_reference_adam_on_quadratic() {
        // minimize 0.5 * x^T diag(a) x from x0, gradient a*x
        let a = [2.0f64, 0.5, 1.5];
        let x0 = [1.0f64, -2.0, 0.7];
        let (lr, b1, b2) = (0.01f64, 0.9, 0.95);

        let mut value = ArrayD::from_shape_vec(IxDyn(&[3]), x0.to_vec()).unwrap();
        let mut m = ArrayD::zeros(IxDyn(&[3]));
        let mut v = ArrayD::zeros(IxDyn(&[3]));
        for step in 1..=100 {
            let grad = ArrayD::from_shape_vec(
                IxDyn(&[3]),
                value.iter().zip(&a).map(|(&x, &ai)| ai * x).collect(),
            )
            .unwrap();
            adamw_update(&mut value, &grad, &mut m, &mut v, step, lr, b1, b2, 0.0);
        }

        // independent scalar reference implementation
        let mut xr = x0;
        let mut mr = [0.0f64; 3];
        let mut vr = [0.0f64; 3];
        for step in 1..=100u32 {
            for i in 0..3 {
                let g = a[i] * xr[i];
                mr[i] = b1 * mr[i] + (1.0 - b1) * g;
                vr[i] = b2 * vr[i] + (1.0 - b2) * g * g;
                let mh = mr[i] / (1.0 - b1.powi(step as i32));
                let vh = vr[i] / (1.0 - b2.powi(step as i32));
                xr[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        for i in 0..3 {
            assert_abs_diff_eq!(value[[i]], xr[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut grads = vec![
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0f32, 0.0]).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![4.0f32]).unwrap(),
        ];
        let pre = clip_global_norm(&mut grads, 1.0);
        assert_abs_diff_eq!(pre, 5.0, epsilon = 1e-6);
        let post: f64 = grads.iter().flat_map(|g| g.iter()).map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        assert!(post <= 1.0 + 1e-6);

        let mut small = vec![ArrayD::from_shape_vec(IxDyn(&[1]), vec![0.5f32]).unwrap()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][[0]], 0.5, "norms under the cap stay untouched");
    }

    #[test]
    fn early_stopper_rule() {
        // monotone decreasing: never stops
        let mut s = EarlyStopper::new(3);
        for v in [3.0, 2.9, 2.8, 2.7] {
            assert_eq!(s.observe(v), StopDecision::SnapshotAndContinue);
        }

        // three consecutive increases stop, snapshot stays at the 2.0 eval
        let mut s = EarlyStopper::new(3);
        assert_eq!(s.observe(2.0), StopDecision::SnapshotAndContinue);
        assert_eq!(s.observe(2.1), StopDecision::Continue);
        assert_eq!(s.observe(2.2), StopDecision::Continue);
        assert_eq!(s.observe(2.3), StopDecision::Stop);

        // a dip resets the streak
        let mut s = EarlyStopper::new(3);
        s.observe(2.0);
        assert_eq!(s.observe(2.5), StopDecision::Continue);
        assert_eq!(s.observe(2.4), StopDecision::SnapshotAndContinue);
        assert_eq!(s.observe(2.45), StopDecision::Continue);
        assert_eq!(s.observe(2.46), StopDecision::Continue);
        assert_eq!(s.observe(2.47), StopDecision::Stop);
    }

    fn tiny_model(seed: u64) -> TopoTransformer {
        let config = ModelConfig {
            vocab_size: 256,
            block_size: 32,
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            grid_width: 4,
            grid_height: 4,
            permute_spatial: true,
            permutation_seed: 5,
            dropout_rate: 0.0,
        };
        TopoTransformer::init(config, seed).unwrap()
    }

    fn tiny_corpus() -> Corpus {
        let text: String = (0..400)
            .map(|i| format!("the cat {} sat on mat {} and counted. ", i % 7, (i * 3) % 11))
            .collect();
        Corpus::from_bytes(text.as_bytes(), 0.9).unwrap()
    }

    #[test]
    fn train_step_reduces_loss_on_repeated_batch() {
        let mut model = tiny_model(1);
        let corpus = tiny_corpus();
        let config = TrainConfig { total_steps: 60, warmup_steps: Some(5), seed: 1, ..Default::default() };
        let mut opt = AdamWState::new(model.params());
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let (inputs, targets) = sample_batch(&corpus.train, 4, 32, &mut rng);
        let mut neigh = ChaCha12Rng::seed_from_u64(3);
        let first = train_step(&mut model, &inputs, &targets, None, &mut opt, &config, &mut neigh)
            .unwrap()
            .task_loss;
        let mut last = first;
        for _ in 0..30 {
            last = train_step(&mut model, &inputs, &targets, None, &mut opt, &config, &mut neigh)
                .unwrap()
                .task_loss;
        }
        assert!(first < 5.6, "initialization should start near ln(256) = {:.3}", 256f64.ln());
        assert!(last < first - 0.5, "loss failed to drop: {first} -> {last}");
    }

    #[test]
    fn alpha_zero_step_is_bit_identical_to_baseline_step() {
        let corpus = tiny_corpus();
        let config = TrainConfig { total_steps: 20, warmup_steps: Some(2), seed: 9, ..Default::default() };
        let zero_spatial = SpatialLossConfig { alpha: 0.0, radius: 1, ..Default::default() };

        let run = |spatial: Option<&SpatialLossConfig>| {
            let mut model = tiny_model(7);
            let mut opt = AdamWState::new(model.params());
            let mut batch_rng = ChaCha12Rng::seed_from_u64(11);
            let mut neigh_rng = ChaCha12Rng::seed_from_u64(12);
            for _ in 0..10 {
                let (i, t) = sample_batch(&corpus.train, 4, 32, &mut batch_rng);
                train_step(&mut model, &i, &t, spatial, &mut opt, &config, &mut neigh_rng).unwrap();
            }
            model
        };

        let base = run(None);
        let zero = run(Some(&zero_spatial));
        for (a, b) in base.params().iter().zip(zero.params().iter()) {
            assert_eq!(a.value, b.value, "{} diverged between baseline and alpha=0", a.name);
        }
    }

    #[test]
    fn spatial_descent_over_short_topo_run() {
        let mut model = tiny_model(13);
        let corpus = tiny_corpus();
        let config = TrainConfig {
            total_steps: 500,
            warmup_steps: Some(10),
            eval_interval: 250,
            eval_batches: 2,
            batch_size: 4,
            seed: 21,
            ..Default::default()
        };
        let spatial = SpatialLossConfig { radius: 2, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let report = fit(&mut model, &corpus, &config, Some(&spatial), dir.path()).unwrap();
        assert_eq!(report.logs.len() as u64, report.steps_completed);

        let n = report.logs.len();
        let head = n / 10;
        let first: f64 = report.logs[..head].iter().map(|l| l.breakdown.spatial_sum).sum::<f64>() / head as f64;
        let last: f64 =
            report.logs[n - head..].iter().map(|l| l.breakdown.spatial_sum).sum::<f64>() / head as f64;
        assert!(
            last < first,
            "summed spatial loss should fall over training: first decile {first:.4}, last decile {last:.4}"
        );
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut model = tiny_model(4);
        // poison one weight so the forward pass produces NaN losses
        let idx = model.params().index_of("blocks.0.attn.w_qkv").unwrap();
        model.params_mut().iter_mut().nth(idx).unwrap().value[[0, 0]] = f32::NAN;
        let corpus = tiny_corpus();
        let config = TrainConfig { total_steps: 5, warmup_steps: Some(1), seed: 1, ..Default::default() };
        let spatial = SpatialLossConfig { radius: 1, ..Default::default() };
        let mut opt = AdamWState::new(model.params());
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let (i, t) = sample_batch(&corpus.train, 2, 32, &mut rng);
        let mut neigh = ChaCha12Rng::seed_from_u64(2);
        match train_step(&mut model, &i, &t, Some(&spatial), &mut opt, &config, &mut neigh) {
            Err(TrainError::NonFiniteLoss { per_hook, .. }) => {
                assert_eq!(per_hook.len(), 4, "diagnostic dump lists every hook");
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn fit_is_deterministic_across_runs() {
        let corpus = tiny_corpus();
        let config = TrainConfig {
            total_steps: 30,
            warmup_steps: Some(3),
            eval_interval: 10,
            eval_batches: 2,
            batch_size: 2,
            seed: 5,
            ..Default::default()
        };
        let spatial = SpatialLossConfig { radius: 1, ..Default::default() };
        let digest = |dir: &Path| {
            let mut model = tiny_model(3);
            let report = fit(&mut model, &corpus, &config, Some(&spatial), dir).unwrap();
            checkpoint::file_digest(&report.checkpoint_path).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        assert_eq!(digest(d1.path()), digest(d2.path()));
    }

    #[test]
    fn fit_restores_snapshot_on_early_stop() {
        // patience 1 with a noisy tiny eval set: the run should stop early
        // and report a checkpoint whose eval is no worse than later evals
        let corpus = tiny_corpus();
        let config = TrainConfig {
            total_steps: 400,
            warmup_steps: Some(4),
            eval_interval: 20,
            eval_batches: 1,
            batch_size: 2,
            early_stop_patience: 1,
            seed: 33,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(8);
        let report = fit(&mut model, &corpus, &config, None, dir.path()).unwrap();
        if report.early_stopped {
            assert!(report.steps_completed < 400);
            let kept = report
                .evaluations
                .iter()
                .find(|(s, _)| *s == report.steps_completed)
                .expect("kept step was evaluated")
                .1;
            for (s, v) in report.evaluations.iter().filter(|(s, _)| *s > report.steps_completed) {
                assert!(kept <= *v, "kept eval {kept} worse than later eval {v} at step {s}");
            }
        }
    }
}
