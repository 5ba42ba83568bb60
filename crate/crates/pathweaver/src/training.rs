//! The four-term training loss, the AdamW optimizer with linear warmup and
//! global gradient clipping, the training loop with dev-based model
//! selection, and the single-file checkpoint container.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::slice::PlanningExample;
use crate::corpus::vocab::Vocabulary;
use crate::encoder::EncoderConfig;
use crate::num::layers::Dropper;
use crate::num::tape::Result as NumResult;
use crate::num::{GraphCtx, Id, NumError, ParamStore, Scalar, SeedRng, Tensor};
use crate::planner::{forward_example, ModelError, PlannerConfig, PlannerModel};

/// Numeric element width for a training run. One model codebase serves
/// both: 32-bit for speed, 64-bit when gradients must resolve exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?}; expected f32|f64")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight γ on the forward-head loss.
    pub gamma: f64,
    /// Weight β on the backward-head loss.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of total optimizer steps spent ramping the rate linearly
    /// from zero.
    pub warmup_fraction: f64,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.5,
            beta: 0.5,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 8,
            warmup_fraction: 0.1,
            grad_clip_norm: 1.0,
            weight_decay: 0.01,
            seed: 17,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// The slower, larger-scale profile from the original experiments.
    pub fn paper() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            epochs: 20,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.gamma < 0.0 || self.beta < 0.0 {
            return Err("train.gamma and train.beta must be non-negative".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err("train.learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err("train.warmup_fraction must lie in [0, 1)".into());
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err("train.grad_clip_norm must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return Err("train.weight_decay must be non-negative".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("train.epochs and train.batch_size must be positive".into());
        }
        Ok(())
    }
}

/// The four loss terms and their weighted total, reported in f64 regardless
/// of the training precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Cross-entropy of the forward head against gold forward tokens.
    pub l1: f64,
    /// Cross-entropy of the backward head against gold backward tokens.
    pub l2: f64,
    /// Cross-entropy of the fusion head against gold forward tokens.
    pub l3: f64,
    /// Mean per-position Euclidean distance between the forward states and
    /// the aligned backward states.
    pub l4: f64,
    /// γ·l1 + β·l2 + l3 + l4.
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        LossBreakdown { l1: 0.0, l2: 0.0, l3: 0.0, l4: 0.0, total: 0.0 }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty batch: losses need at least one example")]
    EmptyBatch,
    #[error("non-finite {what} at optimizer step {step}")]
    NonFinite { what: String, step: usize },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint header is not valid JSON: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint version mismatch: file has {found:?}, this build reads {expected:?}")]
    Version { found: String, expected: String },
    #[error("checkpoint integrity failure: {0}")]
    Integrity(String),
}

/// Small bias inside the square root keeping the distance gradient finite
/// at zero; the root is shifted back down so equal streams still score an
/// exact 0.0.
const L4_EPS: f64 = 1e-12;

/// Mean over positions of ‖F_f − F_b_aligned‖₂ as a tape node.
pub fn state_distance_node<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    f_f: Id,
    f_b_aligned: Id,
) -> NumResult<Id> {
    let diff = ctx.tape.sub(f_f, f_b_aligned)?;
    let sq = ctx.tape.mul(diff, diff)?;
    let row_sumsq = ctx.tape.row_sum(sq);
    let biased = ctx.tape.add_scalar(row_sumsq, T::of(L4_EPS));
    let norms = ctx.tape.sqrt(biased);
    let shifted = ctx.tape.add_scalar(norms, T::of(-L4_EPS.sqrt()));
    Ok(ctx.tape.mean(shifted))
}

/// Loss nodes for one example, all scalars on the tape.
pub struct LossNodes {
    pub l1: Id,
    pub l2: Id,
    pub l3: Id,
    pub l4: Id,
    pub total: Id,
}

/// Build the teacher-forced graph for one example and attach the four loss
/// terms plus the weighted total.
pub fn example_losses<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    encoder_cfg: &EncoderConfig,
    planner_cfg: &PlannerConfig,
    vocab: &Vocabulary,
    example: &PlanningExample,
    cfg: &TrainConfig,
    drop: &mut Dropper,
) -> std::result::Result<LossNodes, ModelError> {
    let tf = forward_example(ctx, encoder_cfg, planner_cfg, vocab, example, drop)?;
    let fwd_targets: Vec<Option<usize>> = tf.forward_gold.iter().map(|&t| Some(t)).collect();
    let bwd_targets: Vec<Option<usize>> = tf.backward_gold.iter().map(|&t| Some(t)).collect();
    let l1 = ctx.tape.cross_entropy(tf.forward_logits, &fwd_targets)?;
    let l2 = ctx.tape.cross_entropy(tf.backward_logits, &bwd_targets)?;
    let l3 = ctx.tape.cross_entropy(tf.fusion_logits, &fwd_targets)?;
    let l4 = state_distance_node(ctx, tf.f_f, tf.f_b_aligned)?;
    let g_l1 = ctx.tape.scale(l1, T::of(cfg.gamma));
    let b_l2 = ctx.tape.scale(l2, T::of(cfg.beta));
    let s1 = ctx.tape.add(g_l1, b_l2)?;
    let s2 = ctx.tape.add(s1, l3)?;
    let total = ctx.tape.add(s2, l4)?;
    Ok(LossNodes { l1, l2, l3, l4, total })
}

fn accumulate_breakdown<T: Scalar>(
    acc: &mut LossBreakdown,
    ctx: &GraphCtx<'_, T>,
    nodes: &LossNodes,
) {
    acc.l1 += ctx.tape.item(nodes.l1).as_f64();
    acc.l2 += ctx.tape.item(nodes.l2).as_f64();
    acc.l3 += ctx.tape.item(nodes.l3).as_f64();
    acc.l4 += ctx.tape.item(nodes.l4).as_f64();
    acc.total += ctx.tape.item(nodes.total).as_f64();
}

fn finish_breakdown(mut acc: LossBreakdown, n: usize) -> LossBreakdown {
    let n = n as f64;
    acc.l1 /= n;
    acc.l2 /= n;
    acc.l3 /= n;
    acc.l4 /= n;
    acc.total /= n;
    acc
}

/// Mean loss terms over a batch, without touching gradients.
pub fn compute_losses<T: Scalar>(
    model: &PlannerModel<T>,
    batch: &[PlanningExample],
    cfg: &TrainConfig,
) -> std::result::Result<LossBreakdown, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut acc = LossBreakdown::zero();
    for example in batch {
        let mut ctx = GraphCtx::new(&model.store, false);
        let nodes = example_losses(
            &mut ctx,
            &model.encoder,
            &model.planner,
            &model.vocab,
            example,
            cfg,
            &mut Dropper::off(),
        )?;
        accumulate_breakdown(&mut acc, &ctx, &nodes);
    }
    Ok(finish_breakdown(acc, batch.len()))
}

/// Mean loss terms over a batch plus the gradient of the mean total with
/// respect to every parameter, accumulated in f64.
pub fn compute_losses_and_grads<T: Scalar>(
    model: &PlannerModel<T>,
    batch: &[PlanningExample],
    cfg: &TrainConfig,
    drop_rng: Option<&mut SeedRng>,
) -> std::result::Result<(LossBreakdown, IndexMap<String, Vec<f64>>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut acc = LossBreakdown::zero();
    let mut grads: IndexMap<String, Vec<f64>> = IndexMap::new();
    let inv = T::of(1.0 / batch.len() as f64);
    let p = model.encoder.dropout;
    let mut drop_rng = drop_rng;
    for example in batch {
        let mut ctx = GraphCtx::new(&model.store, true);
        let mut drop = match (&mut drop_rng, p > 0.0) {
            (Some(rng), true) => {
                let key = rng.below(u32::MAX as usize) as u64;
                Dropper::new(p, rng.substream(key))
            }
            _ => Dropper::off(),
        };
        let nodes = example_losses(
            &mut ctx,
            &model.encoder,
            &model.planner,
            &model.vocab,
            example,
            cfg,
            &mut drop,
        )?;
        accumulate_breakdown(&mut acc, &ctx, &nodes);
        let scaled = ctx.tape.scale(nodes.total, inv);
        let g = ctx.tape.backward(scaled)?;
        for (name, grad) in ctx.harvest(&g) {
            let slot = grads.entry(name).or_insert_with(|| vec![0.0; grad.len()]);
            for (s, v) in slot.iter_mut().zip(&grad) {
                *s += v.as_f64();
            }
        }
    }
    Ok((finish_breakdown(acc, batch.len()), grads))
}

/// AdamW moments, kept in f64 for stability regardless of model precision.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
    /// Steps over which the learning rate ramps linearly from zero; zero
    /// disables warmup.
    pub warmup_steps: usize,
}

impl AdamState {
    pub fn new(warmup_steps: usize) -> Self {
        AdamState { warmup_steps, ..AdamState::default() }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One AdamW update: clip the global gradient norm, ramp the learning rate
/// through warmup, update biased moments, and apply the decoupled
/// weight-decay step. `step_index` counts from zero.
pub fn optimizer_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &IndexMap<String, Vec<f64>>,
    state: &mut AdamState,
    cfg: &TrainConfig,
    step_index: usize,
) -> std::result::Result<(), TrainError> {
    let mut norm_sq = 0.0;
    for (name, g) in grads {
        for &v in g {
            if !v.is_finite() {
                return Err(TrainError::NonFinite {
                    what: format!("gradient for {name}"),
                    step: step_index,
                });
            }
            norm_sq += v * v;
        }
    }
    let norm = norm_sq.sqrt();
    let clip_scale = if norm > cfg.grad_clip_norm { cfg.grad_clip_norm / norm } else { 1.0 };

    let t = step_index + 1;
    let warm = if state.warmup_steps == 0 {
        1.0
    } else {
        (t as f64 / state.warmup_steps as f64).min(1.0)
    };
    let lr = cfg.learning_rate * warm;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);

    let zero: Vec<f64> = Vec::new();
    for (name, tensor) in store.iter_mut() {
        let g = grads.get(name).unwrap_or(&zero);
        let n = tensor.data.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        for i in 0..n {
            let gi = g.get(i).copied().unwrap_or(0.0) * clip_scale;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let theta = tensor.data[i].as_f64();
            let update = m_hat / (v_hat.sqrt() + ADAM_EPS) + cfg.weight_decay * theta;
            tensor.data[i] = T::of(theta - lr * update);
        }
    }
    Ok(())
}

/// Teacher-forced prediction quality of the fusion head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TeacherForcedAccuracy {
    /// Fraction of all gold forward tokens the fusion head ranks first.
    pub token_accuracy: f64,
    /// Fraction of examples whose next action and next topic are both
    /// ranked first.
    pub next_pair_accuracy: f64,
}

/// Evaluate the fusion head teacher-forced on a set of examples.
pub fn teacher_forced_accuracy<T: Scalar>(
    model: &PlannerModel<T>,
    examples: &[PlanningExample],
) -> std::result::Result<TeacherForcedAccuracy, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut token_hits = 0usize;
    let mut token_count = 0usize;
    let mut pair_hits = 0usize;
    let vocab_len = model.vocab.len();
    for example in examples {
        let mut ctx = GraphCtx::new(&model.store, false);
        let tf = forward_example(
            &mut ctx,
            &model.encoder,
            &model.planner,
            &model.vocab,
            example,
            &mut Dropper::off(),
        )?;
        let logits = ctx.tape.value(tf.fusion_logits);
        let argmax_at = |row: usize| -> usize {
            let slice = &logits[row * vocab_len..(row + 1) * vocab_len];
            let mut best = 0;
            for (i, v) in slice.iter().enumerate() {
                if *v > slice[best] {
                    best = i;
                }
            }
            best
        };
        for (row, &gold) in tf.forward_gold.iter().enumerate() {
            token_count += 1;
            if argmax_at(row) == gold {
                token_hits += 1;
            }
        }
        // Rows 1 and 3 predict the first pair's action and topic.
        if argmax_at(1) == tf.forward_gold[1] && argmax_at(3) == tf.forward_gold[3] {
            pair_hits += 1;
        }
    }
    Ok(TeacherForcedAccuracy {
        token_accuracy: token_hits as f64 / token_count as f64,
        next_pair_accuracy: pair_hits as f64 / examples.len() as f64,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub dev_next_pair_accuracy: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_dev_accuracy: f64,
    /// True when training stopped early on a non-finite loss or gradient;
    /// the checkpoint then holds the last good parameters.
    pub diverged: bool,
    pub divergence_detail: Option<String>,
}

/// Train the model. Examples are split 90/10 into train/dev with the
/// config seed; the best parameters by dev next-pair accuracy are kept,
/// written back into `model`, and returned as a checkpoint. A non-finite
/// loss or gradient aborts the loop and returns the last good parameters.
pub fn train<T: Scalar>(
    model: &mut PlannerModel<T>,
    examples: &[PlanningExample],
    cfg: &TrainConfig,
) -> std::result::Result<TrainReport, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    if examples.len() < 2 {
        return Err(TrainError::Config(
            "training needs at least two examples (one train, one dev)".into(),
        ));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut split_rng = SeedRng::new(cfg.seed);
    split_rng.shuffle(&mut order);
    let n_dev = (examples.len() / 10).max(1);
    let dev: Vec<PlanningExample> =
        order[..n_dev].iter().map(|&i| examples[i].clone()).collect();
    let train_set: Vec<PlanningExample> =
        order[n_dev..].iter().map(|&i| examples[i].clone()).collect();

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = (cfg.warmup_fraction * total_steps as f64).round() as usize;
    let mut adam = AdamState::new(warmup_steps);

    let mut best_params = model.store.clone();
    let mut best_dev = f64::NEG_INFINITY;
    let mut best_epoch: Option<usize> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut diverged = false;
    let mut divergence_detail = None;
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let mut epoch_rng = SeedRng::new(cfg.seed).substream(1 + epoch as u64);
        let mut idx: Vec<usize> = (0..train_set.len()).collect();
        epoch_rng.shuffle(&mut idx);
        let mut drop_rng = SeedRng::new(cfg.seed).substream(10_000 + epoch as u64);
        let mut epoch_acc = LossBreakdown::zero();
        let mut seen = 0usize;
        for chunk in idx.chunks(cfg.batch_size) {
            let batch: Vec<PlanningExample> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (losses, grads) =
                compute_losses_and_grads(model, &batch, cfg, Some(&mut drop_rng))?;
            if !losses.total.is_finite() {
                diverged = true;
                divergence_detail =
                    Some(format!("non-finite loss at epoch {epoch}, step {step}"));
                break 'epochs;
            }
            match optimizer_step(&mut model.store, &grads, &mut adam, cfg, step) {
                Ok(()) => {}
                Err(TrainError::NonFinite { what, step: s }) => {
                    diverged = true;
                    divergence_detail =
                        Some(format!("non-finite {what} at epoch {epoch}, step {s}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            epoch_acc.l1 += losses.l1 * batch.len() as f64;
            epoch_acc.l2 += losses.l2 * batch.len() as f64;
            epoch_acc.l3 += losses.l3 * batch.len() as f64;
            epoch_acc.l4 += losses.l4 * batch.len() as f64;
            epoch_acc.total += losses.total * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }
        let losses = finish_breakdown(epoch_acc, seen.max(1));
        let dev_acc = teacher_forced_accuracy(model, &dev)?.next_pair_accuracy;
        log.push(EpochLog { epoch, losses, dev_next_pair_accuracy: dev_acc });
        // Ties go to the later epoch: with a small dev set the metric
        // plateaus while the training loss still falls.
        if dev_acc >= best_dev {
            best_dev = dev_acc;
            best_epoch = Some(epoch);
            best_params = model.store.clone();
        }
    }

    model.store = best_params;
    let checkpoint = Checkpoint::from_model(
        model,
        TrainMeta {
            epoch: best_epoch.unwrap_or(0),
            dev_metric: if best_dev.is_finite() { best_dev } else { 0.0 },
            seed: cfg.seed,
        },
    );
    Ok(TrainReport {
        checkpoint,
        log,
        best_epoch,
        best_dev_accuracy: if best_dev.is_finite() { best_dev } else { 0.0 },
        diverged,
        divergence_detail,
    })
}

pub const CHECKPOINT_VERSION: &str = "pathweaver-ckpt-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epoch: usize,
    pub dev_metric: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset of this array inside the payload.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    encoder: EncoderConfig,
    planner: PlannerConfig,
    vocab: Vocabulary,
    meta: TrainMeta,
    manifest: Vec<ManifestEntry>,
    payload_len: u64,
    payload_sha256: String,
}

/// A complete trained artifact: configs, vocabulary, and every parameter
/// array in f32, in registration order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: String,
    pub encoder: EncoderConfig,
    pub planner: PlannerConfig,
    pub vocab: Vocabulary,
    pub meta: TrainMeta,
    pub arrays: Vec<(String, usize, usize, Vec<f32>)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &PlannerModel<T>, meta: TrainMeta) -> Self {
        let arrays = model
            .store
            .iter()
            .map(|(name, t)| {
                let data: Vec<f32> = t.data.iter().map(|v| v.as_f64() as f32).collect();
                (name.to_string(), t.rows, t.cols, data)
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            encoder: model.encoder.clone(),
            planner: model.planner.clone(),
            vocab: model.vocab.clone(),
            meta,
            arrays,
        }
    }

    /// Rebuild a runnable model at any precision.
    pub fn into_model<T: Scalar>(self) -> std::result::Result<PlannerModel<T>, TrainError> {
        self.encoder.validate().map_err(TrainError::Config)?;
        self.planner.validate().map_err(TrainError::Config)?;
        let mut store = ParamStore::new();
        for (name, rows, cols, data) in self.arrays {
            if data.len() != rows * cols {
                return Err(TrainError::Integrity(format!(
                    "array {name} holds {} values for shape {rows}x{cols}",
                    data.len()
                )));
            }
            let mut t = Tensor::zeros(rows, cols);
            for (slot, v) in t.data.iter_mut().zip(&data) {
                *slot = T::of(*v as f64);
            }
            store.insert(name, t);
        }
        let mut vocab = self.vocab;
        vocab.rebuild_index();
        Ok(PlannerModel { store, encoder: self.encoder, planner: self.planner, vocab })
    }

    /// Serialize to the container layout: an 8-byte little-endian header
    /// length, the JSON header, then raw little-endian f32 payloads. The
    /// header carries a SHA-256 of the payload.
    pub fn to_bytes(&self) -> std::result::Result<Vec<u8>, TrainError> {
        let mut payload = Vec::new();
        let mut manifest = Vec::with_capacity(self.arrays.len());
        for (name, rows, cols, data) in &self.arrays {
            manifest.push(ManifestEntry {
                name: name.clone(),
                rows: *rows,
                cols: *cols,
                offset: payload.len() as u64,
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            version: self.version.clone(),
            encoder: self.encoder.clone(),
            planner: self.planner.clone(),
            vocab: self.vocab.clone(),
            meta: self.meta,
            manifest,
            payload_len: payload.len() as u64,
            payload_sha256: sha256_hex(&payload),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + header_json.len() + payload.len());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, TrainError> {
        if bytes.len() < 8 {
            return Err(TrainError::Integrity("file shorter than the length prefix".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| TrainError::Integrity("header overruns the file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])?;
        if header.version != CHECKPOINT_VERSION {
            return Err(TrainError::Version {
                found: header.version,
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let payload = &bytes[header_end..];
        if payload.len() as u64 != header.payload_len {
            return Err(TrainError::Integrity(format!(
                "payload holds {} bytes, header promises {}",
                payload.len(),
                header.payload_len
            )));
        }
        let sha = sha256_hex(payload);
        if sha != header.payload_sha256 {
            return Err(TrainError::Integrity("payload checksum mismatch".into()));
        }
        let mut arrays = Vec::with_capacity(header.manifest.len());
        for entry in &header.manifest {
            let n = entry.rows * entry.cols;
            let start = entry.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(TrainError::Integrity(format!(
                    "array {} overruns the payload",
                    entry.name
                )));
            }
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((entry.name.clone(), entry.rows, entry.cols, data));
        }
        let mut vocab = header.vocab;
        vocab.rebuild_index();
        Ok(Checkpoint {
            version: header.version,
            encoder: header.encoder,
            planner: header.planner,
            vocab,
            meta: header.meta,
            arrays,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &std::path::Path) -> std::result::Result<(), TrainError> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> std::result::Result<Checkpoint, TrainError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
