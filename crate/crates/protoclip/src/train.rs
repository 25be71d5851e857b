//! Two-phase contrastive training.
//!
//! Phase 1 pretrains the image and label encoders against each other with
//! the temperature-scaled contrastive loss, so images land near the
//! embedding of their own label on the unit sphere. Phase 2 then freezes
//! that anchor space: each tabular encoder is trained independently to align
//! its rows with the *frozen* image embeddings of the same samples. The
//! image (and label) encoder parameters are never touched in phase 2 — the
//! frozen embeddings are precomputed once and enter every batch as
//! constants.
//!
//! Optimization is AdamW (decoupled weight decay) with a
//! reduce-on-plateau learning-rate schedule and early stopping. The model
//! kept from each phase is the snapshot with the strictly lowest validation
//! loss. Everything is seeded and single-threaded, so a fixed seed
//! reproduces a run bit for bit; each phase-2 modality derives its own
//! stream from the modality *name*, making its trajectory independent of
//! the order in which modalities are trained.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{clip_loss_on_tape, clip_loss_value, LossConfig, LossDirection};
use crate::data::{fit_preprocess, preprocessed_matrix, DatasetTable, PreprocessStats, Split};
use crate::encoder::{init_params, EncoderConfig, EncoderKind, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape};

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    /// Multiplier applied to the learning rate on decay (default 0.1).
    #[serde(default = "default_factor")]
    pub factor: f64,
    /// Epochs without improvement before a decay fires (default 10).
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Minimum decrease that counts as an improvement (default 1e-5).
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    /// The learning rate never drops below this floor (default 1e-7).
    #[serde(default = "default_lr_floor")]
    pub lr_floor: f64,
}

fn default_factor() -> f64 {
    0.1
}
fn default_patience() -> usize {
    10
}
fn default_min_delta() -> f64 {
    1e-5
}
fn default_lr_floor() -> f64 {
    1e-7
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            factor: default_factor(),
            patience: default_patience(),
            min_delta: default_min_delta(),
            lr_floor: default_lr_floor(),
        }
    }
}

impl SchedulerConfig {
    fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(format!("scheduler factor must lie in (0, 1), got {}", self.factor)));
        }
        if self.patience == 0 {
            return Err(Error::Config("scheduler patience must be >= 1".to_string()));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(Error::Config(format!("scheduler min_delta must be finite and >= 0, got {}", self.min_delta)));
        }
        // `partial_cmp` returns `None` for NaN, so a NaN floor fails too.
        if self.lr_floor.partial_cmp(&0.0) != Some(Ordering::Greater) {
            return Err(Error::Config(format!("scheduler lr_floor must be > 0, got {}", self.lr_floor)));
        }
        Ok(())
    }
}

/// Training hyperparameters shared by both phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Maximum epochs per phase (default 64).
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Contrastive batch size (default 32).
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Initial learning rate (default 1e-4).
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Decoupled weight-decay coefficient (default 0.01).
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Reduce-on-plateau schedule.
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    /// Epochs since the best validation loss before training stops
    /// (default 16, deliberately larger than the scheduler patience so the
    /// learning-rate decay gets a chance to act first).
    #[serde(default = "default_early_stop")]
    pub early_stop_patience: usize,
    /// Contrastive temperature (default 0.1).
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Loss direction (default symmetric).
    #[serde(default = "default_direction")]
    pub direction: LossDirection,
    /// Run seed; drives initialization and batch shuffling.
    pub seed: u64,
}

fn default_epochs() -> usize {
    64
}
fn default_batch_size() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_early_stop() -> usize {
    16
}
fn default_temperature() -> f64 {
    0.1
}
fn default_direction() -> LossDirection {
    LossDirection::Symmetric
}

impl TrainConfig {
    /// Defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            scheduler: SchedulerConfig::default(),
            early_stop_patience: default_early_stop(),
            temperature: default_temperature(),
            direction: default_direction(),
            seed,
        }
    }

    /// Validate rates and patience values.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay)));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be >= 1".to_string()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Temperature { tau: self.temperature });
        }
        self.scheduler.validate()
    }

    /// The contrastive loss settings this config implies.
    pub fn loss_config(&self) -> LossConfig {
        LossConfig { temperature: self.temperature, direction: self.direction }
    }
}

/// AdamW state: first/second moment accumulators mirroring the parameter
/// list, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &[&Matrix]) -> Self {
        let zeros =
            |p: &&Matrix| Matrix::new(p.rows(), p.cols(), vec![0.0; p.rows() * p.cols()]);
        OptimizerState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One AdamW update over every parameter:
    /// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-corrected
    /// `m^ = m/(1-b1^t)`, `v^ = v/(1-b2^t)`, then
    /// `theta <- theta - lr * m^ / (sqrt(v^) + eps) - lr * weight_decay * theta`
    /// (the decay term is decoupled from the gradient path).
    pub fn step(
        &mut self,
        params: &mut [&mut Matrix],
        grads: &[&Matrix],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!(
                    "optimizer tracks {} parameters but got {} params / {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            let (rows, cols) = params[i].shape();
            if (rows, cols) != g.shape() || (rows, cols) != self.m[i].shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!(
                        "parameter {i} has shape {:?} but gradient has {:?} and state has {:?}",
                        (rows, cols),
                        g.shape(),
                        self.m[i].shape()
                    ),
                });
            }
            g.check_finite("adam_step gradient")?;
            let n = rows * cols;
            let mut m_new = Vec::with_capacity(n);
            let mut v_new = Vec::with_capacity(n);
            let mut p_new = Vec::with_capacity(n);
            for j in 0..n {
                let gj = g.data()[j];
                let mj = self.beta1 * self.m[i].data()[j] + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * self.v[i].data()[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let theta = params[i].data()[j];
                p_new.push(theta - lr * m_hat / (v_hat.sqrt() + self.epsilon) - lr * weight_decay * theta);
                m_new.push(mj);
                v_new.push(vj);
            }
            self.m[i] = Matrix::new(rows, cols, m_new);
            self.v[i] = Matrix::new(rows, cols, v_new);
            *params[i] = Matrix::new(rows, cols, p_new);
        }
        Ok(())
    }
}

/// Reduce-on-plateau scheduler: after `patience` consecutive epochs without
/// a `min_delta` improvement, the learning rate is multiplied by `factor`
/// (never below `lr_floor`) and the stall counter resets.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    config: SchedulerConfig,
    lr: f64,
    best: f64,
    stall: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, config: SchedulerConfig) -> Self {
        PlateauScheduler { config, lr, best: f64::INFINITY, stall: 0 }
    }

    /// Current learning rate.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record one epoch's validation loss; returns whether a decay fired.
    pub fn step(&mut self, val_loss: f64) -> Result<bool> {
        if !val_loss.is_finite() {
            return Err(Error::NonFinite { context: "scheduler received a non-finite validation loss".to_string() });
        }
        if val_loss < self.best - self.config.min_delta {
            self.best = val_loss;
            self.stall = 0;
            return Ok(false);
        }
        self.stall += 1;
        if self.stall >= self.config.patience {
            self.lr = (self.lr * self.config.factor).max(self.config.lr_floor);
            self.stall = 0;
            return Ok(true);
        }
        Ok(false)
    }
}

/// One epoch's record in the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// 1-based epoch index within its phase.
    pub epoch: usize,
    /// `"1"` for the image-label phase, `"2:<modality>"` for alignment phases.
    pub phase: String,
    /// Row-weighted mean training loss of the epoch.
    pub train_loss: f64,
    /// Row-weighted mean validation loss after the epoch.
    pub val_loss: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

/// Render history as CSV with header `epoch,phase,train_loss,val_loss,lr`.
pub fn history_to_csv(records: &[HistoryRecord]) -> String {
    let mut out = String::from("epoch,phase,train_loss,val_loss,lr\n");
    for r in records {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.phase, r.train_loss, r.val_loss, r.lr));
    }
    out
}

/// Output of phase 1: the best image and label encoders plus the run log.
#[derive(Debug, Clone)]
pub struct Phase1Result {
    pub image: EncoderParams,
    pub label: EncoderParams,
    /// Lowest validation loss seen (the selected snapshot's loss).
    pub best_val: f64,
    /// Epoch of the selected snapshot (0 = initialization).
    pub best_epoch: usize,
    pub history: Vec<HistoryRecord>,
}

/// Output of phase 2 for one modality.
#[derive(Debug, Clone)]
pub struct Phase2ModalityResult {
    pub name: String,
    pub params: EncoderParams,
    pub best_val: f64,
    pub best_epoch: usize,
    pub history: Vec<HistoryRecord>,
}

fn gather_rows(source: &Matrix, indices: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(indices.len() * source.cols());
    for &i in indices {
        data.extend_from_slice(source.row(i));
    }
    Matrix::new(indices.len(), source.cols(), data)
}

fn split_indices_checked(table: &DatasetTable, phase: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let train = table.split_indices(Split::Train);
    let val = table.split_indices(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "{phase} needs non-empty train and validation splits (train = {}, val = {})",
            train.len(),
            val.len()
        )));
    }
    Ok((train, val))
}

fn labels_column(table: &DatasetTable, indices: &[usize]) -> Matrix {
    let data: Vec<f64> = indices.iter().map(|&i| table.samples[i].label).collect();
    Matrix::new(indices.len(), 1, data)
}

/// Row-weighted validation loss over fixed-order batches.
fn batched_val_loss<QF, KF>(
    indices: &[usize],
    batch_size: usize,
    loss_cfg: &LossConfig,
    encode_q: QF,
    encode_k: KF,
) -> Result<f64>
where
    QF: Fn(&[usize]) -> Result<Matrix>,
    KF: Fn(&[usize]) -> Result<Matrix>,
{
    let mut sum = 0.0;
    let mut rows = 0usize;
    for batch in indices.chunks(batch_size) {
        let q = encode_q(batch)?;
        let k = encode_k(batch)?;
        let loss = clip_loss_value(&q, &k, loss_cfg)?;
        sum += loss * batch.len() as f64;
        rows += batch.len();
    }
    let loss = sum / rows as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: "validation loss".to_string() });
    }
    Ok(loss)
}

/// Phase 1: contrastive pretraining of the image and label encoders.
///
/// Per epoch, the training split is reshuffled (seeded) and consumed in
/// batches; both encoders update together under one AdamW state. Validation
/// runs after every epoch in fixed index order; the snapshot with the
/// strictly lowest validation loss is kept (initialization counts as epoch
/// 0); training stops early once `early_stop_patience` epochs pass without
/// a new best. A non-finite loss aborts with the epoch index in the error.
pub fn train_phase1(
    table: &DatasetTable,
    image_config: &EncoderConfig,
    label_config: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<Phase1Result> {
    cfg.validate()?;
    if label_config.kind != EncoderKind::LabelMlp {
        return Err(Error::Config(format!(
            "phase 1 label encoder must be a label_mlp, got {:?}",
            label_config.kind
        )));
    }
    if label_config.input_dim != 1 {
        return Err(Error::Config("label encoder input width must be 1".to_string()));
    }
    let (train, val) = split_indices_checked(table, "phase 1")?;
    let mut image = init_params(image_config)?;
    let mut label = init_params(label_config)?;
    let loss_cfg = cfg.loss_config();

    let val_loss_of = |img: &EncoderParams, lbl: &EncoderParams| {
        batched_val_loss(
            &val,
            cfg.batch_size,
            &loss_cfg,
            |batch| img.encode_batch(&table.images(batch)),
            |batch| lbl.encode_batch(&labels_column(table, batch)),
        )
    };

    let mut best_val = val_loss_of(&image, &label)?;
    let mut best_epoch = 0usize;
    let mut best_image = image.clone();
    let mut best_label = label.clone();
    let mut history = Vec::new();
    let mut optimizer = {
        let mut refs: Vec<&Matrix> = image.params();
        refs.extend(label.params());
        OptimizerState::new(&refs)
    };
    let mut scheduler = PlateauScheduler::new(cfg.lr, cfg.scheduler);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for epoch in 1..=cfg.epochs {
        let lr = scheduler.lr();
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let image_ids = image.bind(&mut tape)?;
            let label_ids = label.bind(&mut tape)?;
            let xi = tape.input(table.images(batch))?;
            let xl = tape.input(labels_column(table, batch))?;
            let q = image.forward(&mut tape, &image_ids, xi)?;
            let k = label.forward(&mut tape, &label_ids, xl)?;
            let loss = clip_loss_on_tape(&mut tape, q, k, &loss_cfg)?;
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("phase 1 training loss diverged at epoch {epoch}"),
                });
            }
            loss_sum += loss_value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let grad_refs: Vec<&Matrix> =
                image_ids.iter().chain(label_ids.iter()).map(|&id| grads.get(id)).collect();
            let mut slots = image.params_mut();
            slots.extend(label.params_mut());
            optimizer.step(&mut slots, &grad_refs, lr, cfg.weight_decay)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = val_loss_of(&image, &label).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFinite {
                context: format!("phase 1 validation loss diverged at epoch {epoch}"),
            },
            other => other,
        })?;
        history.push(HistoryRecord { epoch, phase: "1".to_string(), train_loss, val_loss, lr });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_image = image.clone();
            best_label = label.clone();
        }
        scheduler.step(val_loss)?;
        if epoch - best_epoch >= cfg.early_stop_patience {
            break;
        }
    }
    Ok(Phase1Result { image: best_image, label: best_label, best_val, best_epoch, history })
}

/// Fowler–Noll–Vo 1a; folds a modality name into the run seed so each
/// modality's stream is its own, independent of training order.
fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for one phase-2 modality.
pub fn modality_seed(run_seed: u64, name: &str) -> u64 {
    fnv1a64(name) ^ run_seed
}

/// Phase 2: align each tabular encoder to the frozen image embeddings.
///
/// The frozen image encoder's embeddings are precomputed once (outside any
/// tape) and enter every batch as constants, so its parameters are bitwise
/// untouched by construction. Each `(name, config)` pair trains
/// independently with its own optimizer, scheduler, and RNG stream seeded
/// from the modality name — results do not depend on the order of the list.
pub fn train_phase2(
    table: &DatasetTable,
    stats: &PreprocessStats,
    image: &EncoderParams,
    tabular_configs: &[(String, EncoderConfig)],
    cfg: &TrainConfig,
) -> Result<Vec<Phase2ModalityResult>> {
    cfg.validate()?;
    let (train, val) = split_indices_checked(table, "phase 2")?;
    let all: Vec<usize> = (0..table.len()).collect();
    let image_emb = image.encode_batch(&table.images(&all))?;
    let loss_cfg = cfg.loss_config();

    let mut results = Vec::with_capacity(tabular_configs.len());
    for (name, config) in tabular_configs {
        if config.kind != EncoderKind::TabularMlp {
            return Err(Error::Config(format!(
                "phase 2 encoder for modality `{name}` must be a tabular_mlp, got {:?}",
                config.kind
            )));
        }
        let mi = table.modality_index(name)?;
        let width = stats.modalities[mi].width();
        if config.input_dim != width {
            return Err(Error::Config(format!(
                "encoder for modality `{name}` expects input width {}, but preprocessing produces {width}",
                config.input_dim
            )));
        }
        if config.projection_dim != image.output_width() {
            return Err(Error::Config(format!(
                "encoder for modality `{name}` projects to {}, but the image anchor embeds to {}",
                config.projection_dim,
                image.output_width()
            )));
        }
        let features = preprocessed_matrix(table, stats, mi, &all)?;
        let mut params = init_params(config)?;

        let val_loss_of = |p: &EncoderParams| {
            batched_val_loss(
                &val,
                cfg.batch_size,
                &loss_cfg,
                |batch| p.encode_batch(&gather_rows(&features, batch)),
                |batch| Ok(gather_rows(&image_emb, batch)),
            )
        };

        let mut best_val = val_loss_of(&params)?;
        let mut best_epoch = 0usize;
        let mut best_params = params.clone();
        let mut history = Vec::new();
        let mut optimizer = OptimizerState::new(&params.params());
        let mut scheduler = PlateauScheduler::new(cfg.lr, cfg.scheduler);
        let mut rng = ChaCha8Rng::seed_from_u64(modality_seed(cfg.seed, name));
        let phase = format!("2:{name}");

        for epoch in 1..=cfg.epochs {
            let lr = scheduler.lr();
            let mut order = train.clone();
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut tape = Tape::new();
                let ids = params.bind(&mut tape)?;
                let x = tape.input(gather_rows(&features, batch))?;
                let q = params.forward(&mut tape, &ids, x)?;
                let k = tape.input(gather_rows(&image_emb, batch))?;
                let loss = clip_loss_on_tape(&mut tape, q, k, &loss_cfg)?;
                let loss_value = tape.scalar(loss);
                if !loss_value.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!(
                            "phase 2 training loss for modality `{name}` diverged at epoch {epoch}"
                        ),
                    });
                }
                loss_sum += loss_value * batch.len() as f64;
                let grads = tape.backward(loss)?;
                let grad_refs: Vec<&Matrix> = ids.iter().map(|&id| grads.get(id)).collect();
                let mut slots = params.params_mut();
                optimizer.step(&mut slots, &grad_refs, lr, cfg.weight_decay)?;
            }
            let train_loss = loss_sum / train.len() as f64;
            let val_loss = val_loss_of(&params).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite {
                    context: format!(
                        "phase 2 validation loss for modality `{name}` diverged at epoch {epoch}"
                    ),
                },
                other => other,
            })?;
            history.push(HistoryRecord { epoch, phase: phase.clone(), train_loss, val_loss, lr });
            if val_loss < best_val {
                best_val = val_loss;
                best_epoch = epoch;
                best_params = params.clone();
            }
            scheduler.step(val_loss)?;
            if epoch - best_epoch >= cfg.early_stop_patience {
                break;
            }
        }
        results.push(Phase2ModalityResult {
            name: name.clone(),
            params: best_params,
            best_val,
            best_epoch,
            history,
        });
    }
    Ok(results)
}

/// A fully trained model: both anchors, every tabular encoder, the frozen
/// preprocessing statistics, and the run log.
///
/// Parameters are rounded to `f32` precision (the checkpoint storage grid)
/// before the recorded validation losses are computed, so a saved-and-
/// reloaded model reproduces `best_val` exactly.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub train_config: TrainConfig,
    pub stats: PreprocessStats,
    pub image: EncoderParams,
    pub label: EncoderParams,
    /// `(modality name, encoder)` in table order.
    pub tabular: Vec<(String, EncoderParams)>,
    /// Phase-1 validation loss of the selected snapshot, recomputed after
    /// rounding parameters to storage precision.
    pub best_val: f64,
    /// Phase-1 epoch of the selected snapshot (0 = initialization).
    pub best_epoch: usize,
    /// Per-modality phase-2 validation losses, recomputed after rounding.
    pub modality_val: Vec<(String, f64)>,
    pub history: Vec<HistoryRecord>,
}

/// Round every parameter to the nearest `f32` value (stored as `f64`).
pub fn round_params_to_f32(params: &mut EncoderParams) {
    for slot in params.params_mut() {
        let rounded: Vec<f64> = slot.data().iter().map(|&x| f64::from(x as f32)).collect();
        *slot = Matrix::new(slot.rows(), slot.cols(), rounded);
    }
}

/// Recompute the phase-1 validation loss of a (possibly reloaded) model.
pub fn phase1_val_loss(
    table: &DatasetTable,
    image: &EncoderParams,
    label: &EncoderParams,
    cfg: &TrainConfig,
) -> Result<f64> {
    let val = table.split_indices(Split::Val);
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".to_string()));
    }
    batched_val_loss(
        &val,
        cfg.batch_size,
        &cfg.loss_config(),
        |batch| image.encode_batch(&table.images(batch)),
        |batch| label.encode_batch(&labels_column(table, batch)),
    )
}

/// Recompute the phase-2 validation loss of one tabular encoder against the
/// frozen image anchor.
pub fn phase2_val_loss(
    table: &DatasetTable,
    stats: &PreprocessStats,
    image: &EncoderParams,
    name: &str,
    tabular: &EncoderParams,
    cfg: &TrainConfig,
) -> Result<f64> {
    let val = table.split_indices(Split::Val);
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".to_string()));
    }
    let mi = table.modality_index(name)?;
    batched_val_loss(
        &val,
        cfg.batch_size,
        &cfg.loss_config(),
        |batch| tabular.encode_batch(&preprocessed_matrix(table, stats, mi, batch)?),
        |batch| image.encode_batch(&table.images(batch)),
    )
}

/// Run the full two-phase protocol: fit preprocessing on the train split,
/// phase 1, then phase 2 over `tabular_configs` in order. Parameters are
/// rounded to storage precision and the recorded validation losses
/// recomputed from the rounded values before returning.
pub fn train_full(
    table: &DatasetTable,
    image_config: &EncoderConfig,
    label_config: &EncoderConfig,
    tabular_configs: &[(String, EncoderConfig)],
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let stats = fit_preprocess(table)?;
    let phase1 = train_phase1(table, image_config, label_config, cfg)?;
    let phase2 = train_phase2(table, &stats, &phase1.image, tabular_configs, cfg)?;

    let mut image = phase1.image;
    let mut label = phase1.label;
    round_params_to_f32(&mut image);
    round_params_to_f32(&mut label);
    let best_val = phase1_val_loss(table, &image, &label, cfg)?;

    let mut history = phase1.history;
    let mut tabular = Vec::with_capacity(phase2.len());
    let mut modality_val = Vec::with_capacity(phase2.len());
    for result in phase2 {
        let mut params = result.params;
        round_params_to_f32(&mut params);
        let val = phase2_val_loss(table, &stats, &image, &result.name, &params, cfg)?;
        history.extend(result.history);
        modality_val.push((result.name.clone(), val));
        tabular.push((result.name, params));
    }
    Ok(TrainedModel {
        train_config: cfg.clone(),
        stats,
        image,
        label,
        tabular,
        best_val,
        best_epoch: phase1.best_epoch,
        modality_val,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_splits, synth_generate, SplitFractions, SynthConfig, SynthModality};

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{}: {} vs {} (tol {})", what, a, b, tol);
    }

    fn scalar(m: &Matrix) -> f64 {
        m.data()[0]
    }

    fn one_param_step(theta: f64, g: f64, lr: f64, wd: f64) -> (f64, OptimizerState) {
        let mut p = Matrix::new(1, 1, vec![theta]);
        let grad = Matrix::new(1, 1, vec![g]);
        let mut state = OptimizerState::new(&[&p]);
        state.step(&mut [&mut p], &[&grad], lr, wd).unwrap();
        (scalar(&p), state)
    }

    #[test]
    fn adam_reference_update_matches_hand_evaluation() {
        // theta=1, g=1, first step, lr=1e-3: m^=1, v^=1, so the update is
        // lr/(1+eps) and theta lands at ~0.999000.
        let (theta, state) = one_param_step(1.0, 1.0, 1e-3, 0.0);
        assert_close(theta, 0.999, 1e-9, "reference Adam step");
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_from_rest_is_a_no_op() {
        let (theta, _) = one_param_step(1.0, 0.0, 1e-3, 0.0);
        assert_eq!(theta, 1.0, "zero gradient and zero decay must not move theta");
    }

    #[test]
    fn adam_decoupled_decay_term_is_exact() {
        // g=0 keeps the moment path at zero, isolating the decay term:
        // theta' = 1 - lr * wd = 1 - 1e-6.
        let (theta, _) = one_param_step(1.0, 0.0, 1e-4, 0.01);
        assert_close(theta, 1.0 - 1e-6, 1e-15, "decoupled decay");
    }

    #[test]
    fn adam_moments_decay_toward_zero_on_zero_gradients() {
        let mut p = Matrix::new(1, 1, vec![1.0]);
        let g1 = Matrix::new(1, 1, vec![1.0]);
        let g0 = Matrix::new(1, 1, vec![0.0]);
        let mut state = OptimizerState::new(&[&p]);
        state.step(&mut [&mut p], &[&g1], 1e-3, 0.0).unwrap();
        let m_after_hit = state.m[0].data()[0];
        for _ in 0..5 {
            state.step(&mut [&mut p], &[&g0], 1e-3, 0.0).unwrap();
        }
        let m_after_rest = state.m[0].data()[0];
        assert!(m_after_rest.abs() < m_after_hit.abs());
        assert_close(m_after_rest, m_after_hit * 0.9f64.powi(5), 1e-15, "momentum decay");
    }

    #[test]
    fn adam_rejects_shape_mismatch_and_non_finite_gradients() {
        let mut p = Matrix::new(1, 2, vec![1.0, 2.0]);
        let bad_shape = Matrix::new(2, 1, vec![1.0, 2.0]);
        let mut state = OptimizerState::new(&[&p]);
        assert!(matches!(
            state.step(&mut [&mut p], &[&bad_shape], 1e-3, 0.0),
            Err(Error::Shape { .. })
        ));
        let nan = Matrix::new(1, 2, vec![f64::NAN, 0.0]);
        assert!(matches!(
            state.step(&mut [&mut p], &[&nan], 1e-3, 0.0),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn scheduler_keeps_lr_while_improving() {
        let mut sched = PlateauScheduler::new(1e-4, SchedulerConfig::default());
        for i in 0..30 {
            let fired = sched.step(1.0 - 0.01 * i as f64).unwrap();
            assert!(!fired);
        }
        assert_eq!(sched.lr(), 1e-4);
    }

    #[test]
    fn scheduler_decays_on_the_tenth_stall() {
        let mut sched = PlateauScheduler::new(1e-4, SchedulerConfig::default());
        assert!(!sched.step(1.0).unwrap()); // establishes the best
        for i in 1..=10 {
            let fired = sched.step(1.0).unwrap();
            assert_eq!(fired, i == 10, "decay must fire exactly on stall {i}");
        }
        assert_close(sched.lr(), 1e-5, 1e-18, "decayed lr");
        // Counter reset: nine more stalls stay quiet, the tenth fires again.
        for _ in 1..10 {
            assert!(!sched.step(1.0).unwrap());
        }
        assert!(sched.step(1.0).unwrap());
    }

    #[test]
    fn scheduler_respects_the_floor_and_rejects_non_finite_loss() {
        let config = SchedulerConfig { lr_floor: 1e-7, ..SchedulerConfig::default() };
        let mut sched = PlateauScheduler::new(2e-7, config);
        sched.step(1.0).unwrap();
        for _ in 0..10 {
            sched.step(1.0).unwrap();
        }
        assert_close(sched.lr(), 1e-7, 1e-22, "clamped to floor");
        for _ in 0..11 {
            sched.step(1.0).unwrap();
        }
        assert_eq!(sched.lr(), 1e-7, "floor is sticky");
        assert!(matches!(sched.step(f64::NAN), Err(Error::NonFinite { .. })));
    }

    fn tiny_table(n: usize, sigma: f64, seed: u64) -> DatasetTable {
        let config = SynthConfig {
            n,
            d_image: 6,
            sigma,
            balanced: true,
            modalities: vec![
                SynthModality::new("biomarkers", 4, 2),
                SynthModality::new("cognitive", 3, 2),
            ],
            seed,
        };
        let (mut table, _) = synth_generate(&config).unwrap();
        make_splits(&mut table, seed ^ 1, SplitFractions::default(), true).unwrap();
        table
    }

    fn tiny_configs(table: &DatasetTable, seed: u64) -> (EncoderConfig, EncoderConfig) {
        let image = EncoderConfig::image_mlp(table.image_dim, vec![16], seed)
            .with_projection_dim(16);
        let label = EncoderConfig::label_mlp(vec![16], seed ^ 7).with_projection_dim(16);
        (image, label)
    }

    fn tiny_train_config(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr: 1e-2,
            ..TrainConfig::with_seed(seed)
        }
    }

    #[test]
    fn phase1_reduces_validation_loss_on_clean_synthetic_data() {
        let table = tiny_table(60, 0.05, 3);
        let (image_cfg, label_cfg) = tiny_configs(&table, 3);
        let cfg = tiny_train_config(3, 8);
        let init_image = init_params(&image_cfg).unwrap();
        let init_label = init_params(&label_cfg).unwrap();
        let initial = phase1_val_loss(&table, &init_image, &init_label, &cfg).unwrap();
        let result = train_phase1(&table, &image_cfg, &label_cfg, &cfg).unwrap();
        assert!(
            result.best_val < initial,
            "training should improve on the initial val loss: {} vs {initial}",
            result.best_val
        );
        assert!(!result.history.is_empty());
        assert!(result.history.len() <= 8);
    }

    #[test]
    fn phase1_zero_epochs_returns_initial_params_and_empty_history() {
        let table = tiny_table(30, 0.1, 4);
        let (image_cfg, label_cfg) = tiny_configs(&table, 4);
        let cfg = tiny_train_config(4, 0);
        let result = train_phase1(&table, &image_cfg, &label_cfg, &cfg).unwrap();
        assert!(result.history.is_empty());
        assert_eq!(result.best_epoch, 0);
        assert_eq!(result.image, init_params(&image_cfg).unwrap());
        assert_eq!(result.label, init_params(&label_cfg).unwrap());
    }

    #[test]
    fn phase1_is_bitwise_deterministic() {
        let table = tiny_table(45, 0.1, 5);
        let (image_cfg, label_cfg) = tiny_configs(&table, 5);
        let cfg = tiny_train_config(5, 4);
        let a = train_phase1(&table, &image_cfg, &label_cfg, &cfg).unwrap();
        let b = train_phase1(&table, &image_cfg, &label_cfg, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.image, b.image);
        assert_eq!(a.label, b.label);
        assert_eq!(a.best_val.to_bits(), b.best_val.to_bits());
    }

    #[test]
    fn phase1_requires_splits() {
        let config = SynthConfig {
            n: 12,
            d_image: 4,
            sigma: 0.1,
            balanced: true,
            modalities: vec![SynthModality::new("biomarkers", 2, 1)],
            seed: 6,
        };
        let (table, _) = synth_generate(&config).unwrap(); // no make_splits
        let (image_cfg, label_cfg) = tiny_configs(&table, 6);
        let err = train_phase1(&table, &image_cfg, &label_cfg, &tiny_train_config(6, 2)).unwrap_err();
        assert!(err.to_string().contains("train"), "got: {err}");
    }

    #[test]
    fn one_tiny_lr_epoch_stays_near_initialization() {
        let table = tiny_table(30, 0.1, 7);
        let (image_cfg, label_cfg) = tiny_configs(&table, 7);
        let mut cfg = tiny_train_config(7, 1);
        cfg.lr = 1e-8;
        cfg.weight_decay = 0.0;
        let result = train_phase1(&table, &image_cfg, &label_cfg, &cfg).unwrap();
        // The training split has 21 rows -> 2 batches; each Adam step moves a
        // coordinate by at most ~lr. The snapshot may also be the epoch-0 init.
        let init = init_params(&image_cfg).unwrap();
        let steps = 2.0;
        for (a, b) in result.image.params().iter().zip(init.params()) {
            let delta = a.max_abs_diff(b);
            assert!(delta <= 4.0 * steps * cfg.lr, "max |delta theta| = {delta}");
        }
    }

    #[test]
    fn phase2_results_do_not_depend_on_modality_order() {
        let table = tiny_table(45, 0.1, 8);
        let (image_cfg, label_cfg) = tiny_configs(&table, 8);
        let cfg = tiny_train_config(8, 3);
        let stats = fit_preprocess(&table).unwrap();
        let phase1 = train_phase1(&table, &image_cfg, &label_cfg, &cfg).unwrap();
        let bio_width = stats.modalities[0].width();
        let cog_width = stats.modalities[1].width();
        let bio = (
            "biomarkers".to_string(),
            EncoderConfig::tabular_mlp(bio_width, vec![16], 11).with_projection_dim(16),
        );
        let cog = (
            "cognitive".to_string(),
            EncoderConfig::tabular_mlp(cog_width, vec![16], 12).with_projection_dim(16),
        );
        let forward =
            train_phase2(&table, &stats, &phase1.image, &[bio.clone(), cog.clone()], &cfg).unwrap();
        let reversed =
            train_phase2(&table, &stats, &phase1.image, &[cog, bio], &cfg).unwrap();
        let by_name = |rs: &[Phase2ModalityResult], n: &str| {
            rs.iter().find(|r| r.name == n).unwrap().clone()
        };
        for name in ["biomarkers", "cognitive"] {
            let a = by_name(&forward, name);
            let b = by_name(&reversed, name);
            assert_eq!(a.history, b.history, "history of `{name}` depends on order");
            assert_eq!(a.params, b.params, "params of `{name}` depend on order");
        }
    }

    #[test]
    fn phase2_leaves_image_parameters_bitwise_unchanged() {
        let table = tiny_table(30, 0.1, 9);
        let (image_cfg, label_cfg) = tiny_configs(&table, 9);
        let cfg = tiny_train_config(9, 2);
        let stats = fit_preprocess(&table).unwrap();
        let phase1 = train_phase1(&table, &image_cfg, &label_cfg, &cfg).unwrap();
        let before = phase1.image.clone();
        let spec = (
            "biomarkers".to_string(),
            EncoderConfig::tabular_mlp(stats.modalities[0].width(), vec![16], 13)
                .with_projection_dim(16),
        );
        let _ = train_phase2(&table, &stats, &phase1.image, &[spec], &cfg).unwrap();
        assert_eq!(phase1.image, before);
    }

    #[test]
    fn phase2_validates_width_and_projection() {
        let table = tiny_table(30, 0.1, 10);
        let (image_cfg, label_cfg) = tiny_configs(&table, 10);
        let cfg = tiny_train_config(10, 1);
        let stats = fit_preprocess(&table).unwrap();
        let phase1 = train_phase1(&table, &image_cfg, &label_cfg, &cfg).unwrap();
        let wrong_width = (
            "biomarkers".to_string(),
            EncoderConfig::tabular_mlp(99, vec![16], 1).with_projection_dim(16),
        );
        let err = train_phase2(&table, &stats, &phase1.image, &[wrong_width], &cfg).unwrap_err();
        assert!(err.to_string().contains("width"), "got: {err}");
        let wrong_proj = (
            "biomarkers".to_string(),
            EncoderConfig::tabular_mlp(stats.modalities[0].width(), vec![16], 1)
                .with_projection_dim(64),
        );
        let err = train_phase2(&table, &stats, &phase1.image, &[wrong_proj], &cfg).unwrap_err();
        assert!(err.to_string().contains("projects"), "got: {err}");
    }

    #[test]
    fn full_training_records_losses_at_storage_precision() {
        let table = tiny_table(45, 0.1, 14);
        let (image_cfg, label_cfg) = tiny_configs(&table, 14);
        let cfg = tiny_train_config(14, 3);
        let stats = fit_preprocess(&table).unwrap();
        let tabular = vec![(
            "biomarkers".to_string(),
            EncoderConfig::tabular_mlp(stats.modalities[0].width(), vec![16], 15)
                .with_projection_dim(16),
        )];
        let model = train_full(&table, &image_cfg, &label_cfg, &tabular, &cfg).unwrap();
        // Every stored parameter is exactly representable as f32.
        for params in [&model.image, &model.label, &model.tabular[0].1] {
            for m in params.params() {
                for &x in m.data() {
                    assert_eq!(x, f64::from(x as f32), "parameter not on the f32 grid");
                }
            }
        }
        // The recorded losses are exactly what a recomputation reproduces.
        let recomputed = phase1_val_loss(&table, &model.image, &model.label, &cfg).unwrap();
        assert_eq!(recomputed.to_bits(), model.best_val.to_bits());
        let (name, val) = &model.modality_val[0];
        let recomputed =
            phase2_val_loss(&table, &model.stats, &model.image, name, &model.tabular[0].1, &cfg)
                .unwrap();
        assert_eq!(recomputed.to_bits(), val.to_bits());
        assert_eq!(model.history.first().unwrap().phase, "1");
        assert_eq!(model.history.last().unwrap().phase, "2:biomarkers");
    }

    #[test]
    fn history_csv_has_the_documented_header() {
        let records = vec![HistoryRecord {
            epoch: 1,
            phase: "1".to_string(),
            train_loss: 0.5,
            val_loss: 0.25,
            lr: 1e-4,
        }];
        let csv = history_to_csv(&records);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,phase,train_loss,val_loss,lr"));
        assert_eq!(lines.next(), Some("1,1,0.5,0.25,0.0001"));
    }

    #[test]
    fn train_config_defaults_match_documentation() {
        let cfg = TrainConfig::with_seed(0);
        assert_eq!(cfg.epochs, 64);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.weight_decay, 0.01);
        assert_eq!(cfg.scheduler.factor, 0.1);
        assert_eq!(cfg.scheduler.patience, 10);
        assert_eq!(cfg.early_stop_patience, 16);
        assert_eq!(cfg.temperature, 0.1);
        assert_eq!(cfg.direction, LossDirection::Symmetric);
        cfg.validate().unwrap();
        let parsed: TrainConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(parsed, TrainConfig::with_seed(7));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"seed": 7, "bogus": 1}"#).is_err());
    }
}
