//! Two-stage training with Adam, plateau learning-rate decay, early
//! stopping, best-checkpoint selection and cross-validation folds.
//!
//! Stage 1 trains from scratch with the soft Dice loss on the training
//! slices (offline flips already applied). Stage 2 starts from the stage-1
//! weights, draws a random affine augmentation per sample and uses the
//! configured loss for a fixed number of epochs. After every epoch the
//! validation score (pooled foreground Dice over all validation slices)
//! decides learning-rate decay, early stopping and which weights are kept.

mod adam;
mod checkpoint;
mod data;
mod pipeline;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{five_fold_split, k_fold_split, Fold, FoldData, SliceSet};
pub use pipeline::{fold_data, preprocess_cases, run_fold, FoldRun};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::losses::{loss, one_hot, LossConfig, LossError, LossKind};
use crate::model::{build_model, predict_labels, Model, ModelConfig, ModelError};
use crate::postprocess::largest_component_filter;
use crate::preprocess::{preprocess_volume, random_augment, uncrop_labels, AugmentParams, AugmentRanges, PreprocessConfig, PreprocessError};
use crate::tensor::{NormMode, Tape, Tensor, TensorError};
use crate::volume::{LabelMap, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("{0}")]
    Gradient(String),
    #[error("checkpoint does not match the requested setup: {0}")]
    Mismatch(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub decay_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub stage1_max_epochs: usize,
    pub stage2_epochs: usize,
    pub folds: usize,
    /// Stage-2 objective; stage 1 always uses the Dice form of this config.
    pub loss: LossConfig,
    pub seed: u64,
    pub augment: AugmentRanges,
    /// Recorded in checkpoints so inference repeats the conditioning.
    pub preprocess: PreprocessConfig,
    /// Ends stage 1 as soon as the validation score reaches this value.
    pub stop_at_val_dsc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay_factor: 0.2,
            plateau_patience: 5,
            early_stop_patience: 10,
            batch_size: 4,
            stage1_max_epochs: 100,
            stage2_epochs: 50,
            folds: 5,
            loss: LossConfig::tversky(),
            seed: 0,
            augment: AugmentRanges::default(),
            preprocess: PreprocessConfig::default(),
            stop_at_val_dsc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        self.preprocess.validate()?;
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    fn stage1_loss(&self) -> LossConfig {
        LossConfig {
            kind: LossKind::Dice,
            ..self.loss
        }
    }
}

/// One line of the epoch log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub loss: f64,
    pub val_dsc: f64,
    pub lr: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} stage={} loss={} val_dsc={} lr={}",
            self.epoch, self.stage, self.loss, self.val_dsc, self.lr
        )
    }
}

impl FromStr for EpochRecord {
    type Err = TrainError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut fields = BTreeMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| TrainError::Data(format!("bad epoch log field {part:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| TrainError::Data(format!("epoch log line lacks {k}")));
        let num = |k: &str| -> Result<f64, TrainError> { get(k)?.parse().map_err(|_| TrainError::Data(format!("bad {k} value"))) };
        Ok(Self {
            epoch: get("epoch")?.parse().map_err(|_| TrainError::Data("bad epoch value".into()))?,
            stage: get("stage")?.parse().map_err(|_| TrainError::Data("bad stage value".into()))?,
            loss: num("loss")?,
            val_dsc: num("val_dsc")?,
            lr: num("lr")?,
        })
    }
}

/// Passed to the epoch callback after each completed epoch.
pub struct EpochEvent<'a> {
    pub record: EpochRecord,
    /// Full state after this epoch.
    pub last: &'a Checkpoint,
    /// Best-scoring state so far.
    pub best: &'a Checkpoint,
    pub improved: bool,
}

pub type EpochCallback<'a> = dyn FnMut(&EpochEvent<'_>) -> Result<(), TrainError> + 'a;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    /// Records of the epochs run by this call.
    pub log: Vec<EpochRecord>,
    /// Cases whose slices contributed gradient updates in this call.
    pub trained_case_ids: BTreeSet<String>,
}

/// Pooled foreground Dice of eval-mode predictions over all slices: per
/// class `2·Σ|G∩P| / (Σ|G| + Σ|P|)` (1 when the class is absent from
/// both), averaged over classes `1..K`.
pub fn validation_dsc(model: &Model, slices: &SliceSet, batch_size: usize) -> Result<f64, TrainError> {
    if slices.is_empty() {
        return Err(TrainError::Data("validation set is empty".into()));
    }
    let k = model.config.num_classes;
    let mut eval = model.clone();
    let (h, w) = (slices.height, slices.width);
    let mut inter = vec![0usize; k];
    let mut gt = vec![0usize; k];
    let mut pr = vec![0usize; k];
    let idx: Vec<usize> = (0..slices.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut x = Vec::with_capacity(chunk.len() * h * w);
        for &i in chunk {
            x.extend_from_slice(slices.image(i));
        }
        let input = Tensor::new([chunk.len(), 1, h, w], x)?;
        let pred = predict_labels(&eval.forward(&input, NormMode::Eval)?)?;
        for (j, &i) in chunk.iter().enumerate() {
            let p = &pred.data()[j * h * w..(j + 1) * h * w];
            for (&a, &b) in slices.label(i).iter().zip(p) {
                gt[a as usize] += 1;
                pr[b as usize] += 1;
                if a == b {
                    inter[a as usize] += 1;
                }
            }
        }
    }
    let scores = (1..k).map(|c| {
        let denom = gt[c] + pr[c];
        if denom == 0 {
            1.0
        } else {
            2.0 * inter[c] as f64 / denom as f64
        }
    });
    Ok(scores.sum::<f64>() / (k - 1) as f64)
}

fn check_data(data: &FoldData, config: &ModelConfig) -> Result<(), TrainError> {
    if data.train.is_empty() {
        return Err(TrainError::Data("training set is empty".into()));
    }
    if data.val.is_empty() {
        return Err(TrainError::Data("validation set is empty".into()));
    }
    if (data.train.height, data.train.width) != (data.val.height, data.val.width) {
        return Err(TrainError::Data("training and validation slices differ in size".into()));
    }
    if config.in_channels != 1 {
        return Err(TrainError::Data("slice data has one channel".into()));
    }
    let d = config.divisor();
    if !data.train.height.is_multiple_of(d) || !data.train.width.is_multiple_of(d) {
        return Err(ModelError::IndivisibleInput {
            height: data.train.height,
            width: data.train.width,
            divisor: d,
        }
        .into());
    }
    let k = config.num_classes;
    for set in [&data.train, &data.val] {
        if let Some(&l) = set.labels.iter().find(|&&l| l as usize >= k) {
            return Err(TrainError::Data(format!("label {l} outside 0..{k}")));
        }
    }
    Ok(())
}

fn rng_for(seed: u64, stage: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

/// One epoch of mini-batch Adam. Returns the mean batch loss.
fn run_epoch(
    state: &mut Checkpoint,
    rng: &mut ChaCha8Rng,
    train: &SliceSet,
    config: &TrainConfig,
    trained: &mut BTreeSet<String>,
) -> Result<f64, TrainError> {
    let (h, w) = (train.height, train.width);
    let k = state.model.config.num_classes;
    let adam = config.adam(state.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(config.batch_size) {
        let mut images = Vec::with_capacity(chunk.len() * h * w);
        let mut labels = Vec::with_capacity(chunk.len() * h * w);
        for &i in chunk {
            if state.stage == 2 {
                let params = AugmentParams::from_seed(rng.random(), &config.augment);
                let (img, lab) = random_augment(train.image(i), train.label(i), h, w, &params)?;
                images.extend(img);
                labels.extend(lab);
            } else {
                images.extend_from_slice(train.image(i));
                labels.extend_from_slice(train.label(i));
            }
            trained.insert(train.case_ids[i].clone());
        }
        let n = chunk.len();
        let target = one_hot(&labels, n, k, h, w)?;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([n, 1, h, w], images)?);
        let fwd = state.model.forward_on_tape(&mut tape, x, NormMode::Train, true)?;
        let l = loss(&mut tape, fwd.probabilities, &target, &state.loss)?;
        let value = tape.value(l).item().expect("scalar loss");
        if !value.is_finite() {
            return Err(TrainError::Diverged { epoch: state.epoch + 1 });
        }
        tape.backward(l)?;
        let mut grads = BTreeMap::new();
        for (name, &v) in &fwd.params {
            let g = tape
                .grad(v)
                .ok_or_else(|| TrainError::Gradient(format!("no gradient reached parameter {name}")))?;
            grads.insert(name.clone(), g.to_vec());
        }
        adam_step(&mut state.model.params, &grads, &mut state.adam, &adam)?;
        total += value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

fn is_finished(state: &Checkpoint, config: &TrainConfig) -> bool {
    match state.stage {
        1 => {
            state.epoch >= config.stage1_max_epochs
                || state.epochs_since_improvement >= config.early_stop_patience
                || config.stop_at_val_dsc.is_some_and(|t| state.best_val_dsc >= t)
        }
        _ => state.epoch >= config.stage2_epochs,
    }
}

/// Runs epochs from `last` until the stage's stopping rule fires.
fn continue_training(
    mut state: Checkpoint,
    mut best: Checkpoint,
    data: &FoldData,
    config: &TrainConfig,
    on_epoch: &mut EpochCallback<'_>,
) -> Result<TrainOutcome, TrainError> {
    let mut rng = state.rng.restore();
    let mut log = Vec::new();
    let mut trained = BTreeSet::new();
    while !is_finished(&state, config) {
        let lr = state.lr;
        let mean_loss = run_epoch(&mut state, &mut rng, &data.train, config, &mut trained)?;
        let val = validation_dsc(&state.model, &data.val, config.batch_size)?;
        state.epoch += 1;
        state.val_dsc = val;
        let improved = val > state.best_val_dsc;
        if improved {
            state.best_val_dsc = val;
            state.best_epoch = state.epoch;
            state.epochs_since_improvement = 0;
        } else {
            state.epochs_since_improvement += 1;
            if state.epochs_since_improvement.is_multiple_of(config.plateau_patience) {
                state.lr_decays += 1;
                state.lr = state.base_lr * config.decay_factor.powi(state.lr_decays as i32);
            }
        }
        state.rng = RngState::capture(&rng);
        if improved {
            best = state.clone();
        }
        let record = EpochRecord {
            epoch: state.epoch,
            stage: state.stage,
            loss: mean_loss,
            val_dsc: val,
            lr,
        };
        log.push(record);
        on_epoch(&EpochEvent {
            record,
            last: &state,
            best: &best,
            improved,
        })?;
    }
    Ok(TrainOutcome {
        best,
        last: state,
        log,
        trained_case_ids: trained,
    })
}

fn fresh_state(model: Model, stage: u8, loss: LossConfig, config: &TrainConfig) -> Checkpoint {
    Checkpoint {
        adam: AdamState::zeros_like(&model.params),
        model,
        stage,
        epoch: 0,
        base_lr: config.lr,
        lr_decays: 0,
        lr: config.lr,
        epochs_since_improvement: 0,
        best_val_dsc: f64::NEG_INFINITY,
        best_epoch: 0,
        val_dsc: f64::NAN,
        loss,
        preprocess: config.preprocess,
        rng: RngState::capture(&rng_for(config.seed, stage)),
    }
}

/// Stage 1: Dice-loss training from freshly initialized weights.
pub fn train_stage1(data: &FoldData, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_stage1_with(data, model_config, config, &mut |_| Ok(()))
}

pub fn train_stage1_with(
    data: &FoldData,
    model_config: &ModelConfig,
    config: &TrainConfig,
    on_epoch: &mut EpochCallback<'_>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_data(data, model_config)?;
    let (model, _) = build_model(model_config)?;
    let state = fresh_state(model, 1, config.stage1_loss(), config);
    let best = state.clone();
    continue_training(state, best, data, config, on_epoch)
}

/// Stage 2: augmented training from stage-1 weights with the configured
/// loss for exactly `stage2_epochs` epochs. The loaded weights, scored
/// before any update, are the initial best.
pub fn train_stage2(
    stage1: &Checkpoint,
    data: &FoldData,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_stage2_with(stage1, data, model_config, config, &mut |_| Ok(()))
}

pub fn train_stage2_with(
    stage1: &Checkpoint,
    data: &FoldData,
    model_config: &ModelConfig,
    config: &TrainConfig,
    on_epoch: &mut EpochCallback<'_>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if stage1.model.config != *model_config {
        return Err(TrainError::Mismatch(format!(
            "checkpoint model {:?} differs from requested {:?}",
            stage1.model.config, model_config
        )));
    }
    if stage1.preprocess != config.preprocess {
        return Err(TrainError::Mismatch("checkpoint preprocessing differs from the configured one".into()));
    }
    check_data(data, model_config)?;
    let mut state = fresh_state(stage1.model.clone(), 2, config.loss, config);
    let initial = validation_dsc(&state.model, &data.val, config.batch_size)?;
    state.best_val_dsc = initial;
    state.val_dsc = initial;
    let best = state.clone();
    continue_training(state, best, data, config, on_epoch)
}

/// Continues an interrupted run from its latest and best snapshots.
pub fn resume(
    last: &Checkpoint,
    best: &Checkpoint,
    data: &FoldData,
    config: &TrainConfig,
    on_epoch: &mut EpochCallback<'_>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if last.stage != best.stage || last.model.config != best.model.config {
        return Err(TrainError::Mismatch("last and best checkpoints come from different runs".into()));
    }
    if best.best_val_dsc != last.best_val_dsc {
        return Err(TrainError::Mismatch("best checkpoint does not hold the best score of the run".into()));
    }
    if last.preprocess != config.preprocess {
        return Err(TrainError::Mismatch("checkpoint preprocessing differs from the configured one".into()));
    }
    let expected_loss = if last.stage == 1 { config.stage1_loss() } else { config.loss };
    if last.loss != expected_loss {
        return Err(TrainError::Mismatch("checkpoint loss differs from the configured one".into()));
    }
    check_data(data, &last.model.config)?;
    continue_training(last.clone(), best.clone(), data, config, on_epoch)
}

/// Labels a preprocessed volume slice by slice in eval mode, optionally
/// keeping only the largest connected component per class.
pub fn predict_volume(model: &Model, volume: &Volume, postprocess: bool) -> Result<LabelMap, TrainError> {
    let [d, h, w] = volume.dims();
    let div = model.config.divisor();
    if h % div != 0 || w % div != 0 {
        return Err(ModelError::IndivisibleInput {
            height: h,
            width: w,
            divisor: div,
        }
        .into());
    }
    let mut eval = model.clone();
    let mut labels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let x = Tensor::new([1, 1, h, w], volume.slice(z).to_vec())?;
        let pred = predict_labels(&eval.forward(&x, NormMode::Eval)?)?;
        labels.extend_from_slice(pred.data());
    }
    let labels = LabelMap::new([d, h, w], labels)?;
    if postprocess {
        Ok(largest_component_filter(&labels, model.config.num_classes)?)
    } else {
        Ok(labels)
    }
}

/// Applies the checkpoint's preprocessing to a raw volume, predicts and
/// maps the labels back to the raw frame.
pub fn predict_raw_volume(checkpoint: &Checkpoint, raw: &Volume, postprocess: bool) -> Result<LabelMap, TrainError> {
    let pre = preprocess_volume(raw, &checkpoint.preprocess)?;
    let labels = predict_volume(&checkpoint.model, &pre, postprocess)?;
    let [_, h, w] = raw.dims();
    if pre.dims() == raw.dims() {
        Ok(labels)
    } else {
        Ok(uncrop_labels(&labels, h, w)?)
    }
}
