//! Differentiable overlap losses on per-pixel class probabilities.
//!
//! Both losses pool their sums over the batch and all pixels, then average
//! the per-class index over the included classes:
//!
//! * soft Dice: `(f·Σ y·p + s) / (Σ y + Σ p + s)` with `f = 2` by default;
//! * Tversky: `(TP + s) / (TP + α·FP + β·FN + s)` with
//!   `TP = Σ y·p`, `FP = Σ (1−y)·p`, `FN = Σ y·(1−p)`.
//!
//! The loss is one minus the class mean. The smoothing term `s` makes a
//! class that is absent from both target and prediction score a perfect 1.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::{Function, GradSink, Tape, TapeValues, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("target is not one-hot at batch {batch}, pixel {pixel}")]
    NotOneHot { batch: usize, pixel: usize },
    #[error("prediction shape {pred:?} differs from target shape {target:?}")]
    ShapeMismatch { pred: Vec<usize>, target: Vec<usize> },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Dice,
    Tversky,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::Tversky => "tversky",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dice" => Ok(LossKind::Dice),
            "tversky" => Ok(LossKind::Tversky),
            other => Err(LossError::InvalidConfig(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Tversky weight on false positives.
    pub alpha: f64,
    /// Tversky weight on false negatives.
    pub beta: f64,
    pub smooth: f64,
    pub include_background: bool,
    /// Dice numerator factor 2; off reproduces the factor-free variant whose
    /// perfect score is 0.5 per class.
    pub dice_factor_two: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Dice,
            alpha: 0.5,
            beta: 0.5,
            smooth: 1e-6,
            include_background: true,
            dice_factor_two: true,
        }
    }
}

impl LossConfig {
    pub fn dice() -> Self {
        Self::default()
    }

    pub fn tversky() -> Self {
        Self {
            kind: LossKind::Tversky,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(LossError::InvalidConfig("alpha and beta must be non-negative".into()));
        }
        if !(self.smooth > 0.0) {
            return Err(LossError::InvalidConfig("smooth must be positive".into()));
        }
        Ok(())
    }
}

/// One-hot encodes a `[N,H,W]` label array into `[N,K,H,W]`.
pub fn one_hot(labels: &[u8], batch: usize, classes: usize, height: usize, width: usize) -> Result<Tensor, TensorError> {
    let plane = height * width;
    if labels.len() != batch * plane {
        return Err(TensorError::DataLength {
            shape: vec![batch, height, width],
            len: labels.len(),
            expected: batch * plane,
        });
    }
    let mut data = vec![0.0; batch * classes * plane];
    for b in 0..batch {
        for p in 0..plane {
            let k = labels[b * plane + p] as usize;
            if k >= classes {
                return Err(TensorError::InvalidArgument {
                    op: "one_hot",
                    reason: format!("label {k} outside 0..{classes}"),
                });
            }
            data[(b * classes + k) * plane + p] = 1.0;
        }
    }
    Tensor::new(vec![batch, classes, height, width], data)
}

fn check_inputs(pred: &Tensor, target: &Tensor, config: &LossConfig) -> Result<[usize; 4], LossError> {
    config.validate()?;
    let dims = pred.dims4("loss")?;
    if pred.shape() != target.shape() {
        return Err(LossError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            target: target.shape().to_vec(),
        });
    }
    let [n, k, h, w] = dims;
    if !config.include_background && k < 2 {
        return Err(LossError::InvalidConfig("excluding background leaves no classes".into()));
    }
    let plane = h * w;
    let t = target.data();
    for b in 0..n {
        for p in 0..plane {
            let mut total = 0.0;
            for c in 0..k {
                let v = t[(b * k + c) * plane + p];
                if v != 0.0 && v != 1.0 {
                    return Err(LossError::NotOneHot { batch: b, pixel: p });
                }
                total += v;
            }
            if total != 1.0 {
                return Err(LossError::NotOneHot { batch: b, pixel: p });
            }
        }
    }
    Ok(dims)
}

/// Per-class pooled sums `(Σ y·p, Σ y, Σ p)`.
fn class_sums(pred: &[f64], target: &[f64], [n, k, h, w]: [usize; 4]) -> Vec<(f64, f64, f64)> {
    let plane = h * w;
    let mut sums = vec![(0.0, 0.0, 0.0); k];
    for b in 0..n {
        for (c, s) in sums.iter_mut().enumerate() {
            let off = (b * k + c) * plane;
            for (p, y) in pred[off..off + plane].iter().zip(&target[off..off + plane]) {
                s.0 += y * p;
                s.1 += y;
                s.2 += p;
            }
        }
    }
    sums
}

fn first_class(config: &LossConfig) -> usize {
    if config.include_background {
        0
    } else {
        1
    }
}

#[derive(Clone, Copy)]
enum Index {
    Dice { factor: f64 },
    Tversky { alpha: f64, beta: f64 },
}

impl Index {
    /// Per-class score and its derivative with respect to one pixel's
    /// probability, as a function of that pixel's target `y`.
    fn score(self, (inter, ysum, psum): (f64, f64, f64), smooth: f64) -> f64 {
        match self {
            Index::Dice { factor } => (factor * inter + smooth) / (ysum + psum + smooth),
            Index::Tversky { alpha, beta } => {
                let fp = psum - inter;
                let fnn = ysum - inter;
                (inter + smooth) / (inter + alpha * fp + beta * fnn + smooth)
            }
        }
    }

    fn derivative(self, (inter, ysum, psum): (f64, f64, f64), smooth: f64, y: f64) -> f64 {
        match self {
            Index::Dice { factor } => {
                let den = ysum + psum + smooth;
                (factor * y * den - (factor * inter + smooth)) / (den * den)
            }
            Index::Tversky { alpha, beta } => {
                let fp = psum - inter;
                let fnn = ysum - inter;
                let num = inter + smooth;
                let den = inter + alpha * fp + beta * fnn + smooth;
                let dden = y + alpha * (1.0 - y) - beta * y;
                (y * den - num * dden) / (den * den)
            }
        }
    }
}

struct OverlapLoss {
    pred: Var,
    target: Tensor,
    index: Index,
    smooth: f64,
    first_class: usize,
    sums: Vec<(f64, f64, f64)>,
}

impl Function for OverlapLoss {
    fn name(&self) -> &'static str {
        match self.index {
            Index::Dice { .. } => "soft_dice_loss",
            Index::Tversky { .. } => "tversky_loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.pred]
    }

    fn backward(&self, _tape: &TapeValues<'_>, _output: &Tensor, grad_out: &[f64], sink: &mut GradSink<'_>) {
        let [n, k, h, w] = self.target.dims4("loss").expect("checked in forward");
        let plane = h * w;
        let scale = -grad_out[0] / (k - self.first_class) as f64;
        let t = self.target.data();
        if let Some(g) = sink.slot(self.pred) {
            for b in 0..n {
                for c in self.first_class..k {
                    let sums = self.sums[c];
                    // The derivative only depends on whether y is 0 or 1.
                    let d0 = scale * self.index.derivative(sums, self.smooth, 0.0);
                    let d1 = scale * self.index.derivative(sums, self.smooth, 1.0);
                    let off = (b * k + c) * plane;
                    for (gv, y) in g[off..off + plane].iter_mut().zip(&t[off..off + plane]) {
                        *gv += if *y == 1.0 { d1 } else { d0 };
                    }
                }
            }
        }
    }
}

fn overlap_loss(tape: &mut Tape, pred: Var, target: &Tensor, config: &LossConfig, index: Index) -> Result<Var, LossError> {
    let dims = check_inputs(tape.value(pred), target, config)?;
    let sums = class_sums(tape.value(pred).data(), target.data(), dims);
    let first = first_class(config);
    let classes = dims[1] - first;
    let mean = sums[first..].iter().map(|s| index.score(*s, config.smooth)).sum::<f64>() / classes as f64;
    let func = OverlapLoss {
        pred,
        target: target.clone(),
        index,
        smooth: config.smooth,
        first_class: first,
        sums,
    };
    Ok(tape.record(Tensor::scalar(1.0 - mean), Box::new(func)))
}

/// Multiclass soft Dice loss of probabilities `pred` against a one-hot `target`.
pub fn soft_dice_loss(tape: &mut Tape, pred: Var, target: &Tensor, config: &LossConfig) -> Result<Var, LossError> {
    let factor = if config.dice_factor_two { 2.0 } else { 1.0 };
    overlap_loss(tape, pred, target, config, Index::Dice { factor })
}

/// Tversky loss; `alpha` weighs false positives and `beta` false negatives.
pub fn tversky_loss(tape: &mut Tape, pred: Var, target: &Tensor, config: &LossConfig) -> Result<Var, LossError> {
    overlap_loss(
        tape,
        pred,
        target,
        config,
        Index::Tversky {
            alpha: config.alpha,
            beta: config.beta,
        },
    )
}

/// Dispatches on `config.kind`.
pub fn loss(tape: &mut Tape, pred: Var, target: &Tensor, config: &LossConfig) -> Result<Var, LossError> {
    match config.kind {
        LossKind::Dice => soft_dice_loss(tape, pred, target, config),
        LossKind::Tversky => tversky_loss(tape, pred, target, config),
    }
}
