//! U-Net with residual encoder blocks and a dilated-convolution bottleneck.
//!
//! Encoder level `l` (1-based) runs two `conv3×3 → BN → ReLU` layers with
//! `base·2^(l−1)` channels, merges the block input back in (projected sum
//! or concatenation) and max-pools. The bottleneck applies one dilated
//! 3×3 convolution per configured rate to the deepest features and sums
//! them. Each decoder level upsamples, convolves, concatenates the
//! matching encoder output and applies two more conv layers. A 1×1 head
//! and a channel softmax produce per-class probability maps.
//!
//! Convolutions that feed a batch normalization carry no bias: BN removes
//! any per-channel offset, so such a bias would never receive a gradient.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{BatchNormState, NormMode, Tape, Tensor, TensorError, Var};
use crate::volume::{LabelMap, VolumeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input {height}×{width} is not divisible by {divisor} (2^depth)")]
    IndivisibleInput { height: usize, width: usize, divisor: usize },
    #[error("input must be [N,{expected},H,W], got {actual:?}")]
    InputShape { expected: usize, actual: Vec<usize> },
    #[error("parameter {0} is missing")]
    MissingParameter(String),
    #[error("parameter {name} has shape {actual:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// How an encoder block merges its input with its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMode {
    /// Elementwise sum, with a 1×1 projection when channel counts differ.
    Add,
    /// Channel concatenation `[input, output]`.
    Concat,
}

impl ResidualMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ResidualMode::Add => "add",
            ResidualMode::Concat => "concat",
        }
    }
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResidualMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "add" => Ok(ResidualMode::Add),
            "concat" => Ok(ResidualMode::Concat),
            other => Err(ModelError::InvalidConfig(format!("unknown residual mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub dilation_rates: Vec<usize>,
    pub residual_mode: ResidualMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 5,
            depth: 4,
            base_channels: 8,
            dilation_rates: vec![1, 2, 3, 4],
            residual_mode: ResidualMode::Add,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.in_channels == 0 {
            return bad("in_channels must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(1..=16).contains(&self.depth) {
            return bad(format!("depth must lie in 1..=16, got {}", self.depth));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be at least 1".into());
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return bad(format!("dilation rates must be nonempty and >= 1, got {:?}", self.dilation_rates));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    /// Convolution width of level `l` (1-based); level `depth + 1` is the bottleneck.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Channels leaving encoder block `l`, which is also its skip width.
    pub fn encoder_out_channels(&self, level: usize) -> usize {
        match self.residual_mode {
            ResidualMode::Add => self.level_channels(level),
            ResidualMode::Concat => self.encoder_in_channels(level) + self.level_channels(level),
        }
    }

    pub fn encoder_in_channels(&self, level: usize) -> usize {
        if level == 1 {
            self.in_channels
        } else {
            self.encoder_out_channels(level - 1)
        }
    }
}

/// Learnable tensors keyed by canonical name, iterated lexicographically.
pub type ParameterSet = BTreeMap<String, Tensor>;
/// Batch-normalization running statistics keyed by layer name.
pub type RunningStats = BTreeMap<String, BatchNormState>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { kernel: usize, dilation: usize },
    BatchNorm,
    MaxPool,
    Upsample,
    Concat,
    Add,
    Softmax,
}

/// One row of the architecture summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub out_channels: usize,
    /// Output resolution is the input resolution divided by this.
    pub downsample: usize,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub layers: Vec<LayerInfo>,
}

impl Architecture {
    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    /// Table of layer name, output shape for an `h × w` input and parameter count.
    pub fn to_text(&self, h: usize, w: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>18} {:>10}", "layer", "output", "params");
        for l in &self.layers {
            let kind = match l.kind {
                LayerKind::Conv { kernel, dilation: 1 } => format!("conv{kernel}x{kernel}"),
                LayerKind::Conv { kernel, dilation } => format!("conv{kernel}x{kernel} d{dilation}"),
                LayerKind::BatchNorm => "batchnorm".into(),
                LayerKind::MaxPool => "maxpool".into(),
                LayerKind::Upsample => "upsample".into(),
                LayerKind::Concat => "concat".into(),
                LayerKind::Add => "add".into(),
                LayerKind::Softmax => "softmax".into(),
            };
            let shape = format!("{}x{}x{}", l.out_channels, h / l.downsample, w / l.downsample);
            let _ = writeln!(s, "{:<28} {:>18} {:>10}", format!("{} ({kind})", l.name), shape, l.params);
        }
        let _ = writeln!(s, "total parameters: {}", self.total_params());
        s
    }
}

/// Network weights, running statistics and the config they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub stats: RunningStats,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub probabilities: Var,
    pub logits: Var,
    pub bottleneck: Var,
    /// Tape leaf of every parameter, by name.
    pub params: BTreeMap<String, Var>,
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    params: &'a mut ParameterSet,
    stats: &'a mut RunningStats,
    layers: Vec<LayerInfo>,
}

impl Builder<'_> {
    fn he(&mut self, name: String, shape: [usize; 4]) {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive fan-in");
        let data = (0..shape.iter().product()).map(|_| normal.sample(&mut self.rng)).collect();
        self.params.insert(name, Tensor::from_parts(shape.to_vec(), data).with_requires_grad(true));
    }

    fn vector(&mut self, name: String, len: usize, value: f64) {
        self.params.insert(name, Tensor::from_parts(vec![len], vec![value; len]).with_requires_grad(true));
    }

    fn layer(&mut self, name: &str, kind: LayerKind, out_channels: usize, downsample: usize, params: usize) {
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind,
            out_channels,
            downsample,
            params,
        });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, dilation: usize, bias: bool, down: usize) {
        self.he(format!("{name}.weight"), [cout, cin, k, k]);
        if bias {
            self.vector(format!("{name}.bias"), cout, 0.0);
        }
        let n = cout * cin * k * k + if bias { cout } else { 0 };
        self.layer(name, LayerKind::Conv { kernel: k, dilation }, cout, down, n);
    }

    fn bn(&mut self, name: &str, c: usize, down: usize) {
        self.vector(format!("{name}.gamma"), c, 1.0);
        self.vector(format!("{name}.beta"), c, 0.0);
        self.stats.insert(name.to_string(), BatchNormState::standard(c));
        self.layer(name, LayerKind::BatchNorm, c, down, 2 * c);
    }
}

/// Creates He-initialized weights (unit BN scales, zero shifts and biases)
/// and the matching architecture summary.
pub fn build_model(config: &ModelConfig) -> Result<(Model, Architecture), ModelError> {
    config.validate()?;
    let mut params = ParameterSet::new();
    let mut stats = RunningStats::new();
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        params: &mut params,
        stats: &mut stats,
        layers: Vec::new(),
    };
    for l in 1..=config.depth {
        let (cin, c, down) = (config.encoder_in_channels(l), config.level_channels(l), 1 << (l - 1));
        b.conv(&format!("enc{l}.conv1"), cin, c, 3, 1, false, down);
        b.bn(&format!("enc{l}.bn1"), c, down);
        b.conv(&format!("enc{l}.conv2"), c, c, 3, 1, false, down);
        b.bn(&format!("enc{l}.bn2"), c, down);
        match config.residual_mode {
            ResidualMode::Add if cin != c => b.conv(&format!("enc{l}.proj"), cin, c, 1, 1, true, down),
            ResidualMode::Add => b.layer(&format!("enc{l}.residual"), LayerKind::Add, c, down, 0),
            ResidualMode::Concat => b.layer(&format!("enc{l}.residual"), LayerKind::Concat, cin + c, down, 0),
        }
        b.layer(&format!("enc{l}.pool"), LayerKind::MaxPool, config.encoder_out_channels(l), down * 2, 0);
    }
    let (bottom_in, bottom) = (config.encoder_out_channels(config.depth), config.level_channels(config.depth + 1));
    let down = config.divisor();
    for (i, &rate) in config.dilation_rates.iter().enumerate() {
        b.conv(&format!("bottleneck.branch{}", i + 1), bottom_in, bottom, 3, rate, true, down);
    }
    b.layer("bottleneck.sum", LayerKind::Add, bottom, down, 0);
    for l in (1..=config.depth).rev() {
        let c = config.level_channels(l);
        let prev = config.level_channels(l + 1);
        let skip = config.encoder_out_channels(l);
        let down = 1 << (l - 1);
        b.layer(&format!("dec{l}.upsample"), LayerKind::Upsample, prev, down, 0);
        b.conv(&format!("dec{l}.up"), prev, c, 3, 1, false, down);
        b.bn(&format!("dec{l}.bn_up"), c, down);
        b.layer(&format!("dec{l}.skip"), LayerKind::Concat, c + skip, down, 0);
        b.conv(&format!("dec{l}.conv1"), c + skip, c, 3, 1, false, down);
        b.bn(&format!("dec{l}.bn1"), c, down);
        b.conv(&format!("dec{l}.conv2"), c, c, 3, 1, false, down);
        b.bn(&format!("dec{l}.bn2"), c, down);
    }
    b.conv("head", config.level_channels(1), config.num_classes, 1, 1, true, 1);
    b.layer("softmax", LayerKind::Softmax, config.num_classes, 1, 0);
    let arch = Architecture { layers: b.layers };
    Ok((
        Model {
            config: config.clone(),
            params,
            stats,
        },
        arch,
    ))
}

struct Graph<'a> {
    tape: &'a mut Tape,
    vars: BTreeMap<String, Var>,
    stats: &'a mut RunningStats,
    mode: NormMode,
}

impl Graph<'_> {
    fn p(&self, name: &str) -> Result<Var, ModelError> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::MissingParameter(name.to_string()))
    }

    fn conv(&mut self, x: Var, name: &str, padding: usize, dilation: usize, bias: bool) -> Result<Var, ModelError> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = if bias { Some(self.p(&format!("{name}.bias"))?) } else { None };
        Ok(self.tape.conv2d(x, w, b, padding, dilation)?)
    }

    /// conv3×3 (no bias) → BN → ReLU.
    fn conv_bn_relu(&mut self, x: Var, conv: &str, bn: &str) -> Result<Var, ModelError> {
        let y = self.conv(x, conv, 1, 1, false)?;
        let (g, b) = (self.p(&format!("{bn}.gamma"))?, self.p(&format!("{bn}.beta"))?);
        let state = self.stats.get_mut(bn).ok_or_else(|| ModelError::MissingParameter(format!("{bn} running stats")))?;
        let y = self.tape.batchnorm2d(y, g, b, state, self.mode)?;
        Ok(self.tape.relu(y))
    }
}

impl Model {
    /// Rebuilds a model from stored weights, checking every expected
    /// parameter is present with the right shape.
    pub fn from_parts(config: ModelConfig, params: ParameterSet, stats: RunningStats) -> Result<Self, ModelError> {
        let (template, _) = build_model(&config)?;
        for (name, t) in &template.params {
            let got = params.get(name).ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
            if got.shape() != t.shape() {
                return Err(ModelError::ParameterShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    actual: got.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = params.keys().find(|k| !template.params.contains_key(*k)) {
            return Err(ModelError::InvalidConfig(format!("unexpected parameter {extra}")));
        }
        for (name, s) in &template.stats {
            match stats.get(name) {
                Some(got) if got.channels() == s.channels() => {}
                _ => return Err(ModelError::MissingParameter(format!("{name} running stats"))),
            }
        }
        let params = params.into_iter().map(|(k, t)| (k, t.with_requires_grad(true))).collect();
        Ok(Self { config, params, stats })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let [_, c, h, w] = shape[..] else {
            return Err(ModelError::InputShape {
                expected: self.config.in_channels,
                actual: shape.to_vec(),
            });
        };
        if c != self.config.in_channels {
            return Err(ModelError::InputShape {
                expected: self.config.in_channels,
                actual: shape.to_vec(),
            });
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(ModelError::IndivisibleInput {
                height: h,
                width: w,
                divisor: d,
            });
        }
        Ok(())
    }

    /// Records the network on `tape`. Parameters become leaves that require
    /// gradients when `trainable`; train mode updates the running statistics.
    pub fn forward_on_tape(&mut self, tape: &mut Tape, input: Var, mode: NormMode, trainable: bool) -> Result<Forward, ModelError> {
        self.check_input(tape.shape(input))?;
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        let cfg = &self.config;
        let mut g = Graph {
            tape,
            vars,
            stats: &mut self.stats,
            mode,
        };

        let mut x = input;
        let mut skips = Vec::with_capacity(cfg.depth);
        for l in 1..=cfg.depth {
            let (cin, c) = (cfg.encoder_in_channels(l), cfg.level_channels(l));
            let h1 = g.conv_bn_relu(x, &format!("enc{l}.conv1"), &format!("enc{l}.bn1"))?;
            let h2 = g.conv_bn_relu(h1, &format!("enc{l}.conv2"), &format!("enc{l}.bn2"))?;
            let out = match cfg.residual_mode {
                ResidualMode::Add if cin != c => {
                    let shortcut = g.conv(x, &format!("enc{l}.proj"), 0, 1, true)?;
                    g.tape.add(h2, shortcut)?
                }
                ResidualMode::Add => g.tape.add(h2, x)?,
                ResidualMode::Concat => g.tape.concat_channels(x, h2)?,
            };
            skips.push(out);
            x = g.tape.maxpool2d(out)?;
        }

        let mut bottleneck = None;
        for (i, &rate) in cfg.dilation_rates.iter().enumerate() {
            let y = g.conv(x, &format!("bottleneck.branch{}", i + 1), rate, rate, true)?;
            bottleneck = Some(match bottleneck {
                None => y,
                Some(acc) => g.tape.add(acc, y)?,
            });
        }
        let bottleneck = bottleneck.expect("validated nonempty rates");

        let mut x = bottleneck;
        for l in (1..=cfg.depth).rev() {
            let up = g.tape.upsample2d(x)?;
            let up = g.conv_bn_relu(up, &format!("dec{l}.up"), &format!("dec{l}.bn_up"))?;
            let merged = g.tape.concat_channels(up, skips[l - 1])?;
            let h1 = g.conv_bn_relu(merged, &format!("dec{l}.conv1"), &format!("dec{l}.bn1"))?;
            x = g.conv_bn_relu(h1, &format!("dec{l}.conv2"), &format!("dec{l}.bn2"))?;
        }
        let logits = g.conv(x, "head", 0, 1, true)?;
        let probabilities = g.tape.softmax_channels(logits)?;
        Ok(Forward {
            probabilities,
            logits,
            bottleneck,
            params: g.vars,
        })
    }

    /// Class probabilities `[N, num_classes, H, W]` for `input`.
    pub fn forward(&mut self, input: &Tensor, mode: NormMode) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = self.forward_on_tape(&mut tape, x, mode, false)?;
        Ok(tape.value(out.probabilities).clone())
    }

    /// Eval-mode probabilities; leaves the model untouched.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, ModelError> {
        self.clone().forward(input, NormMode::Eval)
    }
}

/// Per-pixel argmax over channels, ties to the lowest class. The result has
/// dims `[N, H, W]`.
pub fn predict_labels(probabilities: &Tensor) -> Result<LabelMap, ModelError> {
    let [n, k, h, w] = probabilities.dims4("predict_labels")?;
    if k > u8::MAX as usize + 1 {
        return Err(ModelError::InvalidConfig(format!("{k} classes do not fit a u8 label")));
    }
    let plane = h * w;
    let data = probabilities.data();
    let mut labels = vec![0u8; n * plane];
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = data[b * k * plane + p];
            for c in 1..k {
                let v = data[(b * k + c) * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            labels[b * plane + p] = best as u8;
        }
    }
    Ok(LabelMap::new([n, h, w], labels)?)
}
