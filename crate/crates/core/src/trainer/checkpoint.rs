//! Training-state snapshots and their binary container.
//!
//! Layout (little-endian): the 8-byte magic `UNDRCKPT`, a `u32` format
//! version, a `u32` record count, then records of
//! `u32 name length, name, u32 rank, u64 extent × rank, f64 × product`.
//! Parameters, running statistics and Adam moments are stored under
//! `param:`, `stat.mean:`, `stat.var:`, `adam.m:` and `adam.v:` prefixes;
//! scalar metadata lives in `meta:` records. Integers wider than 32 bits
//! are split into 32-bit halves so every value is exact in an `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::adam::AdamState;
use crate::losses::{LossConfig, LossKind};
use crate::model::{Model, ModelConfig, ModelError, ParameterSet, ResidualMode, RunningStats};
use crate::preprocess::{ClaheConfig, PreprocessConfig};
use crate::tensor::{BatchNormState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UNDRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Serializable state of the ChaCha stream driving shuffles and augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue or reproduce a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    pub stage: u8,
    /// Completed epochs in this stage.
    pub epoch: usize,
    /// Learning rate is `base_lr · decay^lr_decays`.
    pub base_lr: f64,
    pub lr_decays: u32,
    pub lr: f64,
    pub epochs_since_improvement: usize,
    pub best_val_dsc: f64,
    pub best_epoch: usize,
    /// Validation score of the weights in this snapshot, if evaluated.
    pub val_dsc: f64,
    pub loss: LossConfig,
    pub preprocess: PreprocessConfig,
    pub rng: RngState,
}

fn split_u64(v: u64) -> [f64; 2] {
    [(v & 0xffff_ffff) as f64, (v >> 32) as f64]
}

fn join_u64(v: &[f64]) -> Option<u64> {
    let [lo, hi] = v else { return None };
    let ok = |x: f64| x.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&x);
    (ok(*lo) && ok(*hi)).then_some(*lo as u64 | ((*hi as u64) << 32))
}

struct Writer {
    bytes: Vec<u8>,
    count: u32,
}

impl Writer {
    fn record(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.count += 1;
        self.bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.bytes.extend_from_slice(name.as_bytes());
        self.bytes.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            self.bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn meta(&mut self, key: &str, values: &[f64]) {
        self.record(&format!("meta:{key}"), &[values.len()], values);
    }

    fn meta_u64(&mut self, key: &str, v: u64) {
        self.meta(key, &split_u64(v));
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer {
            bytes: Vec::new(),
            count: 0,
        };
        let c = &self.model.config;
        w.meta_u64("model.in_channels", c.in_channels as u64);
        w.meta_u64("model.num_classes", c.num_classes as u64);
        w.meta_u64("model.depth", c.depth as u64);
        w.meta_u64("model.base_channels", c.base_channels as u64);
        let rates: Vec<f64> = c.dilation_rates.iter().map(|&r| r as f64).collect();
        w.meta("model.dilation_rates", &rates);
        w.meta("model.residual_concat", &[(c.residual_mode == ResidualMode::Concat) as u8 as f64]);
        w.meta_u64("model.seed", c.seed);

        w.meta("train.stage", &[self.stage as f64]);
        w.meta_u64("train.epoch", self.epoch as u64);
        w.meta("train.base_lr", &[self.base_lr]);
        w.meta_u64("train.lr_decays", self.lr_decays as u64);
        w.meta("train.lr", &[self.lr]);
        w.meta_u64("train.epochs_since_improvement", self.epochs_since_improvement as u64);
        w.meta("train.best_val_dsc", &[self.best_val_dsc]);
        w.meta_u64("train.best_epoch", self.best_epoch as u64);
        w.meta("train.val_dsc", &[self.val_dsc]);
        w.meta_u64("adam.step", self.adam.step);

        let l = &self.loss;
        w.meta("loss.tversky", &[(l.kind == LossKind::Tversky) as u8 as f64]);
        w.meta("loss.alpha", &[l.alpha]);
        w.meta("loss.beta", &[l.beta]);
        w.meta("loss.smooth", &[l.smooth]);
        w.meta("loss.include_background", &[l.include_background as u8 as f64]);
        w.meta("loss.dice_factor_two", &[l.dice_factor_two as u8 as f64]);

        let p = &self.preprocess;
        w.meta("pre.window", &[p.window_lo, p.window_hi]);
        w.meta("pre.clip_limit", &[p.clahe.clip_limit]);
        w.meta("pre.tiles", &[p.clahe.tiles.0 as f64, p.clahe.tiles.1 as f64]);
        let (ch, cw) = p.crop.unwrap_or((0, 0));
        w.meta("pre.crop", &[ch as f64, cw as f64]);

        let seed: Vec<f64> = self
            .rng
            .seed
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        w.meta("rng.seed", &seed);
        w.meta_u64("rng.stream", self.rng.stream);
        w.meta_u64("rng.word_pos_lo", self.rng.word_pos as u64);
        w.meta_u64("rng.word_pos_hi", (self.rng.word_pos >> 64) as u64);

        for (name, t) in &self.model.params {
            w.record(&format!("param:{name}"), t.shape(), t.data());
        }
        for (name, s) in &self.model.stats {
            w.record(&format!("stat.mean:{name}"), &[s.channels()], &s.running_mean);
            w.record(&format!("stat.var:{name}"), &[s.channels()], &s.running_var);
            w.meta(&format!("stat.flags:{name}"), &[s.initialized as u8 as f64, s.eps, s.momentum]);
        }
        for (name, m) in &self.adam.m {
            w.record(&format!("adam.m:{name}"), &[m.len()], m);
        }
        for (name, v) in &self.adam.v {
            w.record(&format!("adam.v:{name}"), &[v.len()], v);
        }

        let mut out = Vec::with_capacity(16 + w.bytes.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&w.count.to_le_bytes());
        out.extend_from_slice(&w.bytes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic.to_vec()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let count = r.u32()?;
        let mut records: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("record name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(CheckpointError::Malformed(format!("record {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| CheckpointError::Malformed(format!("record {name} is too large")))?;
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if records.insert(name.clone(), (shape, data)).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate record {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        decode(records)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

type Records = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

struct Meta<'a>(&'a Records);

impl Meta<'_> {
    fn values(&self, key: &str) -> Result<&[f64], CheckpointError> {
        self.0
            .get(&format!("meta:{key}"))
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| CheckpointError::Malformed(format!("missing metadata {key}")))
    }

    fn f64(&self, key: &str) -> Result<f64, CheckpointError> {
        match self.values(key)? {
            [v] => Ok(*v),
            _ => Err(CheckpointError::Malformed(format!("metadata {key} is not a scalar"))),
        }
    }

    fn u64(&self, key: &str) -> Result<u64, CheckpointError> {
        join_u64(self.values(key)?).ok_or_else(|| CheckpointError::Malformed(format!("metadata {key} is not an integer")))
    }

    fn usize(&self, key: &str) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64(key)?).map_err(|_| CheckpointError::Malformed(format!("metadata {key} overflows")))
    }

    fn flag(&self, key: &str) -> Result<bool, CheckpointError> {
        match self.f64(key)? {
            0.0 => Ok(false),
            1.0 => Ok(true),
            v => Err(CheckpointError::Malformed(format!("metadata {key} = {v} is not a flag"))),
        }
    }

    fn small(&self, v: f64, key: &str) -> Result<usize, CheckpointError> {
        if v.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&v) {
            Ok(v as usize)
        } else {
            Err(CheckpointError::Malformed(format!("metadata {key} holds {v}")))
        }
    }
}

fn decode(records: Records) -> Result<Checkpoint, CheckpointError> {
    let meta = Meta(&records);
    let rates = meta
        .values("model.dilation_rates")?
        .iter()
        .map(|&r| meta.small(r, "model.dilation_rates"))
        .collect::<Result<Vec<_>, _>>()?;
    let config = ModelConfig {
        in_channels: meta.usize("model.in_channels")?,
        num_classes: meta.usize("model.num_classes")?,
        depth: meta.usize("model.depth")?,
        base_channels: meta.usize("model.base_channels")?,
        dilation_rates: rates,
        residual_mode: if meta.flag("model.residual_concat")? {
            ResidualMode::Concat
        } else {
            ResidualMode::Add
        },
        seed: meta.u64("model.seed")?,
    };
    config.validate()?;

    let mut params = ParameterSet::new();
    let mut means = BTreeMap::new();
    let mut vars = BTreeMap::new();
    let mut adam_m = BTreeMap::new();
    let mut adam_v = BTreeMap::new();
    for (name, (shape, data)) in &records {
        let Some((prefix, key)) = name.split_once(':') else {
            return Err(CheckpointError::Malformed(format!("record name {name} has no prefix")));
        };
        match prefix {
            "param" => {
                let t = Tensor::new(shape.clone(), data.clone()).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
                params.insert(key.to_string(), t.with_requires_grad(true));
            }
            "stat.mean" => {
                means.insert(key.to_string(), data.clone());
            }
            "stat.var" => {
                vars.insert(key.to_string(), data.clone());
            }
            "adam.m" => {
                adam_m.insert(key.to_string(), data.clone());
            }
            "adam.v" => {
                adam_v.insert(key.to_string(), data.clone());
            }
            "meta" => {}
            _ => return Err(CheckpointError::Malformed(format!("unknown record {name}"))),
        }
    }
    let mut stats = RunningStats::new();
    for (name, mean) in means {
        let var = vars
            .remove(&name)
            .filter(|v| v.len() == mean.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("running variance of {name} missing or mismatched")))?;
        let flags = meta.values(&format!("stat.flags:{name}"))?;
        let [init, eps, momentum] = flags else {
            return Err(CheckpointError::Malformed(format!("stat.flags:{name} needs three values")));
        };
        stats.insert(
            name,
            BatchNormState {
                running_mean: mean,
                running_var: var,
                initialized: *init == 1.0,
                eps: *eps,
                momentum: *momentum,
            },
        );
    }
    if let Some(name) = vars.keys().next() {
        return Err(CheckpointError::Malformed(format!("running mean of {name} missing")));
    }
    let model = Model::from_parts(config, params, stats)?;
    for (which, moments) in [("m", &adam_m), ("v", &adam_v)] {
        for (name, t) in &model.params {
            match moments.get(name) {
                Some(v) if v.len() == t.numel() => {}
                _ => return Err(CheckpointError::Malformed(format!("adam.{which} for {name} missing or mismatched"))),
            }
        }
        if moments.len() != model.params.len() {
            return Err(CheckpointError::Malformed(format!("adam.{which} has entries for unknown parameters")));
        }
    }

    let seed_words = meta.values("rng.seed")?;
    if seed_words.len() != 8 {
        return Err(CheckpointError::Malformed("rng.seed needs 8 words".into()));
    }
    let mut seed = [0u8; 32];
    for (chunk, &w) in seed.chunks_exact_mut(4).zip(seed_words) {
        chunk.copy_from_slice(&(meta.small(w, "rng.seed")? as u32).to_le_bytes());
    }
    let word_pos = meta.u64("rng.word_pos_lo")? as u128 | ((meta.u64("rng.word_pos_hi")? as u128) << 64);

    let window = meta.values("pre.window")?;
    let tiles = meta.values("pre.tiles")?;
    let crop = meta.values("pre.crop")?;
    let ([lo, hi], [ty, tx], [ch, cw]) = (window, tiles, crop) else {
        return Err(CheckpointError::Malformed("preprocessing metadata needs pairs".into()));
    };
    let (ch, cw) = (meta.small(*ch, "pre.crop")?, meta.small(*cw, "pre.crop")?);
    let preprocess = PreprocessConfig {
        window_lo: *lo,
        window_hi: *hi,
        clahe: ClaheConfig {
            clip_limit: meta.f64("pre.clip_limit")?,
            tiles: (meta.small(*ty, "pre.tiles")?, meta.small(*tx, "pre.tiles")?),
        },
        crop: (ch > 0 && cw > 0).then_some((ch, cw)),
    };

    let stage = meta.f64("train.stage")?;
    Ok(Checkpoint {
        model,
        adam: AdamState {
            step: meta.u64("adam.step")?,
            m: adam_m,
            v: adam_v,
        },
        stage: meta.small(stage, "train.stage")? as u8,
        epoch: meta.usize("train.epoch")?,
        base_lr: meta.f64("train.base_lr")?,
        lr_decays: meta.u64("train.lr_decays")? as u32,
        lr: meta.f64("train.lr")?,
        epochs_since_improvement: meta.usize("train.epochs_since_improvement")?,
        best_val_dsc: meta.f64("train.best_val_dsc")?,
        best_epoch: meta.usize("train.best_epoch")?,
        val_dsc: meta.f64("train.val_dsc")?,
        loss: LossConfig {
            kind: if meta.flag("loss.tversky")? {
                LossKind::Tversky
            } else {
                LossKind::Dice
            },
            alpha: meta.f64("loss.alpha")?,
            beta: meta.f64("loss.beta")?,
            smooth: meta.f64("loss.smooth")?,
            include_background: meta.flag("loss.include_background")?,
            dice_factor_two: meta.flag("loss.dice_factor_two")?,
        },
        preprocess,
        rng: RngState {
            seed,
            stream: meta.u64("rng.stream")?,
            word_pos,
        },
    })
}
