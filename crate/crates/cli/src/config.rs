//! `key = value` settings files. Built-in defaults are overridden by the
//! file, which command-line flags override in turn.

use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use unetdr::losses::LossKind;
use unetdr::model::{ModelConfig, ResidualMode};
use unetdr::trainer::TrainConfig;

#[derive(Debug, Clone)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Add horizontally and vertically flipped copies of every training case.
    pub flips: bool,
    pub jobs: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            flips: true,
            jobs: 1,
        }
    }
}

pub const KEYS: &[&str] = &[
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "decay_factor",
    "plateau_patience",
    "early_stop_patience",
    "batch_size",
    "stage1_max_epochs",
    "stage2_epochs",
    "folds",
    "seed",
    "stop_at_val_dsc",
    "loss",
    "alpha",
    "beta",
    "smooth",
    "include_background",
    "dice_factor_two",
    "depth",
    "base_channels",
    "num_classes",
    "dilation_rates",
    "residual_mode",
    "window_lo",
    "window_hi",
    "clip_limit",
    "tiles",
    "crop",
    "zoom_min",
    "zoom_max",
    "rotation_deg",
    "shift",
    "shear_deg",
    "crop_jitter",
    "flip_prob",
    "flips",
    "jobs",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| anyhow!("invalid value {value:?} for {key}"))
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    let (a, b) = value
        .split_once('x')
        .ok_or_else(|| anyhow!("{key} must look like 8x8, got {value:?}"))?;
    Ok((parse(key, a)?, parse(key, b)?))
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "lr" => t.lr = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "decay_factor" => t.decay_factor = parse(key, value)?,
            "plateau_patience" => t.plateau_patience = parse(key, value)?,
            "early_stop_patience" => t.early_stop_patience = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "stage1_max_epochs" => t.stage1_max_epochs = parse(key, value)?,
            "stage2_epochs" => t.stage2_epochs = parse(key, value)?,
            "folds" => t.folds = parse(key, value)?,
            "seed" => {
                t.seed = parse(key, value)?;
                self.model.seed = t.seed;
            }
            "stop_at_val_dsc" => t.stop_at_val_dsc = if value == "none" { None } else { Some(parse(key, value)?) },
            "loss" => t.loss.kind = LossKind::from_str(value)?,
            "alpha" => t.loss.alpha = parse(key, value)?,
            "beta" => t.loss.beta = parse(key, value)?,
            "smooth" => t.loss.smooth = parse(key, value)?,
            "include_background" => t.loss.include_background = parse(key, value)?,
            "dice_factor_two" => t.loss.dice_factor_two = parse(key, value)?,
            "depth" => self.model.depth = parse(key, value)?,
            "base_channels" => self.model.base_channels = parse(key, value)?,
            "num_classes" => self.model.num_classes = parse(key, value)?,
            "dilation_rates" => {
                self.model.dilation_rates = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?;
            }
            "residual_mode" => self.model.residual_mode = ResidualMode::from_str(value).map_err(|e| anyhow!("{e}"))?,
            "window_lo" => t.preprocess.window_lo = parse(key, value)?,
            "window_hi" => t.preprocess.window_hi = parse(key, value)?,
            "clip_limit" => t.preprocess.clahe.clip_limit = parse(key, value)?,
            "tiles" => t.preprocess.clahe.tiles = parse_pair(key, value)?,
            "crop" => t.preprocess.crop = if value == "none" { None } else { Some(parse_pair(key, value)?) },
            "zoom_min" => t.augment.zoom.0 = parse(key, value)?,
            "zoom_max" => t.augment.zoom.1 = parse(key, value)?,
            "rotation_deg" => t.augment.rotation_deg = parse(key, value)?,
            "shift" => t.augment.shift = parse(key, value)?,
            "shear_deg" => t.augment.shear_deg = parse(key, value)?,
            "crop_jitter" => t.augment.crop_jitter = parse(key, value)?,
            "flip_prob" => t.augment.flip_prob = parse(key, value)?,
            "flips" => self.flips = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            other => bail!("unknown setting {other:?}; known settings: {}", KEYS.join(", ")),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {line:?}", n + 1))?;
            self.set(key.trim(), value.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text).with_context(|| format!("in config {}", path.display()))
    }
}
