//! Run configuration and its flat `key=value` text form.
//!
//! ```text
//! # comments start with '#'
//! depth=4
//! lr=1e-4
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{ClassWeights, Loss, LossKind};
use crate::unet::UNetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub batchnorm: bool,
    pub loss: LossKind,
    pub weights: ClassWeights,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub image_size: usize,
    pub augment: bool,
    /// Negative control: pair every training image with another image's mask.
    pub shuffle_labels: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            base_channels: 16,
            batchnorm: true,
            loss: LossKind::WeightedCe,
            weights: ClassWeights::default(),
            alpha: 1.0,
            beta: 1.0,
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            image_size: 128,
            augment: true,
            shuffle_labels: false,
        }
    }
}

pub const KEYS: [&str; 18] = [
    "depth",
    "base_channels",
    "batchnorm",
    "loss",
    "w_background",
    "w_bvg_plus",
    "w_bvg_minus",
    "w_border",
    "alpha",
    "beta",
    "lr",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
    "image_size",
    "augment",
    "shuffle_labels",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("`{value}` is not a boolean"))),
    }
}

impl RunConfig {
    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            batchnorm: self.batchnorm,
        }
    }

    pub fn loss_fn(&self) -> Loss {
        Loss {
            kind: self.loss,
            weights: self.weights,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    /// Sets one key without validating cross-field constraints.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "depth" => self.depth = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "batchnorm" => self.batchnorm = parse_bool(key, value)?,
            "loss" => self.loss = value.parse().map_err(|m: String| Error::config(key, m))?,
            "w_background" => self.weights.background = parse(key, value)?,
            "w_bvg_plus" => self.weights.bvg_plus = parse(key, value)?,
            "w_bvg_minus" => self.weights.bvg_minus = parse(key, value)?,
            "w_border" => self.weights.border = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "shuffle_labels" => self.shuffle_labels = parse_bool(key, value)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "depth" => self.depth.to_string(),
            "base_channels" => self.base_channels.to_string(),
            "batchnorm" => self.batchnorm.to_string(),
            "loss" => self.loss.as_str().to_string(),
            "w_background" => self.weights.background.to_string(),
            "w_bvg_plus" => self.weights.bvg_plus.to_string(),
            "w_bvg_minus" => self.weights.bvg_minus.to_string(),
            "w_border" => self.weights.border.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "lr" => format!("{:e}", self.lr),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "augment" => self.augment.to_string(),
            "shuffle_labels" => self.shuffle_labels.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.unet().validate()?;
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("{} (must be positive)", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if self.loss == LossKind::CeSoftDice
            && (!(self.alpha >= 0.0 && self.beta >= 0.0) || (self.alpha == 0.0 && self.beta == 0.0))
        {
            return Err(Error::config("alpha", "alpha and beta must be nonnegative and not both zero"));
        }
        let m = self.unet().size_multiple();
        if self.image_size == 0 || self.image_size % m != 0 {
            return Err(Error::config(
                "image_size",
                format!("{} (must be a multiple of {m} for depth {})", self.image_size, self.depth),
            ));
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Invalid(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies overrides of the form `key=value`.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then command-line overrides; validated.
    pub fn parse(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(text) = file_text {
            cfg.apply_text(text)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its effective value, one per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }
}

/// depth {2,4,6} x batchnorm {on,off} x loss {weighted_ce, ce_soft_dice} x
/// lr {1e-3, 1e-4, 1e-5}, all other fields from `base`.
pub fn default_grid(base: &RunConfig) -> Vec<RunConfig> {
    let mut grid = Vec::with_capacity(36);
    for depth in [2, 4, 6] {
        for batchnorm in [true, false] {
            for loss in [LossKind::WeightedCe, LossKind::CeSoftDice] {
                for lr in [1e-3, 1e-4, 1e-5] {
                    grid.push(RunConfig {
                        depth,
                        batchnorm,
                        loss,
                        lr,
                        ..base.clone()
                    });
                }
            }
        }
    }
    grid
}
