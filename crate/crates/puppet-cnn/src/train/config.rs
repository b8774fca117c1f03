//! Training configuration and the `key = value` config-file dialect.
//!
//! Lines hold one `key = value` pair; `#` starts a comment anywhere;
//! blank lines are skipped. Unknown keys are errors so typos surface
//! immediately.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::puppet::{Mode, PuppetTemplate, DEFAULT_D_MAX};
use crate::train::adam::AdamHyper;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub mode: Mode,
    pub depth: usize,
    pub depth_adapt: bool,
    pub param_adapt: bool,
    pub val_fraction: f64,
    pub data_dir: PathBuf,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    /// Square probe-image side used when a command needs an input size
    /// without a dataset (depth sweeps).
    pub image_size: usize,
    pub d_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            channels: vec![8, 16, 32],
            kernel: 3,
            num_classes: 4,
            in_channels: 1,
            mode: Mode::Plain,
            depth: 1,
            depth_adapt: true,
            param_adapt: true,
            val_fraction: 0.2,
            data_dir: PathBuf::from("data"),
            checkpoint_path: PathBuf::from("model.ckpt"),
            log_path: PathBuf::from("metrics.csv"),
            image_size: 16,
            d_max: DEFAULT_D_MAX,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.image_size < 1 {
            return Err(Error::config("image_size must be at least 1"));
        }
        // template and depth constraints share the model constructors
        self.template()?;
        if self.depth < 1 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.d_max < 1 {
            return Err(Error::config("d_max must be at least 1"));
        }
        Ok(())
    }

    pub fn template(&self) -> Result<PuppetTemplate> {
        PuppetTemplate::new(
            self.channels.clone(),
            self.kernel,
            self.num_classes,
            self.in_channels,
            self.mode,
        )
        .map_err(|e| Error::config(e.to_string()))
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Apply one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::config(format!("invalid value '{value}' for key '{key}'"))
            })
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "channels" => {
                let mut channels = Vec::new();
                for part in value.split(',') {
                    channels.push(num(key, part.trim())?);
                }
                self.channels = channels;
            }
            "kernel" => self.kernel = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "in_channels" => self.in_channels = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "depth" => self.depth = num(key, value)?,
            "depth_adapt" => self.depth_adapt = parse_bool(key, value)?,
            "param_adapt" => self.param_adapt = parse_bool(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint_path = PathBuf::from(value),
            "log" => self.log_path = PathBuf::from(value),
            "image_size" => self.image_size = num(key, value)?,
            "d_max" => self.d_max = num(key, value)?,
            other => {
                return Err(Error::config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_str(&text)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::config(format!(
            "invalid value '{other}' for key '{key}' (expected true or false)"
        ))),
    }
}
