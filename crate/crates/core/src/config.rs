//! Model, data and training configuration plus the flat `key = value` file
//! format used by the CLI.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' any*
//! entry   := key ws* '=' ws* value ws*
//! key     := section '.' name        (e.g. model.dim, train.lr)
//! value   := integer | float | word
//! ```
//!
//! Later entries override earlier ones; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Early,
    Late,
    Cascade,
    Parallel,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::Early,
        FusionStrategy::Late,
        FusionStrategy::Cascade,
        FusionStrategy::Parallel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Early => "early",
            FusionStrategy::Late => "late",
            FusionStrategy::Cascade => "cascade",
            FusionStrategy::Parallel => "parallel",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionStrategy::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy `{s}`")))
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modalities: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Number of trailing layers that carry the modality synthesizer.
    pub synth_layers: usize,
    pub classes: usize,
    pub fusion: FusionStrategy,
    /// Odd side length of the cubic depthwise kernel.
    pub conv_kernel: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modalities: 3,
            frames: 4,
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
            dim: 32,
            heads: 4,
            layers: 4,
            synth_layers: 2,
            classes: 4,
            fusion: FusionStrategy::Parallel,
            conv_kernel: 3,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("modalities", self.modalities),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("classes", self.classes),
            ("conv_kernel", self.conv_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "frame {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.synth_layers == 0 || self.synth_layers > self.layers {
            return Err(Error::Config(format!(
                "synth_layers {} must lie in 1..={}",
                self.synth_layers, self.layers
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv_kernel {} must be odd", self.conv_kernel)));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Patch grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    /// Spatial tokens per frame.
    pub fn spatial(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// First layer index that carries the synthesizer.
    pub fn first_synth_layer(&self) -> usize {
        self.layers - self.synth_layers
    }
}

/// Synthetic dataset parameters. Clip geometry comes from the model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_samples: 512,
            eval_samples: 256,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        // Zero is allowed so a run can be frozen; negative or NaN is not.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.lr must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("train.beta1/beta2 must lie in [0,1) and train.eps be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything a CLI run needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Applies one dotted `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "model.modalities" => m.modalities = parse(key, value)?,
            "model.frames" => m.frames = parse(key, value)?,
            "model.height" => m.height = parse(key, value)?,
            "model.width" => m.width = parse(key, value)?,
            "model.channels" => m.channels = parse(key, value)?,
            "model.patch" => m.patch = parse(key, value)?,
            "model.dim" => m.dim = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.layers" => m.layers = parse(key, value)?,
            "model.synth_layers" => m.synth_layers = parse(key, value)?,
            "model.classes" => m.classes = parse(key, value)?,
            "model.fusion" => m.fusion = value.parse()?,
            "model.conv_kernel" => m.conv_kernel = parse(key, value)?,
            "model.init_std" => m.init_std = parse(key, value)?,
            "model.seed" => m.seed = parse(key, value)?,
            "data.train_samples" => d.train_samples = parse(key, value)?,
            "data.eval_samples" => d.eval_samples = parse(key, value)?,
            "data.noise_std" => d.noise_std = parse(key, value)?,
            "data.seed" => d.seed = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.learning_rate = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Sets every seed at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.data.noise_std >= 0.0 && self.data.noise_std.is_finite()) {
            return Err(Error::Config("data.noise_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Applies the entries of a flat config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_flat(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Serializes every key, in a fixed order, in the flat format. Floats use
    /// Rust's shortest round-trip formatting, so parsing the text back gives
    /// identical values.
    pub fn to_flat_text(&self) -> String {
        let m = &self.model;
        let d = &self.data;
        let t = &self.train;
        let entries: Vec<(&str, String)> = vec![
            ("model.modalities", m.modalities.to_string()),
            ("model.frames", m.frames.to_string()),
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.patch", m.patch.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.layers", m.layers.to_string()),
            ("model.synth_layers", m.synth_layers.to_string()),
            ("model.classes", m.classes.to_string()),
            ("model.fusion", m.fusion.to_string()),
            ("model.conv_kernel", m.conv_kernel.to_string()),
            ("model.init_std", format!("{:?}", m.init_std)),
            ("model.seed", m.seed.to_string()),
            ("data.train_samples", d.train_samples.to_string()),
            ("data.eval_samples", d.eval_samples.to_string()),
            ("data.noise_std", format!("{:?}", d.noise_std)),
            ("data.seed", d.seed.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", format!("{:?}", t.learning_rate)),
            ("train.weight_decay", format!("{:?}", t.weight_decay)),
            ("train.beta1", format!("{:?}", t.beta1)),
            ("train.beta2", format!("{:?}", t.beta2)),
            ("train.eps", format!("{:?}", t.eps)),
            ("train.seed", t.seed.to_string()),
        ];
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Parses flat `key = value` text into ordered assignments; later keys win.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() || !k.contains('.') {
            return Err(Error::Config(format!("line {}: malformed entry `{line}`", n + 1)));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}
