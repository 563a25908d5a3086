//! Flat `key = value` run configuration.
//!
//! One pair per line, `#` starts a comment, unknown keys are rejected. Any
//! key can be overridden from the environment as `DDMT_<KEY>` (upper case).
//! [`RunConfig::echo`] renders every key in a fixed order and parses back to
//! an identical config.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::AnomalyKind;
use crate::diffusion::ReverseVariance;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Diffusion reconstruction with neighbor masks.
    Full,
    /// Diffusion reconstruction with unrestricted attention.
    NoAdnm,
    /// Autoencoder reconstruction error alone.
    NoDdt,
    /// Plain Transformer trained to reproduce its input.
    Transformer,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::NoAdnm, Mode::NoDdt, Mode::Transformer];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoAdnm => "no_adnm",
            Mode::NoDdt => "no_ddt",
            Mode::Transformer => "transformer",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected full, no_adnm, no_ddt or transformer)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,

    /// Training series; a synthetic benchmark is generated when unset.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub test_labels_path: Option<PathBuf>,
    pub synth_channels: usize,
    pub synth_train_len: usize,
    pub synth_test_len: usize,
    pub synth_kinds: Vec<AnomalyKind>,
    pub data_seed: u64,

    pub anomaly_ratio: f64,
    pub window_size: usize,

    pub steps: usize,
    pub beta1: f64,
    pub beta_t: f64,
    pub t_infer: usize,
    pub reverse_variance: ReverseVariance,
    /// Independent reconstructions averaged per window when scoring.
    pub score_samples: usize,

    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,

    pub ae_epochs: usize,
    pub ae_lr: f64,
    pub mask_cap: usize,
    pub rho: f64,

    pub ablation_seeds: Vec<u64>,
    pub sweep_windows: Vec<usize>,
    pub sweep_rhos: Vec<f64>,
    pub sweep_steps: Vec<usize>,
    /// Which sweeps `ablate` runs, out of `window`, `rho` and `steps`.
    pub sweeps: Vec<Sweep>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Window,
    Rho,
    Steps,
}

impl Sweep {
    pub fn as_str(self) -> &'static str {
        match self {
            Sweep::Window => "window",
            Sweep::Rho => "rho",
            Sweep::Steps => "steps",
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [Sweep::Window, Sweep::Rho, Sweep::Steps]
            .into_iter()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| format!("unknown sweep `{s}` (expected window, rho or steps)"))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            seed: 0,
            train_path: None,
            test_path: None,
            test_labels_path: None,
            synth_channels: 5,
            synth_train_len: 5000,
            synth_test_len: 5000,
            synth_kinds: vec![AnomalyKind::Spike, AnomalyKind::LevelShift],
            data_seed: 0,
            anomaly_ratio: 0.05,
            window_size: 100,
            steps: 500,
            beta1: 1e-4,
            beta_t: 0.02,
            t_infer: 50,
            reverse_variance: ReverseVariance::Posterior,
            score_samples: 1,
            d_model: 64,
            heads: 4,
            layers: 2,
            ffn: 128,
            lr: 1e-4,
            batch: 256,
            max_epochs: 10,
            patience: 3,
            ae_epochs: 5,
            ae_lr: 1e-3,
            mask_cap: 5,
            rho: 0.6,
            ablation_seeds: vec![1, 2, 3],
            sweep_windows: vec![25, 50, 100],
            sweep_rhos: vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            sweep_steps: vec![50, 100, 250, 500],
            sweeps: vec![Sweep::Window, Sweep::Rho, Sweep::Steps],
        }
    }
}

pub const KEYS: &[&str] = &[
    "mode",
    "seed",
    "train_path",
    "test_path",
    "test_labels_path",
    "synth_channels",
    "synth_train_len",
    "synth_test_len",
    "synth_kinds",
    "data_seed",
    "anomaly_ratio",
    "window_size",
    "steps",
    "beta1",
    "beta_t",
    "t_infer",
    "reverse_variance",
    "score_samples",
    "d_model",
    "heads",
    "layers",
    "ffn",
    "lr",
    "batch",
    "max_epochs",
    "patience",
    "ae_epochs",
    "ae_lr",
    "mask_cap",
    "rho",
    "ablation_seeds",
    "sweep_windows",
    "sweep_rhos",
    "sweep_steps",
    "sweeps",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => self.mode = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "train_path" => self.train_path = path(v),
            "test_path" => self.test_path = path(v),
            "test_labels_path" => self.test_labels_path = path(v),
            "synth_channels" => self.synth_channels = parse(key, v)?,
            "synth_train_len" => self.synth_train_len = parse(key, v)?,
            "synth_test_len" => self.synth_test_len = parse(key, v)?,
            "synth_kinds" => self.synth_kinds = parse_list(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "anomaly_ratio" => self.anomaly_ratio = parse(key, v)?,
            "window_size" => self.window_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta_t" => self.beta_t = parse(key, v)?,
            "t_infer" => self.t_infer = parse(key, v)?,
            "reverse_variance" => {
                self.reverse_variance = ReverseVariance::parse(v)
                    .ok_or_else(|| Error::config(key, format!("expected posterior or beta, got `{v}`")))?
            }
            "score_samples" => self.score_samples = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "ffn" => self.ffn = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "ae_epochs" => self.ae_epochs = parse(key, v)?,
            "ae_lr" => self.ae_lr = parse(key, v)?,
            "mask_cap" => self.mask_cap = parse(key, v)?,
            "rho" => self.rho = parse(key, v)?,
            "ablation_seeds" => self.ablation_seeds = parse_list(key, v)?,
            "sweep_windows" => self.sweep_windows = parse_list(key, v)?,
            "sweep_rhos" => self.sweep_rhos = parse_list(key, v)?,
            "sweep_steps" => self.sweep_steps = parse_list(key, v)?,
            "sweeps" => self.sweeps = parse_list(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Current value of `key` in the textual form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "mode" => self.mode.to_string(),
            "seed" => self.seed.to_string(),
            "train_path" => show_path(&self.train_path),
            "test_path" => show_path(&self.test_path),
            "test_labels_path" => show_path(&self.test_labels_path),
            "synth_channels" => self.synth_channels.to_string(),
            "synth_train_len" => self.synth_train_len.to_string(),
            "synth_test_len" => self.synth_test_len.to_string(),
            "synth_kinds" => join(&self.synth_kinds),
            "data_seed" => self.data_seed.to_string(),
            "anomaly_ratio" => self.anomaly_ratio.to_string(),
            "window_size" => self.window_size.to_string(),
            "steps" => self.steps.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta_t" => self.beta_t.to_string(),
            "t_infer" => self.t_infer.to_string(),
            "reverse_variance" => self.reverse_variance.as_str().to_string(),
            "score_samples" => self.score_samples.to_string(),
            "d_model" => self.d_model.to_string(),
            "heads" => self.heads.to_string(),
            "layers" => self.layers.to_string(),
            "ffn" => self.ffn.to_string(),
            "lr" => self.lr.to_string(),
            "batch" => self.batch.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "ae_epochs" => self.ae_epochs.to_string(),
            "ae_lr" => self.ae_lr.to_string(),
            "mask_cap" => self.mask_cap.to_string(),
            "rho" => self.rho.to_string(),
            "ablation_seeds" => join(&self.ablation_seeds),
            "sweep_windows" => join(&self.sweep_windows),
            "sweep_rhos" => join(&self.sweep_rhos),
            "sweep_steps" => join(&self.sweep_steps),
            "sweeps" => join(&self.sweeps),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of the current values, without
    /// validating the result.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {}: expected `key = value`", n + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Defaults overlaid with `text`, validated.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the optional file, then `DDMT_<KEY>` variables from `env`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text)?;
        }
        for (name, value) in env {
            if let Some(key) = name.strip_prefix("DDMT_") {
                cfg.set(&key.to_ascii_lowercase(), &value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key as a `key = value` line, in a fixed order.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 13] = [
            ("synth_channels", self.synth_channels),
            ("window_size", self.window_size),
            ("score_samples", self.score_samples),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn", self.ffn),
            ("batch", self.batch),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("synth_train_len", self.synth_train_len),
            ("synth_test_len", self.synth_test_len),
            ("steps", self.steps),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.window_size < 2 {
            return Err(Error::config("window_size", "must be at least 2"));
        }
        if self.steps < 2 {
            return Err(Error::config("steps", "must be at least 2"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < self.beta_t && self.beta_t < 1.0) {
            return Err(Error::config("beta_t", "need 0 < beta1 < beta_t < 1"));
        }
        if self.t_infer > self.steps {
            return Err(Error::config("t_infer", format!("must not exceed steps ({})", self.steps)));
        }
        if !(self.anomaly_ratio > 0.0 && self.anomaly_ratio < 1.0) {
            return Err(Error::config("anomaly_ratio", "must lie in (0, 1)"));
        }
        if crate::data::ceil_count(self.anomaly_ratio * self.window_size as f64) >= self.window_size {
            return Err(Error::config("anomaly_ratio", "would mark every timestamp of a window as a seed"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("rho", "must lie in (0, 1)"));
        }
        for (key, v) in [("lr", self.lr), ("ae_lr", self.ae_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a positive number"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config("heads", format!("must divide d_model ({})", self.d_model)));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config("d_model", "must be even"));
        }
        if self.synth_kinds.is_empty() {
            return Err(Error::config("synth_kinds", "needs at least one anomaly kind"));
        }
        if self.train_path.is_some() != self.test_path.is_some() {
            return Err(Error::config(
                if self.train_path.is_some() { "test_path" } else { "train_path" },
                "train_path and test_path must be given together",
            ));
        }
        if self.train_path.is_none() && (self.synth_train_len < 100 || self.synth_test_len < 100) {
            return Err(Error::config("synth_train_len", "synthetic parts need at least 100 timestamps"));
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::config("ablation_seeds", "needs at least one seed"));
        }
        if let Some(w) = self.sweep_windows.iter().find(|&&w| w < 2) {
            return Err(Error::config("sweep_windows", format!("window {w} is too small")));
        }
        if let Some(r) = self.sweep_rhos.iter().find(|&&r| !(r > 0.0 && r < 1.0)) {
            return Err(Error::config("sweep_rhos", format!("{r} is outside (0, 1)")));
        }
        if let Some(s) = self.sweep_steps.iter().find(|&&s| s < 2) {
            return Err(Error::config("sweep_steps", format!("{s} steps is too few")));
        }
        Ok(())
    }

    /// Inference depth for a run with `steps` diffusion steps, keeping the
    /// configured fraction `t_infer / steps`.
    pub fn t_infer_for(&self, steps: usize) -> usize {
        if steps == self.steps {
            return self.t_infer;
        }
        ((self.t_infer as f64 * steps as f64 / self.steps as f64).round() as usize).min(steps)
    }
}
