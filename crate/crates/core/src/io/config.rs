//! Flat `key = value` run configuration with `#` comments and dotted keys.
//!
//! Later assignments win, so layering a file over the defaults and then
//! command-line overrides over the file gives flag > file > default.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::memory::{EvalMode, ForgetGate};
use crate::model::{ChannelConfig, ModelConfig, Preset, STAGES};
use crate::train::{LossWeights, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions {
    /// Probability above which a pixel counts as foreground.
    pub threshold: f64,
    pub hd_percentile: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            hd_percentile: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub samples: usize,
    pub test_samples: usize,
    pub size: usize,
    pub difficulty: f64,
    /// Directory of `NAME.ppm` / `NAME_mask.pgm` pairs; synthetic data when unset.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            test_samples: 50,
            size: 64,
            difficulty: 0.0,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub metrics: MetricOptions,
    pub data: DataConfig,
    pub out: PathBuf,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::preset(Preset::Small),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            metrics: MetricOptions::default(),
            data: DataConfig::default(),
            out: PathBuf::from("runs"),
            checkpoint_every: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "model.preset",
    "model.channels",
    "model.input_channels",
    "model.num_classes",
    "mstm.layers",
    "mstm.pool_kernels",
    "mstm.enable_xlstm",
    "mstm.enable_pooling",
    "mstm.enable_dwconv",
    "mstm.heads",
    "mstm.forget_gate",
    "mstm.chunk_size",
    "mstm.mode",
    "train.lr0",
    "train.decay",
    "train.batch_size",
    "train.epochs",
    "train.checkpoint_every",
    "loss.lambda1",
    "loss.lambda2",
    "metrics.threshold",
    "metrics.hd_percentile",
    "data.samples",
    "data.test_samples",
    "data.size",
    "data.difficulty",
    "data.dir",
    "paths.out",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config {
        key: key.into(),
        msg: format!("cannot parse `{value}`"),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies every assignment in `text` in order, then validates.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(bad(
                    &format!("line {}", n + 1),
                    format!("expected `key = value`, got `{line}`"),
                ));
            };
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model.mstm;
        match key {
            "seed" => self.train.seed = parse(key, value)?,
            "model.preset" => {
                let p: Preset = value.parse()?;
                self.model.channels.channels = ChannelConfig::preset(p).channels;
            }
            "model.channels" => {
                let v = parse_list(key, value)?;
                self.model.channels.channels = v
                    .try_into()
                    .map_err(|_| bad(key, format!("expected {STAGES} comma-separated widths")))?;
            }
            "model.input_channels" => self.model.channels.input_channels = parse(key, value)?,
            "model.num_classes" => self.model.channels.num_classes = parse(key, value)?,
            "mstm.layers" => m.layers = parse(key, value)?,
            "mstm.pool_kernels" => m.pool_kernels = parse_list(key, value)?,
            "mstm.enable_xlstm" => m.enable_xlstm = parse(key, value)?,
            "mstm.enable_pooling" => m.enable_pooling = parse(key, value)?,
            "mstm.enable_dwconv" => m.enable_dwconv = parse(key, value)?,
            "mstm.heads" => m.xlstm.heads = parse(key, value)?,
            "mstm.forget_gate" => {
                m.xlstm.forget = match value {
                    "exponential" => ForgetGate::Exponential,
                    "sigmoid" => ForgetGate::Sigmoid,
                    _ => {
                        return Err(bad(
                            key,
                            format!("expected exponential or sigmoid, got `{value}`"),
                        ))
                    }
                }
            }
            "mstm.chunk_size" => m.xlstm.chunk.chunk_size = parse(key, value)?,
            "mstm.mode" => {
                m.xlstm.chunk.mode = match value {
                    "chunkwise" => EvalMode::Chunkwise,
                    "recurrent" => EvalMode::Recurrent,
                    _ => {
                        return Err(bad(
                            key,
                            format!("expected chunkwise or recurrent, got `{value}`"),
                        ))
                    }
                }
            }
            "train.lr0" => self.train.lr0 = parse(key, value)?,
            "train.decay" => self.train.decay = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "loss.lambda1" => self.loss.bce = parse(key, value)?,
            "loss.lambda2" => self.loss.dice = parse(key, value)?,
            "metrics.threshold" => self.metrics.threshold = parse(key, value)?,
            "metrics.hd_percentile" => self.metrics.hd_percentile = parse(key, value)?,
            "data.samples" => self.data.samples = parse(key, value)?,
            "data.test_samples" => self.data.test_samples = parse(key, value)?,
            "data.size" => self.data.size = parse(key, value)?,
            "data.difficulty" => self.data.difficulty = parse(key, value)?,
            "data.dir" => self.data.dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "paths.out" => self.out = PathBuf::from(value),
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .channels
            .validate()
            .map_err(|e| bad("model.channels", e.to_string()))?;
        self.model
            .mstm
            .validate()
            .map_err(|e| bad("mstm", e.to_string()))?;
        let x = &self.model.mstm.xlstm;
        if x.heads == 0
            || self
                .model
                .channels
                .channels
                .iter()
                .any(|c| c % x.heads != 0)
        {
            return Err(bad("mstm.heads", "must divide every stage width"));
        }
        if x.chunk.chunk_size == 0 {
            return Err(bad("mstm.chunk_size", "must be positive"));
        }
        self.train.validate()?;
        self.loss
            .validate()
            .map_err(|e| bad("loss", e.to_string()))?;
        if !(self.metrics.threshold > 0.0 && self.metrics.threshold < 1.0) {
            return Err(bad("metrics.threshold", "must lie in (0, 1)"));
        }
        if !(self.metrics.hd_percentile > 0.0 && self.metrics.hd_percentile <= 100.0) {
            return Err(bad("metrics.hd_percentile", "must lie in (0, 100]"));
        }
        if self.data.size == 0 || self.data.size % 32 != 0 {
            return Err(bad("data.size", "must be a positive multiple of 32"));
        }
        if !(0.0..=1.0).contains(&self.data.difficulty) {
            return Err(bad("data.difficulty", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Every key with its current value; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = model_text(&self.model);
        let t = &self.train;
        let d = &self.data;
        let _ = writeln!(out, "seed = {}", t.seed);
        let _ = writeln!(out, "train.lr0 = {:?}", t.lr0);
        let _ = writeln!(out, "train.decay = {:?}", t.decay);
        let _ = writeln!(out, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(out, "train.epochs = {}", t.epochs);
        let _ = writeln!(out, "train.checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(out, "loss.lambda1 = {:?}", self.loss.bce);
        let _ = writeln!(out, "loss.lambda2 = {:?}", self.loss.dice);
        let _ = writeln!(out, "metrics.threshold = {:?}", self.metrics.threshold);
        let _ = writeln!(
            out,
            "metrics.hd_percentile = {:?}",
            self.metrics.hd_percentile
        );
        let _ = writeln!(out, "data.samples = {}", d.samples);
        let _ = writeln!(out, "data.test_samples = {}", d.test_samples);
        let _ = writeln!(out, "data.size = {}", d.size);
        let _ = writeln!(out, "data.difficulty = {:?}", d.difficulty);
        let _ = writeln!(
            out,
            "data.dir = {}",
            d.dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        let _ = writeln!(out, "paths.out = {}", self.out.display());
        out
    }
}

/// The `model.*` and `mstm.*` keys needed to rebuild a network.
pub fn model_text(m: &ModelConfig) -> String {
    let c = &m.channels;
    let s = &m.mstm;
    let mut out = String::new();
    let _ = writeln!(out, "model.channels = {}", join(&c.channels));
    let _ = writeln!(out, "model.input_channels = {}", c.input_channels);
    let _ = writeln!(out, "model.num_classes = {}", c.num_classes);
    let _ = writeln!(out, "mstm.layers = {}", s.layers);
    let _ = writeln!(out, "mstm.pool_kernels = {}", join(&s.pool_kernels));
    let _ = writeln!(out, "mstm.enable_xlstm = {}", s.enable_xlstm);
    let _ = writeln!(out, "mstm.enable_pooling = {}", s.enable_pooling);
    let _ = writeln!(out, "mstm.enable_dwconv = {}", s.enable_dwconv);
    let _ = writeln!(out, "mstm.heads = {}", s.xlstm.heads);
    let forget = match s.xlstm.forget {
        ForgetGate::Exponential => "exponential",
        ForgetGate::Sigmoid => "sigmoid",
    };
    let _ = writeln!(out, "mstm.forget_gate = {forget}");
    let _ = writeln!(out, "mstm.chunk_size = {}", s.xlstm.chunk.chunk_size);
    let mode = match s.xlstm.chunk.mode {
        EvalMode::Chunkwise => "chunkwise",
        EvalMode::Recurrent => "recurrent",
    };
    let _ = writeln!(out, "mstm.mode = {mode}");
    out
}

/// Parses text holding only model keys.
pub fn parse_model_text(text: &str) -> Result<ModelConfig> {
    let mut cfg = RunConfig::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad("model", format!("bad line `{line}`")))?;
        let k = k.trim();
        if !(k.starts_with("model.") || k.starts_with("mstm.")) {
            return Err(bad(k, "not a model key"));
        }
        cfg.set(k, v.trim())?;
    }
    cfg.model.validate()?;
    Ok(cfg.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.train.lr0, 1e-4);
        assert_eq!(c.train.decay, 0.98);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.epochs, 200);
        assert_eq!((c.loss.bce, c.loss.dice), (2.0, 1.0));
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn single_override() {
        let c = RunConfig::parse("# comment\ntrain.lr0 = 0.01  # trailing\n").unwrap();
        assert_eq!(c.train.lr0, 0.01);
        assert_eq!(
            c,
            RunConfig {
                train: TrainConfig {
                    lr0: 0.01,
                    ..Default::default()
                },
                ..Default::default()
            }
        );
    }

    #[test]
    fn unknown_and_invalid_keys_are_named() {
        let e = RunConfig::parse("train.decya = 0.9")
            .unwrap_err()
            .to_string();
        assert!(e.contains("train.decya") && e.contains("unknown"), "{e}");
        let e = RunConfig::parse("train.decay = 1.5")
            .unwrap_err()
            .to_string();
        assert!(e.contains("train.decay"), "{e}");
        let e = RunConfig::parse("train.epochs = many")
            .unwrap_err()
            .to_string();
        assert!(e.contains("train.epochs"), "{e}");
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("model.channels = 8,16,32").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::parse("model.preset = large\nmstm.enable_pooling = false\nmstm.mode = recurrent\ndata.dir = /tmp/x\nseed = 7").unwrap();
        c.train.lr0 = 3.3e-4;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(parse_model_text(&model_text(&c.model)).unwrap(), c.model);
    }

    #[test]
    fn later_assignment_wins() {
        let mut c = RunConfig::parse("train.epochs = 5\nseed = 3").unwrap();
        c.apply_text("train.epochs = 9").unwrap();
        assert_eq!((c.train.epochs, c.train.seed), (9, 3));
    }

    #[test]
    fn every_listed_key_is_accepted() {
        let text = RunConfig::default().to_text();
        let written: Vec<&str> = text
            .lines()
            .map(|l| l.split('=').next().unwrap().trim())
            .collect();
        for k in KEYS.iter().filter(|&&k| k != "model.preset") {
            assert!(written.contains(k), "{k} missing from serialized text");
        }
        assert_eq!(written.len(), KEYS.len() - 1);
    }
}
