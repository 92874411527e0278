//! Run configuration as plain `section.key = value` text.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::decoder::{AttentionMode, ModelConfig};
use crate::matchloss::LossConfig;
use crate::numcore::AdamWConfig;
use crate::scene::GenParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: AttentionMode,
    pub seed: u64,
    pub voxel_size: f64,
    /// Scenes above this many points are cropped before voxelization.
    pub max_points: usize,
    /// The last `val_count` scenes of a dataset are held out.
    pub val_count: usize,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub poly_power: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            mode: AttentionMode::Rpe,
            seed: 0,
            voxel_size: 0.05,
            max_points: 250_000,
            val_count: 20,
            checkpoint_every: 10,
            eval_every: 1,
            poly_power: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub top_k: usize,
    pub min_tokens: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { top_k: crate::metrics::DEFAULT_TOP_K, min_tokens: crate::metrics::DEFAULT_MIN_TOKENS }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: AdamWConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub data: GenParams,
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| format!("bad value {value:?}: {e}"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "on" => Ok(true),
        "false" | "off" => Ok(false),
        _ => Err(format!("bad boolean {value:?} (expected true/false or on/off)")),
    }
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse(v.trim())).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, l, o, t, e, d) = (&self.model, &self.loss, &self.optim, &self.train, &self.eval, &self.data);
        vec![
            ("decoder.layers", m.layers.to_string()),
            ("decoder.heads", m.heads.to_string()),
            ("decoder.d", m.d.to_string()),
            ("decoder.ffn", m.ffn.to_string()),
            ("decoder.queries", m.queries.to_string()),
            ("decoder.num_classes", m.num_classes.to_string()),
            ("decoder.refinement", m.refine.to_string()),
            ("encoder.knn", m.knn.to_string()),
            ("rpe.quant", m.rpe_quant.to_string()),
            ("rpe.len", m.rpe_len.to_string()),
            ("ape.enabled", m.ape.to_string()),
            ("ape.temperature", m.ape_temperature.to_string()),
            ("loss.cls", l.weights.cls.to_string()),
            ("loss.bce", l.weights.bce.to_string()),
            ("loss.dice", l.weights.dice.to_string()),
            ("loss.center", l.weights.center.to_string()),
            ("loss.no_object_weight", l.no_object_weight.to_string()),
            ("loss.center_match", l.center_match.to_string()),
            ("loss.center_loss", l.center_loss.to_string()),
            ("optim.lr", o.lr.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.poly_power", t.poly_power.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.mode", t.mode.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.voxel_size", t.voxel_size.to_string()),
            ("train.max_points", t.max_points.to_string()),
            ("train.val_count", t.val_count.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("eval.top_k", e.top_k.to_string()),
            ("eval.min_tokens", e.min_tokens.to_string()),
            ("data.extent", join(&d.extent)),
            ("data.min_instances", d.min_instances.to_string()),
            ("data.max_instances", d.max_instances.to_string()),
            ("data.shapes", d.shapes.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(",")),
            ("data.noise", d.noise.to_string()),
            ("data.clutter_fraction", d.clutter_fraction.to_string()),
            ("data.num_classes", d.num_classes.to_string()),
            ("data.density", d.density.to_string()),
            ("data.min_gap", d.min_gap.to_string()),
        ]
    }

    /// Assigns one key. Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        let (m, l, o, t, e, d) = (&mut self.model, &mut self.loss, &mut self.optim, &mut self.train, &mut self.eval, &mut self.data);
        match key {
            "decoder.layers" => m.layers = parse(value)?,
            "decoder.heads" => m.heads = parse(value)?,
            "decoder.d" => m.d = parse(value)?,
            "decoder.ffn" => m.ffn = parse(value)?,
            "decoder.queries" => m.queries = parse(value)?,
            "decoder.num_classes" => m.num_classes = parse(value)?,
            "decoder.refinement" => m.refine = parse_bool(value)?,
            "encoder.knn" => m.knn = parse(value)?,
            "rpe.quant" => m.rpe_quant = parse(value)?,
            "rpe.len" => m.rpe_len = parse(value)?,
            "ape.enabled" => m.ape = parse_bool(value)?,
            "ape.temperature" => m.ape_temperature = parse(value)?,
            "loss.cls" => l.weights.cls = parse(value)?,
            "loss.bce" => l.weights.bce = parse(value)?,
            "loss.dice" => l.weights.dice = parse(value)?,
            "loss.center" => l.weights.center = parse(value)?,
            "loss.no_object_weight" => l.no_object_weight = parse(value)?,
            "loss.center_match" => l.center_match = parse_bool(value)?,
            "loss.center_loss" => l.center_loss = parse_bool(value)?,
            "optim.lr" => o.lr = parse(value)?,
            "optim.weight_decay" => o.weight_decay = parse(value)?,
            "optim.beta1" => o.beta1 = parse(value)?,
            "optim.beta2" => o.beta2 = parse(value)?,
            "optim.eps" => o.eps = parse(value)?,
            "optim.poly_power" => t.poly_power = parse(value)?,
            "train.epochs" => t.epochs = parse(value)?,
            "train.batch_size" => t.batch_size = parse(value)?,
            "train.mode" => t.mode = parse(value)?,
            "train.seed" => t.seed = parse(value)?,
            "train.voxel_size" => t.voxel_size = parse(value)?,
            "train.max_points" => t.max_points = parse(value)?,
            "train.val_count" => t.val_count = parse(value)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(value)?,
            "train.eval_every" => t.eval_every = parse(value)?,
            "eval.top_k" => e.top_k = parse(value)?,
            "eval.min_tokens" => e.min_tokens = parse(value)?,
            "data.extent" => {
                let v: Vec<f64> = parse_list(value)?;
                d.extent = v.try_into().map_err(|_| "extent needs three comma-separated values".to_string())?;
            }
            "data.min_instances" => d.min_instances = parse(value)?,
            "data.max_instances" => d.max_instances = parse(value)?,
            "data.shapes" => d.shapes = parse_list(value)?,
            "data.noise" => d.noise = parse(value)?,
            "data.clutter_fraction" => d.clutter_fraction = parse(value)?,
            "data.num_classes" => d.num_classes = parse(value)?,
            "data.density" => d.density = parse(value)?,
            "data.min_gap" => d.min_gap = parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    /// A `[section]` header prefixes the keys that follow it.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::Parse { line, msg: format!("expected key = value, got {content:?}") })?;
            let (key, value) = (key.trim(), value.trim());
            let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            match cfg.set(&full, value) {
                Ok(true) => {}
                Ok(false) => return Err(ConfigError::UnknownKey { line, key: full }),
                Err(msg) => return Err(ConfigError::Parse { line, msg: format!("{full}: {msg}") }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.data.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.data.num_classes != self.model.num_classes {
            return bad(format!(
                "data.num_classes = {} but decoder.num_classes = {}",
                self.data.num_classes, self.model.num_classes
            ));
        }
        let w = self.loss.weights;
        if [w.cls, w.bce, w.dice, w.center].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.loss.no_object_weight) {
            return bad(format!("loss.no_object_weight must be in [0, 1], got {}", self.loss.no_object_weight));
        }
        let o = &self.optim;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return bad(format!("optim.lr must be positive, got {}", o.lr));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return bad(format!("optim.weight_decay must be non-negative, got {}", o.weight_decay));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optim.beta1 and optim.beta2 must be in [0, 1)".into());
        }
        if !(o.eps.is_finite() && o.eps > 0.0) {
            return bad(format!("optim.eps must be positive, got {}", o.eps));
        }
        let t = &self.train;
        if !(t.poly_power.is_finite() && t.poly_power >= 0.0) {
            return bad(format!("optim.poly_power must be non-negative, got {}", t.poly_power));
        }
        if t.epochs == 0 || t.batch_size == 0 || t.checkpoint_every == 0 || t.eval_every == 0 {
            return bad("train.epochs, batch_size, checkpoint_every and eval_every must be positive".into());
        }
        if !(t.voxel_size.is_finite() && t.voxel_size > 0.0) {
            return bad(format!("train.voxel_size must be positive, got {}", t.voxel_size));
        }
        if t.max_points == 0 {
            return bad("train.max_points must be positive".into());
        }
        if self.eval.top_k == 0 {
            return bad("eval.top_k must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = Config::default();
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.model.d, 256);
        assert_eq!(cfg.optim.lr, 1e-4);
        assert_eq!(cfg.train.batch_size, 4);
    }

    #[test]
    fn sections_prefix_keys() {
        let cfg = Config::parse("train.mode = none\nloss.center_match = off\n[decoder]\nd = 64 # width\nheads = 4\n").unwrap();
        assert_eq!((cfg.model.d, cfg.model.heads), (64, 4));
        assert_eq!(cfg.train.mode, AttentionMode::None);
        assert!(!cfg.loss.center_match);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let err = Config::parse("decoder.d = 64\ndecoder.depth = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 2, .. }), "{err}");
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for text in [
            "decoder.heads = 7",
            "optim.lr = 0",
            "optim.beta1 = 1",
            "loss.dice = -1",
            "train.batch_size = 0",
            "train.voxel_size = -0.1",
            "rpe.len = 47",
            "decoder.num_classes = 5",
            "data.max_instances = 1",
        ] {
            assert!(Config::parse(text).is_err(), "{text}");
        }
        assert!(matches!(Config::parse("optim.lr = fast"), Err(ConfigError::Parse { line: 1, .. })));
    }
}
