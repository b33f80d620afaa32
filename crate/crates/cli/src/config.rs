//! Run configuration: a flat `key = value` file with dotted keys, or JSON.
//!
//! ```text
//! # comment
//! method = timematch
//! min_class_examples = 200
//! model.hidden = 64
//! train.lambda = 2.0
//! train.metric = am
//! paths.source = data/source
//! ```
//!
//! Values are read as JSON when they parse as JSON and as plain strings
//! otherwise.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tmlab_core::adapt::{Method, ModelConfig, TrainConfig};
use tmlab_core::Error;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub method: Method,
    /// Classes with fewer labeled source examples are folded into unknown.
    pub min_class_examples: usize,
    /// Whether the headline macro F1 counts the unknown class.
    pub include_unknown: bool,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            method: Method::Timematch,
            min_class_examples: 200,
            include_unknown: true,
            paths: PathsConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidInput(msg.into()).into()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text).with_context(|| format!("reading config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| invalid(format!("malformed JSON config: {e}")))?
        } else {
            dotted_to_json(text)?
        };
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks on every hyperparameter and existence of the input
    /// paths that are set.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.threshold) {
            bail!(invalid(format!("train.threshold = {} outside [0, 1]", t.threshold)));
        }
        if !self.model.embed.is_multiple_of(2) {
            bail!(invalid("model.embed must be even"));
        }
        for (name, p) in [
            ("paths.source", &self.paths.source),
            ("paths.target", &self.paths.target),
            ("paths.init", &self.paths.init),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    bail!(invalid(format!("{name}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

fn dotted_to_json(text: &str) -> Result<Value> {
    let mut root = Map::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(invalid(format!("line {}: expected `key = value`", i + 1)));
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            bail!(invalid(format!("line {}: bad key {key:?}", i + 1)));
        }
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            node = match entry {
                Value::Object(m) => m,
                _ => bail!(invalid(format!("line {}: {key} conflicts with an earlier value", i + 1))),
            };
        }
        let last = parts[parts.len() - 1].to_string();
        if node.contains_key(&last) {
            bail!(invalid(format!("line {}: duplicate key {key}", i + 1)));
        }
        node.insert(last, parsed);
    }
    Ok(Value::Object(root))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tmlab_core::shift::Metric;

    #[test]
    fn dotted_keys_fill_nested_sections() {
        let cfg = RunConfig::parse(
            "# tuned\nmethod = fixmatch\nmodel.hidden = 16\ntrain.lambda = 0.5\ntrain.metric = is\n\ninclude_unknown = false\n",
        )
        .unwrap();
        assert_eq!(cfg.method, Method::Fixmatch);
        assert_eq!(cfg.model.hidden, 16);
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg.train.metric, Metric::Is);
        assert!(!cfg.include_unknown);
        assert_eq!(cfg.train.batch_size, 128);
    }

    #[test]
    fn json_is_accepted() {
        let cfg = RunConfig::parse(r#"{"train": {"ema_decay": 0.99}, "min_class_examples": 5}"#).unwrap();
        assert_eq!(cfg.train.ema_decay, 0.99);
        assert_eq!(cfg.min_class_examples, 5);
    }

    #[test]
    fn defaults_match_the_training_recipe() {
        let cfg = RunConfig::parse("").unwrap();
        let t = &cfg.train;
        assert_eq!((t.max_shift, t.lambda, t.ema_decay, t.threshold), (60, 2.0, 0.9999, 0.9));
        assert_eq!((t.batch_size, t.pixel_sample, t.timestep_sample), (128, 64, 30));
        assert_eq!((t.pretrain_lr, t.adapt_lr, t.weight_decay), (1e-3, 1e-4, 1e-4));
        assert_eq!((t.adapt_epochs, t.iterations_per_epoch, t.focal_gamma), (20, 500, 1.0));
        assert_eq!(cfg.min_class_examples, 200);
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for text in [
            "train.ema_decay = 1.5",
            "train.threshold = 1.2",
            "train.threshold = -0.1",
            "train.lambda = -1",
            "model.embed = 7",
            "train.unknown_key = 1",
            "no equals sign",
            "a.b = 1\na.b = 2",
            "paths.init = /definitely/not/here.ckpt",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }
}
