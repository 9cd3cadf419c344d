//! Run configuration as flat `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones, which is how command-line flags override a file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingKind, ModelConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseSourceKind {
    #[serde(rename = "self")]
    SelfPredicted,
    External,
    Gold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub parse_source: ParseSourceKind,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip: f64,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub context_train: Option<PathBuf>,
    pub context_dev: Option<PathBuf>,
    pub context: Option<PathBuf>,
    pub parse_file: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            parse_source: ParseSourceKind::SelfPredicted,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.02,
            epochs: 30,
            seed: 1,
            clip: 5.0,
            train: None,
            dev: None,
            input: None,
            gold: None,
            embeddings: None,
            context_train: None,
            context_dev: None,
            context: None,
            parse_file: None,
            checkpoint: None,
            log: None,
            output: None,
            metrics: None,
        }
    }
}

/// Every key accepted by [`RunConfig::set`].
pub const KEYS: &[&str] = &[
    "variant",
    "embedding",
    "parse_source",
    "layers",
    "heads",
    "d_k",
    "d_q",
    "d_v",
    "parse_layer",
    "pos_layer",
    "d_model",
    "d_r",
    "conv_layers",
    "context_layers",
    "positional",
    "harden_parse",
    "srl_weight",
    "parse_weight",
    "pos_weight",
    "optimizer",
    "learning_rate",
    "epochs",
    "seed",
    "clip",
    "train",
    "dev",
    "input",
    "gold",
    "embeddings",
    "context_train",
    "context_dev",
    "context",
    "parse_file",
    "checkpoint",
    "log",
    "output",
    "metrics",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let e = &mut m.encoder;
        let path = || Some(PathBuf::from(value));
        match key {
            "variant" => {
                m.variant = match value {
                    "lisa" => Variant::Lisa,
                    "sa" => Variant::Sa,
                    _ => return Err(Error::Config(format!("unknown variant {value:?}"))),
                }
            }
            "embedding" => {
                m.embedding = match value {
                    "static" => EmbeddingKind::Static,
                    "contextual" => EmbeddingKind::Contextual,
                    _ => return Err(Error::Config(format!("unknown embedding {value:?}"))),
                }
            }
            "parse_source" => {
                self.parse_source = match value {
                    "self" => ParseSourceKind::SelfPredicted,
                    "external" => ParseSourceKind::External,
                    "gold" => ParseSourceKind::Gold,
                    _ => return Err(Error::Config(format!("unknown parse source {value:?}"))),
                }
            }
            "layers" => e.layers = parse(key, value)?,
            "heads" => e.heads = parse(key, value)?,
            "d_k" => e.d_k = parse(key, value)?,
            "d_q" => e.d_q = parse(key, value)?,
            "d_v" => e.d_v = parse(key, value)?,
            "parse_layer" => e.parse_layer = parse(key, value)?,
            "pos_layer" => e.pos_layer = parse(key, value)?,
            "d_model" => e.d_model = parse(key, value)?,
            "d_r" => m.d_r = parse(key, value)?,
            "conv_layers" => m.conv_layers = parse(key, value)?,
            "context_layers" => m.context_layers = parse(key, value)?,
            "positional" => m.positional = parse_bool(key, value)?,
            "harden_parse" => m.harden_parse = parse_bool(key, value)?,
            "srl_weight" => m.loss_weights.srl = parse(key, value)?,
            "parse_weight" => m.loss_weights.parse = parse(key, value)?,
            "pos_weight" => m.loss_weights.pos_pred = parse(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(Error::Config(format!("unknown optimizer {value:?}"))),
                }
            }
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "train" => self.train = path(),
            "dev" => self.dev = path(),
            "input" => self.input = path(),
            "gold" => self.gold = path(),
            "embeddings" => self.embeddings = path(),
            "context_train" => self.context_train = path(),
            "context_dev" => self.context_dev = path(),
            "context" => self.context = path(),
            "parse_file" => self.parse_file = path(),
            "checkpoint" => self.checkpoint = path(),
            "log" => self.log = path(),
            "output" => self.output = path(),
            "metrics" => self.metrics = path(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", i + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.variant == Variant::Sa && self.parse_source != ParseSourceKind::SelfPredicted
        {
            return Err(Error::Config(
                "the syntax-agnostic variant only supports parse_source = self".into(),
            ));
        }
        if self.parse_source == ParseSourceKind::External && self.parse_file.is_none() {
            return Err(Error::Config("parse_source = external needs parse_file".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.clip < 0.0 {
            return Err(Error::Config("clip must be non-negative".into()));
        }
        Ok(())
    }

    /// Fails on the first configured path that does not exist.
    pub fn require(&self, paths: &[(&str, &Option<PathBuf>)]) -> Result<()> {
        for (key, p) in paths {
            match p {
                None => return Err(Error::Config(format!("{key} is required"))),
                Some(p) if !p.exists() => {
                    return Err(Error::Config(format!(
                        "{key} file {} does not exist",
                        p.display()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# desk run\nvariant = sa\nlayers=3\nparse_layer = 3\n\nseed = 9\n")
            .unwrap();
        c.set("seed", "11").unwrap();
        assert_eq!(c.model.variant, Variant::Sa);
        assert_eq!(c.model.encoder.layers, 3);
        assert_eq!(c.seed, 11);
        c.validate().unwrap();
    }

    #[test]
    fn every_key_is_settable() {
        let sample = |k: &str| match k {
            "variant" => "lisa",
            "embedding" => "static",
            "parse_source" => "self",
            "optimizer" => "sgd",
            "positional" | "harden_parse" => "true",
            "learning_rate" | "clip" | "srl_weight" | "parse_weight" | "pos_weight" => "0.5",
            _ => "2",
        };
        let mut c = RunConfig::default();
        for k in KEYS {
            c.set(k, sample(k)).unwrap();
        }
        assert!(c.set("nope", "1").is_err());
    }

    #[test]
    fn invalid_combinations() {
        let mut c = RunConfig::default();
        c.set("variant", "sa").unwrap();
        c.set("parse_source", "gold").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = RunConfig::default();
        c.set("parse_source", "external").unwrap();
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        assert!(c.apply_text("layers 3").is_err());
        assert!(c.set("layers", "x").is_err());
        assert!(c.set("positional", "maybe").is_err());
    }

    #[test]
    fn missing_files_are_reported() {
        let mut c = RunConfig::default();
        c.set("train", "/definitely/not/here.conll").unwrap();
        let err = c.require(&[("train", &c.train)]).unwrap_err();
        assert!(err.to_string().contains("does not exist"));
        assert!(c.require(&[("dev", &c.dev)]).is_err());
    }
}
