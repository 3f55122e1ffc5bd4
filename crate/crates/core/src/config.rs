//! Plain-text `key = value` configuration for the model, training and decoy
//! settings, plus the tiny parser shared by report summaries.
//!
//! ```text
//! # comments start with '#'
//! model.filters = 8
//! train.epochs = 10
//! finetune.explanation_weight = 1
//! decoy.cell.7 = 43
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::{DecoySpec, NUM_CLASSES};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "SPURIOUS_AUDIT_DATA";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("missing key `{0}`")]
    Missing(String),
}

/// Ordered key-value document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: i + 1, key });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        self.get(key)
            .map(|v| {
                v.parse().map_err(|_| ConfigError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                })
            })
            .transpose()
    }

    pub fn required<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        self.parsed(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    fn set_if<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        if let Some(v) = self.parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Every tunable of the pipeline in one place.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub decoy: DecoySpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: TrainConfig::finetune_default(),
            decoy: DecoySpec::default(),
        }
    }
}

const TRAIN_KEYS: [&str; 10] = [
    "epochs",
    "batch_size",
    "lr0",
    "lr_decay",
    "lambda",
    "explanation_weight",
    "seed",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
];

fn apply_train(kv: &KeyValues, prefix: &str, cfg: &mut TrainConfig) -> Result<(), ConfigError> {
    let k = |name: &str| format!("{prefix}.{name}");
    kv.set_if(&k("epochs"), &mut cfg.epochs)?;
    kv.set_if(&k("batch_size"), &mut cfg.batch_size)?;
    kv.set_if(&k("lr0"), &mut cfg.lr0)?;
    kv.set_if(&k("lr_decay"), &mut cfg.lr_decay)?;
    kv.set_if(&k("lambda"), &mut cfg.lambda)?;
    kv.set_if(&k("explanation_weight"), &mut cfg.explanation_weight)?;
    kv.set_if(&k("seed"), &mut cfg.seed)?;
    kv.set_if(&k("adam_beta1"), &mut cfg.beta1)?;
    kv.set_if(&k("adam_beta2"), &mut cfg.beta2)?;
    kv.set_if(&k("adam_eps"), &mut cfg.adam_eps)
}

fn render_train(kv: &mut KeyValues, prefix: &str, cfg: &TrainConfig) {
    let vals = [
        cfg.epochs.to_string(),
        cfg.batch_size.to_string(),
        cfg.lr0.to_string(),
        cfg.lr_decay.to_string(),
        cfg.lambda.to_string(),
        cfg.explanation_weight.to_string(),
        cfg.seed.to_string(),
        cfg.beta1.to_string(),
        cfg.beta2.to_string(),
        cfg.adam_eps.to_string(),
    ];
    for (name, v) in TRAIN_KEYS.iter().zip(vals) {
        kv.insert(format!("{prefix}.{name}"), v);
    }
}

impl PipelineConfig {
    /// Defaults overridden by every key present in `kv`. Unknown keys are errors.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self, ConfigError> {
        let known = Self::default().to_key_values();
        if let Some(bad) = kv.keys().find(|k| known.get(k).is_none()) {
            return Err(ConfigError::UnknownKey(bad.to_string()));
        }
        let mut cfg = Self::default();
        kv.set_if("model.filters", &mut cfg.model.filters)?;
        kv.set_if("model.dropout_rate", &mut cfg.model.dropout_rate)?;
        apply_train(kv, "train", &mut cfg.train)?;
        apply_train(kv, "finetune", &mut cfg.finetune)?;
        kv.set_if("decoy.intensity", &mut cfg.decoy.intensity)?;
        kv.set_if("decoy.patch_size", &mut cfg.decoy.patch_size)?;
        for class in 0..NUM_CLASSES {
            kv.set_if(&format!("decoy.cell.{class}"), &mut cfg.decoy.cell_of_class[class])?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("model.filters", self.model.filters);
        kv.insert("model.dropout_rate", self.model.dropout_rate);
        render_train(&mut kv, "train", &self.train);
        render_train(&mut kv, "finetune", &self.finetune);
        kv.insert("decoy.intensity", self.decoy.intensity);
        kv.insert("decoy.patch_size", self.decoy.patch_size);
        for (class, cell) in self.decoy.cell_of_class.iter().enumerate() {
            kv.insert(format!("decoy.cell.{class}"), cell);
        }
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_key_values().render();
        assert_eq!(
            PipelineConfig::from_key_values(&KeyValues::parse(&text).unwrap()).unwrap(),
            cfg
        );
    }

    #[test]
    fn overrides_and_comments() {
        let kv = KeyValues::parse(
            "# demo\ntrain.epochs = 3  # short\n\ndecoy.cell.7 = 44\nfinetune.explanation_weight=2.5\n",
        )
        .unwrap();
        let cfg = PipelineConfig::from_key_values(&kv).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.finetune.epochs, 5);
        assert_eq!(cfg.decoy.cell_of_class[7], 44);
        assert_eq!(cfg.finetune.explanation_weight, 2.5);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            KeyValues::parse("nonsense"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            KeyValues::parse("a=1\na=2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        let kv = KeyValues::parse("train.epoch = 3").unwrap();
        assert!(matches!(
            PipelineConfig::from_key_values(&kv),
            Err(ConfigError::UnknownKey(_))
        ));
        let kv = KeyValues::parse("train.epochs = many").unwrap();
        assert!(matches!(
            PipelineConfig::from_key_values(&kv),
            Err(ConfigError::Value { .. })
        ));
    }
}
