//! Run configuration: one JSON document with `model`, `train`, `data`,
//! `synth` and `experiment` sections plus `output_dir`. Unknown keys are
//! rejected; missing keys take their defaults. `--set a.b=v` overrides are
//! applied to the JSON tree before it is typed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ConllOptions, Overflow, TagScheme, TextFormat};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::{DomainSpec, PairMode};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source_train: Option<PathBuf>,
    pub source_dev: Option<PathBuf>,
    pub source_test: Option<PathBuf>,
    /// Unlabelled target corpus.
    pub target: Option<PathBuf>,
    pub target_format: TextFormat,
    /// Tag scheme of the labelled files.
    pub scheme: TagScheme,
    pub max_len: usize,
    pub overflow: Overflow,
    pub min_freq: usize,
    /// Add target-corpus tokens to the vocabulary.
    pub vocab_includes_target: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source_train: None,
            source_dev: None,
            source_test: None,
            target: None,
            target_format: TextFormat::Conll,
            scheme: TagScheme::Iob2,
            max_len: 128,
            overflow: Overflow::Truncate,
            min_freq: 1,
            vocab_includes_target: true,
        }
    }
}

impl DataConfig {
    pub fn conll_options(&self) -> ConllOptions {
        ConllOptions {
            labelled: true,
            max_len: self.max_len,
            overflow: self.overflow,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub mode: PairMode,
    pub dev_sentences: usize,
    pub test_sentences: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            source: DomainSpec {
                domain_gap: 0.7,
                ..Default::default()
            },
            target: DomainSpec {
                domain_gap: 0.7,
                private_pool: 1,
                ..Default::default()
            },
            mode: PairMode::Different,
            dev_sentences: 400,
            test_sentences: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub modes: Vec<PairMode>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seeds: vec![1, 2, 3, 4, 5],
            modes: vec![PairMode::Different],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub experiment: ExperimentSection,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            experiment: ExperimentSection::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Parses the right-hand side of an override: JSON if it parses, otherwise
/// a bare string.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `path=value` to a JSON tree, creating intermediate objects.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override path `{path}` has an empty segment")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path `{path}`: `{}` is not a section", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), override_value(raw));
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last key")
}

impl ExperimentConfig {
    /// Builds a config from an optional JSON file plus overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        Self::from_value(tree)
    }

    pub fn from_value(tree: Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// The fully defaulted configuration as JSON.
    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_value(c.echo()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.train.alpha, 2.0);
        assert_eq!(c.model.grl_lambda, 1.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let v = serde_json::json!({"train": {"alpah": 1.0}});
        assert!(matches!(ExperimentConfig::from_value(v), Err(Error::Config(_))));
        let v = serde_json::json!({"extra": 1});
        assert!(ExperimentConfig::from_value(v).is_err());
    }

    #[test]
    fn overrides() {
        let mut v = serde_json::json!({"train": {"epochs": 3}});
        apply_override(&mut v, "train.alpha=0").unwrap();
        apply_override(&mut v, "data.target=corpus/t.txt").unwrap();
        apply_override(&mut v, "train.grad_clip=null").unwrap();
        apply_override(&mut v, "experiment.seeds=[7,8]").unwrap();
        let c = ExperimentConfig::from_value(v).unwrap();
        assert_eq!(c.train.alpha, 0.0);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.grad_clip, None);
        assert_eq!(c.data.target, Some(PathBuf::from("corpus/t.txt")));
        assert_eq!(c.experiment.seeds, vec![7, 8]);

        let mut v = serde_json::json!({"train": 3});
        assert!(apply_override(&mut v, "train.alpha=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "a..b=1").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let v = serde_json::json!({"train": {"lr": -1.0}});
        assert!(matches!(ExperimentConfig::from_value(v), Err(Error::Config(_))));
    }
}
