//! Run configuration: one TOML file with a section per component, plus
//! dotted `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::docmodel::GenConfig;
use crate::error::{Error, Result};
use crate::graphnet::GraphConfig;
use crate::heads::LossConfig;
use crate::inference::InferenceConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Holds `train/`, `test/` and `manifest.json`.
    pub data_dir: PathBuf,
    /// Receives the checkpoint, metrics, evaluation report and config echo.
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

impl PathsConfig {
    pub fn train_dir(&self) -> PathBuf {
        self.data_dir.join("train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.data_dir.join("test")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.run_dir.join("model.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.run_dir.join("metrics.jsonl")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GenConfig,
    pub backbone: BackboneConfig,
    pub graph: GraphConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub paths: PathsConfig,
}

/// Component switched off for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Plain cross-entropy instead of focal loss.
    Focal,
    /// No graph and no pair head.
    Kv,
    /// Raw edge geometry instead of digit encoding.
    Num2vec,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "focal" => Ok(Ablation::Focal),
            "kv" => Ok(Ablation::Kv),
            "num2vec" => Ok(Ablation::Num2vec),
            other => Err(Error::config("--ablate", format!("unknown ablation `{other}`"))),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Every resolved value, defaults included.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    /// Applies `section.key=value` (nested keys allowed, e.g.
    /// `loss.focal.alpha=0.5`). The value is read as TOML, falling back to
    /// a bare string. Unknown keys and type mismatches are errors.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "expected section.key=value"))?;
        let key = key.trim();
        let raw = raw.trim();
        let mut value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::config(key, e.to_string()))?;
        let path: Vec<&str> = key.split('.').collect();
        if path.len() < 2 {
            return Err(Error::config(key, "expected section.key"));
        }
        let mut node = &mut root;
        for part in &path[..path.len() - 1] {
            node = node
                .get_mut(*part)
                .filter(|n| n.is_table())
                .ok_or_else(|| Error::config(key, format!("unknown section `{part}`")))?;
        }
        let last = path[path.len() - 1];
        let slot = node
            .get_mut(last)
            .ok_or_else(|| Error::config(key, "unknown key"))?;
        if let (toml::Value::Float(_), toml::Value::Integer(i)) = (&*slot, &value) {
            value = toml::Value::Float(*i as f64);
        }
        *slot = value;
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(key, e.to_string()))?;
        Ok(())
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::Focal => self.loss.use_focal = false,
            Ablation::Kv => self.train.use_kv_branch = false,
            Ablation::Num2vec => self.graph.use_num2vec = false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.backbone.validate()?;
        self.graph.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.inference.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            graph: self.graph.clone(),
            use_kv_branch: self.train.use_kv_branch,
        }
    }
}
