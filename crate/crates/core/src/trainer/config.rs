//! Training configuration: strict JSON parsing, every unknown key rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ActError, Result};
use crate::tape::{model_from_json, ModelGraph};
use crate::trainer::dataset::{self, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// No compression anywhere; a plain SGD reference.
    Fp32,
    /// Uniform bits at the configured average, never adapted.
    FixedB,
    /// Warmup at uniform bits, then periodic sensitivity refresh and
    /// re-allocation.
    AdaptiveB,
    /// Adaptive allocation on top of segment-checkpointed execution.
    CheckpointedAdaptive,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Fp32 => "fp32",
            TrainMode::FixedB => "fixed_b",
            TrainMode::AdaptiveB => "adaptive_b",
            TrainMode::CheckpointedAdaptive => "checkpointed_adaptive",
        }
    }

    pub fn adapts(self) -> bool {
        matches!(self, TrainMode::AdaptiveB | TrainMode::CheckpointedAdaptive)
    }

    pub fn checkpointed(self) -> bool {
        matches!(self, TrainMode::CheckpointedAdaptive)
    }
}

/// Dataset description; exactly the fields for its kind are allowed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

impl DatasetSpec {
    pub fn build(&self, seed: u64) -> Result<Dataset> {
        let need = |name: &str, v: Option<usize>| {
            v.ok_or_else(|| {
                ActError::InvalidConfig(format!("dataset {}: missing '{name}'", self.kind))
            })
        };
        match self.kind.as_str() {
            "two_gaussians" => dataset::two_gaussians(
                need("num_samples", self.num_samples)?,
                need("input_dim", self.input_dim)?,
                self.separation.unwrap_or(4.0),
                self.noise.unwrap_or(1.0),
                seed,
            ),
            "two_moons" => dataset::two_moons(
                need("num_samples", self.num_samples)?,
                self.noise.unwrap_or(0.1),
                seed,
            ),
            "teacher" => dataset::teacher_network(
                need("num_samples", self.num_samples)?,
                need("input_dim", self.input_dim)?,
                self.teacher_hidden.unwrap_or(16),
                seed,
            ),
            "idx" => {
                let images = self.images.as_ref().ok_or_else(|| {
                    ActError::InvalidConfig("dataset idx: missing 'images'".into())
                })?;
                let labels = self.labels.as_ref().ok_or_else(|| {
                    ActError::InvalidConfig("dataset idx: missing 'labels'".into())
                })?;
                dataset::load_idx(images, labels)
            }
            other => Err(ActError::InvalidConfig(format!(
                "unknown dataset kind '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    #[serde(default = "default_avg_bits")]
    pub avg_bits: f64,
    #[serde(default = "default_adapt_interval")]
    pub adapt_interval: usize,
    #[serde(default = "default_alert_threshold")]
    pub alert_threshold: f64,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_grad_ema")]
    pub grad_ema_decay: f64,
    #[serde(default = "default_sens_ema")]
    pub sensitivity_ema_decay: f64,
    #[serde(default = "default_pairs")]
    pub sensitivity_pairs: usize,
    #[serde(default = "default_min_dims")]
    pub min_slot_dims: usize,
    #[serde(default)]
    pub fail_on_alert: bool,
    pub dataset: DatasetSpec,
    /// Model description in the model-config schema (strictly parsed).
    pub model: serde_json::Value,
}

fn default_avg_bits() -> f64 {
    4.0
}
fn default_adapt_interval() -> usize {
    100
}
fn default_alert_threshold() -> f64 {
    0.5
}
fn default_group_size() -> usize {
    256
}
fn default_grad_ema() -> f64 {
    0.99
}
fn default_sens_ema() -> f64 {
    0.5
}
fn default_pairs() -> usize {
    4
}
fn default_min_dims() -> usize {
    16
}

impl TrainConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ActError::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies a `key=value` override onto the raw JSON representation
    /// (dotted keys descend into nested objects), then re-validates.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            ActError::InvalidConfig(format!("override '{assignment}' is not key=value"))
        })?;
        let mut root: serde_json::Value = serde_json::to_value(self)?;
        let mut cursor = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            cursor = cursor
                .as_object_mut()
                .and_then(|o| o.get_mut(*part))
                .ok_or_else(|| {
                    ActError::InvalidConfig(format!("override path '{key}' not found"))
                })?;
        }
        let leaf = *parts.last().unwrap();
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| ActError::InvalidConfig(format!("override path '{key}' not found")))?;
        let parsed: serde_json::Value = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        obj.insert(leaf.to_string(), parsed);
        Self::from_json(&serde_json::to_string(&root)?)
    }

    pub fn model_graph(&self) -> Result<ModelGraph> {
        model_from_json(&serde_json::to_string(&self.model)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ActError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ActError::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(ActError::InvalidConfig(
                "steps and batch_size must be positive".into(),
            ));
        }
        if self.adapt_interval == 0 {
            return Err(ActError::InvalidConfig("adapt_interval must be >= 1".into()));
        }
        if !(self.alert_threshold > 0.0 && self.alert_threshold <= 1.0) {
            return Err(ActError::InvalidConfig(
                "alert_threshold must be in (0, 1]".into(),
            ));
        }
        if self.group_size < 2 {
            return Err(ActError::InvalidConfig("group_size must be >= 2".into()));
        }
        if !(2.0..=32.0).contains(&self.avg_bits) {
            return Err(ActError::InvalidConfig(
                "avg_bits must be in [2, 32]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.grad_ema_decay)
            || !(0.0..1.0).contains(&self.sensitivity_ema_decay)
        {
            return Err(ActError::InvalidConfig("EMA decays must be in [0, 1)".into()));
        }
        if self.sensitivity_pairs == 0 {
            return Err(ActError::InvalidConfig(
                "sensitivity_pairs must be >= 1".into(),
            ));
        }
        let model = self.model_graph()?;
        if self.mode.checkpointed() {
            model.validate_for_checkpointing()?;
        }
        Ok(())
    }
}
