//! Run configuration: one JSON document with `seed`, `model`, `train` and
//! `eval` sections. Every key has a default, so `{}` is a valid config.
//! Dotted overrides (`train.steps=500`) are applied before parsing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tvlab_core::analysis::Metric;
use tvlab_core::hypothesis::{default_conflict_pairs, ExtractionMode};
use tvlab_core::tasks::{self, parse_task_list, TaskSpec};
use tvlab_core::trainer::{default_mixture, LossPositions, MixtureEntry, TrainConfig};
use tvlab_core::ModelConfig;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub seed: Seeds,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Weight initialization.
    pub model: u64,
    /// Training episodes and the dev set.
    pub data: u64,
    /// Episodes and dummy queries of every experiment command.
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub final_lr_fraction: f32,
    pub warmup_steps: usize,
    pub grad_clip: f32,
    pub k_min: usize,
    pub k_max: usize,
    /// Size of the training-bijection pool used when `mixture` is empty.
    pub bijections: usize,
    /// Share of sampling mass on the bijection pool when `mixture` is empty.
    pub bijection_share: f32,
    /// Explicit mixture; replaces the generated one when non-empty.
    pub mixture: Vec<MixtureEntry>,
    pub loss_positions: LossPositions,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_k: usize,
    pub early_stop_accuracy: Option<f32>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch_size: 32,
            lr: 1e-3,
            final_lr_fraction: 0.1,
            warmup_steps: 100,
            grad_clip: 1.0,
            k_min: 2,
            k_max: 6,
            bijections: 16,
            bijection_share: 0.3,
            mixture: Vec::new(),
            loss_positions: LossPositions::AllArrows,
            eval_every: 500,
            eval_episodes: 50,
            eval_k: 5,
            early_stop_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Task list: names, `builtin`, `held_out:N`, `train_bijections:N`, comma separated.
    pub tasks: String,
    pub episodes: usize,
    pub k: usize,
    /// Task-vector layer for eval, conflict, geometry and lens.
    pub layer: Option<usize>,
    pub extraction: ExtractionMode,
    /// Restricts geometry to one metric; both are reported when unset.
    pub metric: Option<Metric>,
    pub geometry_vectors: usize,
    pub lens_top: usize,
    pub conflict_pairs: Vec<(String, String)>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: "builtin".into(),
            episodes: 100,
            k: 5,
            layer: None,
            extraction: ExtractionMode::DummyQuery,
            metric: None,
            geometry_vectors: 50,
            lens_top: 10,
            conflict_pairs: default_conflict_pairs(),
        }
    }
}

impl LabConfig {
    /// Reads `path` (or starts from `{}`), sets `values` by dotted key, then
    /// applies `key=value` overrides and validates.
    pub fn load(path: Option<&Path>, values: &[(String, Value)], overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| LabError::io(p, e))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| LabError::config("<root>", format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for (key, value) in values {
            set_path(&mut doc, key, value.clone())?;
        }
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        Self::from_value(doc)
    }

    pub fn from_value(doc: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(doc).map_err(|e| {
            let key = e.path().to_string();
            LabError::config(if key == "." { "<root>".into() } else { key }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()
            .validate()
            .map_err(|e| LabError::config("model", e.to_string()))?;
        let t = &self.train;
        if t.mixture.is_empty() && !(0.0..=1.0).contains(&t.bijection_share) {
            return Err(LabError::config("train.bijection_share", "must lie in [0, 1]"));
        }
        if t.mixture.is_empty() && t.bijections == 0 && t.bijection_share > 0.0 {
            return Err(LabError::config("train.bijections", "positive share needs at least one bijection"));
        }
        self.train_config()
            .validate(self.model.max_seq_len)
            .map_err(|e| LabError::config("train", e.to_string()))?;
        self.tasks().map_err(|e| LabError::config("eval.tasks", e.to_string()))?;
        if self.eval.episodes == 0 {
            return Err(LabError::config("eval.episodes", "must be positive"));
        }
        if self.eval.k == 0 {
            return Err(LabError::config("eval.k", "must be positive"));
        }
        for (i, (a, b)) in self.eval.conflict_pairs.iter().enumerate() {
            for name in [a, b] {
                tasks::task_by_name(name)
                    .map_err(|e| LabError::config(format!("eval.conflict_pairs[{i}]"), e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            vocab_size: tasks::VOCAB_SIZE,
            max_seq_len: m.max_seq_len,
            seed: self.seed.model,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let mixture = if t.mixture.is_empty() {
            default_mixture(t.bijections, t.bijection_share)
        } else {
            t.mixture.clone()
        };
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            final_lr_fraction: t.final_lr_fraction,
            warmup_steps: t.warmup_steps,
            grad_clip: t.grad_clip,
            k_min: t.k_min,
            k_max: t.k_max,
            mixture,
            loss_positions: t.loss_positions,
            eval_every: t.eval_every,
            eval_episodes: t.eval_episodes,
            eval_k: t.eval_k,
            early_stop_accuracy: t.early_stop_accuracy,
            seed: self.seed.data,
        }
    }

    pub fn tasks(&self) -> tvlab_core::Result<Vec<TaskSpec>> {
        parse_task_list(&self.eval.tasks)
    }

    pub fn conflict_tasks(&self) -> Result<Vec<(TaskSpec, TaskSpec)>> {
        self.eval
            .conflict_pairs
            .iter()
            .map(|(a, b)| Ok((tasks::task_by_name(a)?, tasks::task_by_name(b)?)))
            .collect()
    }
}

/// Applies one `dotted.key=value` override. `value` is parsed as JSON when it
/// parses, otherwise taken as a string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| LabError::config(spec, "override must look like key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(doc, key.trim(), value)
}

/// Sets `dotted.key` in `doc`, creating intermediate objects.
pub fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(LabError::config(key, "empty path segment"));
    }
    let mut node = doc;
    let mut walked = String::new();
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| LabError::config(walked.clone(), "not an object"))?;
        if !walked.is_empty() {
            walked.push('.');
        }
        walked.push_str(part);
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}
