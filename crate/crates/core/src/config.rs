//! Run configuration: JSON with defaults for every field, unknown keys
//! rejected, dotted `key=value` overrides and content hashes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adapter::{Adapter, AdapterConfig, ControlMode};
use crate::backbone::{BackboneConfig, UNet};
use crate::error::{CoreError, Result};
use crate::sched::NoiseSchedule;
use crate::tasks::TaskConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 200, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build<T: fsc_tensor::Scalar>(&self) -> Result<NoiseSchedule<T>> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
            .map_err(|e| CoreError::config("schedule", e.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Project condition-encoder features directly, without matching.
    pub no_matching: bool,
    /// Skip few-shot fine-tuning of novel tasks.
    pub no_finetune: bool,
}

impl Ablation {
    pub fn control_mode(&self) -> ControlMode {
        if self.no_matching {
            ControlMode::Direct
        } else {
            ControlMode::Matching
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub meta_steps: usize,
    pub tasks_per_batch: usize,
    pub support_n: usize,
    pub queries_per_episode: usize,
    pub cfg_drop_prob: f64,
    pub seed: u64,
    /// Log the loss every this many steps (0 disables).
    pub log_every: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            pretrain_steps: 2000,
            pretrain_batch: 16,
            meta_steps: 5000,
            tasks_per_batch: 2,
            support_n: 3,
            queries_per_episode: 4,
            cfg_drop_prob: 0.1,
            seed: 42,
            log_every: 100,
            ablation: Ablation::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub shots: usize,
    pub repartition_each_step: bool,
    /// Fixed noise draws averaged for the validation loss.
    pub val_draws: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            max_steps: 600,
            batch_size: 10,
            eval_every: 10,
            patience: 50,
            learning_rate: 1e-4,
            shots: 30,
            repartition_each_step: true,
            val_draws: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub support_pairs_at_inference: usize,
    pub seed: u64,
    /// Zero the control features in the unguided branch as well as nulling the descriptor.
    pub cfg_null_control: bool,
    /// Images sampled together in one batch.
    pub batch: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            steps: 50,
            cfg_scale: 7.5,
            support_pairs_at_inference: 5,
            seed: 42,
            cfg_null_control: true,
            batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data_dir: "data".into(), checkpoint_dir: "checkpoints".into(), output_dir: "out".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub schedule: ScheduleConfig,
    pub tasks: TaskConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub inference: InferenceConfig,
    pub paths: PathsConfig,
}

pub const PRESETS: [&str; 3] = ["default", "paper", "desk"];

impl RunConfig {
    /// Named starting points: `default`, `paper` (learning rate 1e-5) and
    /// `desk`, a reduced model that trains in minutes on one CPU core.
    pub fn preset(name: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        match name {
            "default" => {}
            "paper" => {
                c.train.learning_rate = 1e-5;
                c.finetune.learning_rate = 1e-5;
            }
            "desk" => {
                c.backbone = BackboneConfig {
                    base_channels: 16,
                    channel_multipliers: vec![1, 2, 2],
                    time_embed_dim: 32,
                    cond_embed_dim: 16,
                    norm_groups: 4,
                    attn_heads: 2,
                    ..BackboneConfig::default()
                };
                c.adapter = AdapterConfig { heads: 2, levels: Some(vec![1, 2, 3]), ..AdapterConfig::default() };
                c.train.learning_rate = 1e-3;
                c.train.pretrain_steps = 3000;
                c.train.meta_steps = 1500;
                c.finetune.learning_rate = 1e-3;
                c.finetune.patience = 10;
            }
            other => {
                return Err(CoreError::config(
                    "preset",
                    format!("unknown preset `{other}`; expected one of {PRESETS:?}"),
                ))
            }
        }
        Ok(c)
    }

    pub fn from_value(v: Value) -> Result<RunConfig> {
        let cfg: RunConfig = serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            CoreError::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<RunConfig> {
        let v: Value = serde_json::from_str(s).map_err(|e| CoreError::config("<document>", e.to_string()))?;
        Self::from_value(v)
    }

    /// Reads `path` (or starts from `preset`), then applies `key=value` overrides.
    pub fn load(path: Option<&Path>, preset: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut v = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CoreError::io(p, e))?;
                let file: Value =
                    serde_json::from_str(&text).map_err(|e| CoreError::config("<document>", e.to_string()))?;
                let mut base = serde_json::to_value(RunConfig::preset(preset)?)?;
                merge(&mut base, file);
                base
            }
            None => serde_json::to_value(RunConfig::preset(preset)?)?,
        };
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.tasks.validate()?;
        self.schedule.build::<f64>()?;
        let unet = UNet::new(self.backbone.clone())?;
        Adapter::new(self.adapter.clone(), self.train.ablation.control_mode(), unet)?;
        let t = &self.train;
        let positive = [
            ("train.pretrain_batch", t.pretrain_batch),
            ("train.tasks_per_batch", t.tasks_per_batch),
            ("train.support_n", t.support_n),
            ("train.queries_per_episode", t.queries_per_episode),
            ("finetune.batch_size", self.finetune.batch_size),
            ("finetune.eval_every", self.finetune.eval_every),
            ("finetune.patience", self.finetune.patience),
            ("finetune.val_draws", self.finetune.val_draws),
            ("inference.steps", self.inference.steps),
            ("inference.support_pairs_at_inference", self.inference.support_pairs_at_inference),
            ("inference.batch", self.inference.batch),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CoreError::config(*k, "must be positive"));
        }
        if !(0.0..=1.0).contains(&t.cfg_drop_prob) {
            return Err(CoreError::config("train.cfg_drop_prob", "must lie in [0, 1]"));
        }
        for (k, lr) in
            [("train.learning_rate", t.learning_rate), ("finetune.learning_rate", self.finetune.learning_rate)]
        {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(CoreError::config(k, "must be positive"));
            }
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(CoreError::config("train.weight_decay", "must be non-negative"));
        }
        if self.finetune.shots < 3 {
            return Err(CoreError::config("finetune.shots", "fine-tuning needs at least 3 support pairs"));
        }
        if self.inference.steps > self.schedule.steps {
            return Err(CoreError::config(
                "inference.steps",
                format!("exceeds the {} schedule steps", self.schedule.steps),
            ));
        }
        if !self.inference.cfg_scale.is_finite() {
            return Err(CoreError::config("inference.cfg_scale", "must be finite"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical (sorted-key) JSON of the whole config.
    pub fn config_hash(&self) -> String {
        hash_value(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Hash of the sections that determine parameter shapes and the noise process.
    pub fn model_hash(&self) -> String {
        let v = serde_json::json!({
            "backbone": self.backbone,
            "schedule": self.schedule,
            "adapter": self.adapter,
        });
        hash_value(&v)
    }

    /// Hash of the sections that determine dataset contents.
    pub fn data_hash(&self) -> String {
        let v = serde_json::json!({ "tasks": self.tasks, "image_size": self.backbone.image_size });
        hash_value(&v)
    }
}

pub fn hash_value(v: &Value) -> String {
    // serde_json maps are sorted, so this serialization is canonical.
    let text = serde_json::to_string(v).expect("value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(v: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| CoreError::config(assignment, "override must look like key=value"))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CoreError::config(key, "empty path segment"));
    }
    let mut cur = v;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| CoreError::config(parts[..i].join("."), "is not a section"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
