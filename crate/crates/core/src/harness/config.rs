//! Flat `key = value` run configuration.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::diffcore::{AdamConfig, DEFAULT_LR};
use crate::error::{Error, Result};
use crate::grounding::DEFAULT_TAU;
use crate::metrics::BindingRule;
use crate::model::ModelConfig;
use crate::slotattn::InitMode;
use crate::synthscene::{SceneConfig, ShapeFamily, POSITION_CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetCodebook {
    /// Contrastive targets are the conditioning codes.
    Shared,
    /// Targets come from an independent codebook aligned by category.
    Distinct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
}

/// Every tunable of a run. Keys are the field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // scenes
    pub grid: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub shapes: ShapeFamily,
    pub noise: f64,
    pub categories: usize,
    pub appearance_dim: usize,
    pub min_separation: f64,
    pub max_queries: usize,

    // model
    pub num_slots: usize,
    pub slot_dim: usize,
    pub slot_mlp_hidden: usize,
    pub iters: usize,
    pub mapping_layers: usize,
    pub mapping_heads: usize,
    pub mapping_head_dim: usize,
    pub mapping_ff_mult: usize,
    pub cond_hidden: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub emb_dim: usize,
    pub point_hidden: usize,
    pub proj_hidden: usize,
    pub tau: f64,
    pub lambda: f64,

    // ablation switches
    pub contrastive_loss: bool,
    pub decoder_conditioning: bool,
    pub slot_init: InitMode,
    pub point_queries: bool,
    pub target_codebook: TargetCodebook,

    // optimization
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Size of a fixed training pool; 0 streams fresh scenes every step.
    pub train_scenes: usize,

    // bookkeeping
    pub checkpoint_every: usize,
    pub keep_checkpoints: usize,
    /// Periodic evaluation cadence in steps; 0 disables it.
    pub eval_every: usize,
    pub eval_scenes: usize,
    pub eval_batch: usize,
    pub binding_rule: BindingRule,
    pub log_every: usize,
    /// Number of consecutive seeds an ablation averages over.
    pub ablation_seeds: usize,
    /// Adds an extra row with conditioned initialization turned off.
    pub ablation_init_off_row: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            grid: 16,
            min_objects: 2,
            max_objects: 5,
            min_size: 3,
            max_size: 6,
            shapes: ShapeFamily::Mixed,
            noise: 0.05,
            categories: 12,
            appearance_dim: 32,
            min_separation: 0.3,
            max_queries: 5,
            num_slots: 7,
            slot_dim: 64,
            slot_mlp_hidden: 128,
            iters: 3,
            mapping_layers: 3,
            mapping_heads: 4,
            mapping_head_dim: 8,
            mapping_ff_mult: 4,
            cond_hidden: 64,
            decoder_hidden: 256,
            decoder_layers: 3,
            emb_dim: 32,
            point_hidden: 32,
            proj_hidden: 64,
            tau: DEFAULT_TAU,
            lambda: 1.0,
            contrastive_loss: true,
            decoder_conditioning: true,
            slot_init: InitMode::Assign,
            point_queries: true,
            target_codebook: TargetCodebook::Shared,
            lr: DEFAULT_LR,
            lr_schedule: LrSchedule::Constant,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 32,
            steps: 20_000,
            train_scenes: 0,
            checkpoint_every: 1000,
            keep_checkpoints: 3,
            eval_every: 0,
            eval_scenes: 256,
            eval_batch: 32,
            binding_rule: BindingRule::UniqueArgmax,
            log_every: 100,
            ablation_seeds: 3,
            ablation_init_off_row: false,
        }
    }
}

fn to_map(cfg: &RunConfig) -> Map<String, Value> {
    match serde_json::to_value(cfg).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("config is a struct"),
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Some(true),
        "off" | "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Bool(true) => "on".into(),
        Value::Bool(false) => "off".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map = to_map(self);
        let old = map
            .get(key)
            .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
        let bad = || Error::config(format!("invalid value {value:?} for {key}"));
        let new = match old {
            Value::Bool(_) => Value::Bool(parse_bool(value).ok_or_else(bad)?),
            Value::Number(n) if n.is_f64() => {
                let f: f64 = value.parse().map_err(|_| bad())?;
                serde_json::Number::from_f64(f)
                    .map(Value::Number)
                    .ok_or_else(bad)?
            }
            Value::Number(_) => Value::Number(value.parse::<u64>().map_err(|_| bad())?.into()),
            Value::String(_) => Value::String(value.to_string()),
            _ => return Err(bad()),
        };
        map.insert(key.to_string(), new);
        *self = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::config(format!("{key} = {value}: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` (or `key = value`) assignments.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v.trim())
    }

    /// Parses a config file on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply(line)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The resolved configuration in the file format, one key per line.
    pub fn echo(&self) -> String {
        to_map(self)
            .iter()
            .map(|(k, v)| format!("{k} = {}\n", render(v)))
            .collect()
    }

    /// Keys whose values differ from `other`.
    pub fn diff(&self, other: &RunConfig) -> Vec<String> {
        let (a, b) = (to_map(self), to_map(other));
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            grid: self.grid,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_size: self.min_size,
            max_size: self.max_size,
            shapes: self.shapes,
            noise: self.noise,
            categories: self.categories,
            appearance_dim: self.appearance_dim,
            emb_dim: self.emb_dim,
            min_separation: self.min_separation,
            max_queries: self.max_queries.min(self.num_slots),
            with_points: self.point_queries,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            patches: self.grid * self.grid,
            feature_dim: self.appearance_dim + POSITION_CHANNELS,
            num_slots: self.num_slots,
            slot_dim: self.slot_dim,
            slot_mlp_hidden: self.slot_mlp_hidden,
            iters: self.iters,
            init_mode: self.slot_init,
            mapping_layers: self.mapping_layers,
            mapping_heads: self.mapping_heads,
            mapping_head_dim: self.mapping_head_dim,
            mapping_ff_mult: self.mapping_ff_mult,
            cond_hidden: self.cond_hidden,
            decoder_hidden: self.decoder_hidden,
            decoder_layers: self.decoder_layers,
            emb_dim: self.emb_dim,
            point_hidden: self.point_hidden,
            proj_hidden: self.proj_hidden,
            tau: self.tau,
            lambda: self.lambda,
            contrastive: self.contrastive_loss,
            decoder_conditioning: self.decoder_conditioning,
            point_queries: self.point_queries,
            ..ModelConfig::default()
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_config().validate()?;
        self.model_config().validate()?;
        let bad = |m: String| Err(Error::config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return bad("Adam needs lr > 0, betas in [0, 1) and eps > 0".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        if self.keep_checkpoints == 0 {
            return bad("keep_checkpoints must be at least 1".into());
        }
        if self.eval_batch == 0 || self.ablation_seeds == 0 {
            return bad("eval_batch and ablation_seeds must be positive".into());
        }
        if self.max_queries > self.num_slots {
            return bad(format!(
                "max_queries {} exceeds num_slots {}",
                self.max_queries, self.num_slots
            ));
        }
        Ok(())
    }
}
