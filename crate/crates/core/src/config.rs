//! Flat run configuration: optimizer, loss, ablation switches, backbone and
//! synthetic-data keys in one JSON object.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{BackboneConfig, PoolKind};
use crate::data::SyntheticSpec;
use crate::erase::AttentionReduce;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub anneal_factor: f64,
    pub anneal_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub theta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    pub enable_ca: bool,
    pub enable_ae: bool,
    pub enable_center: bool,

    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    pub kernel_size: usize,
    pub pool: PoolKind,

    pub num_classes: usize,
    pub images_per_class: usize,
    pub test_images_per_class: usize,
    pub image_size: usize,

    pub precision: Precision,
    pub attention_reduce: AttentionReduce,
    pub transpose_for_second: bool,
    pub shared_classifier: bool,
    pub signed_sqrt_l2: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let data = SyntheticSpec::default();
        Self {
            epochs: 30,
            base_lr: 0.01,
            anneal_factor: 0.9,
            anneal_every: 2,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 8,
            theta: 0.5,
            lambda: 0.5,
            alpha: 0.5,
            seed: 0,
            enable_ca: true,
            enable_ae: true,
            enable_center: true,
            input_size: backbone.input_size,
            stage_channels: backbone.stage_channels,
            kernel_size: backbone.kernel_size,
            pool: backbone.pool,
            num_classes: data.num_classes,
            images_per_class: data.images_per_class,
            test_images_per_class: data.test_images_per_class,
            image_size: data.image_size,
            precision: Precision::F32,
            attention_reduce: AttentionReduce::ArgmaxGap,
            transpose_for_second: false,
            shared_classifier: true,
            signed_sqrt_l2: true,
        }
    }
}

impl TrainConfig {
    /// `desk` (the defaults) or `paper` (180 epochs, batch 32).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper" => Ok(Self {
                epochs: 180,
                batch_size: 32,
                ..Self::default()
            }),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value`. The value is parsed as JSON when possible and as
    /// a bare string otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        let key = key.trim();
        let mut map = match serde_json::to_value(&*self)? {
            Value::Object(map) => map,
            _ => unreachable!("config is an object"),
        };
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.to_string(), value);
        let next: Self = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::Config(format!("bad value for {key}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return bad(format!("anneal_factor must lie in (0, 1], got {}", self.anneal_factor));
        }
        if self.anneal_every == 0 {
            return bad("anneal_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay must be non-negative".into());
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return bad(format!("batch_size must be even and positive, got {}", self.batch_size));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta must lie in (0, 1), got {}", self.theta));
        }
        if self.lambda < 0.0 || self.alpha < 0.0 || self.alpha > 1.0 {
            return bad("lambda must be non-negative and alpha must lie in [0, 1]".into());
        }
        self.backbone().validate()?;
        self.synthetic().validate()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            input_size: self.input_size,
            stage_channels: self.stage_channels.clone(),
            kernel_size: self.kernel_size,
            pool: self.pool,
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            images_per_class: self.images_per_class,
            test_images_per_class: self.test_images_per_class,
            image_size: self.image_size,
        }
    }

    /// Center-loss weight actually used: zero when the switch is off.
    pub fn effective_lambda(&self) -> f64 {
        if self.enable_center {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn with_flags(&self, ca: bool, ae: bool, center: bool) -> Self {
        Self {
            enable_ca: ca,
            enable_ae: ae,
            enable_center: center,
            ..self.clone()
        }
    }
}
