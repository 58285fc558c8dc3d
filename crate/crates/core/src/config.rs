//! Training configuration: flat TOML in, flat `key=value` echo out.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{parse_backbones, ArchConfig, BackboneKind};
use crate::error::{Result, WmuError};
use crate::tape::PceReduction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_power: f64,
    pub val_every: usize,
    pub seed: u64,
    /// Comma-separated backbone list, e.g. `cnn,attn,ssm`.
    pub backbones: String,
    pub image_size: usize,
    pub num_classes: usize,
    pub width: usize,
    pub patch: usize,
    pub window: usize,
    pub d_state: usize,
    /// Scribble coverage used when the CLI synthesises scribbles.
    pub coverage: f64,
    pub pce_reduction: PceReduction,
    /// Random flips and quarter turns of training batches.
    pub augment: bool,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_power: 0.9,
            val_every: 200,
            seed: 0,
            backbones: "cnn,attn,ssm".into(),
            image_size: 64,
            num_classes: 4,
            width: 16,
            patch: 4,
            window: 4,
            d_state: 8,
            coverage: 0.5,
            pce_reduction: PceReduction::Mean,
            augment: false,
            eval_batch: 8,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| WmuError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| WmuError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| WmuError::Config(format!("{}: {e}", path.display())))
    }

    /// Overrides one field from its textual value, e.g. `("iterations", "500")`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| WmuError::Config(e.to_string()))?;
        if !table.contains_key(key) {
            return Err(WmuError::Config(format!("unknown config key {key:?}")));
        }
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        *self = table.try_into().map_err(|e: toml::de::Error| WmuError::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn backbone_list(&self) -> Result<Vec<BackboneKind>> {
        parse_backbones(&self.backbones)
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            image_size: self.image_size,
            num_classes: self.num_classes,
            width: self.width,
            patch: self.patch,
            window: self.window,
            d_state: self.d_state,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(WmuError::Config(msg));
        if self.iterations == 0 {
            return fail("iterations must be > 0".into());
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return fail("batch sizes must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.lr_decay_power >= 0.0) {
            return fail("weight_decay and lr_decay_power must be >= 0".into());
        }
        if self.val_every == 0 || self.val_every > self.iterations {
            return fail(format!("val_every must be in 1..={}, got {}", self.iterations, self.val_every));
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return fail(format!("coverage must be in (0, 1], got {}", self.coverage));
        }
        if self.num_classes > 255 {
            return fail("at most 255 classes".into());
        }
        self.backbone_list()?;
        Ok(())
    }

    /// `key=value` lines sorted by key.
    pub fn echo(&self) -> String {
        let table = toml::Table::try_from(self).expect("config serialises");
        let mut out = String::new();
        for (k, v) in &table {
            let v = match v {
                toml::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}
