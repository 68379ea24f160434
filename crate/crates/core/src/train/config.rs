use serde::{Deserialize, Serialize};

use super::data::DatasetSpec;
use crate::attention::AttentionMode;
use crate::backbone::{ModelSpec, VariantSpec};
use crate::error::{domain, Result};

fn default_lr() -> f64 {
    5e-4
}

fn default_weight_decay() -> f64 {
    0.05
}

fn default_warmup() -> usize {
    5
}

fn default_variant() -> String {
    "tiny".to_string()
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Hyperparameters of one run. Unknown keys are rejected when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: AttentionMode,
    /// Replaces every stage's feature reduction ratio.
    #[serde(default)]
    pub fr_ratio: Option<usize>,
    #[serde(default = "default_true")]
    pub fpc: bool,
    #[serde(default)]
    pub random_crop: bool,
    #[serde(default)]
    pub horizontal_flip: bool,
    #[serde(default = "default_variant")]
    pub variant: String,
    /// Divides every stage's channel count.
    #[serde(default = "default_one")]
    pub channel_div: usize,
    /// Replaces the variant's depths.
    #[serde(default)]
    pub depths: Option<Vec<usize>>,
    pub dataset: DatasetSpec,
}

impl TrainConfig {
    /// Field names accepted in a config file.
    pub const KEYS: &'static [&'static str] = &[
        "lr",
        "weight_decay",
        "warmup_epochs",
        "total_epochs",
        "batch_size",
        "seed",
        "mode",
        "fr_ratio",
        "fpc",
        "random_crop",
        "horizontal_flip",
        "variant",
        "channel_div",
        "depths",
        "dataset",
    ];

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// `lr = 0` is accepted and freezes the weights.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(domain("lr must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(domain("weight_decay must be finite and non-negative"));
        }
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return Err(domain("need warmup_epochs < total_epochs"));
        }
        if self.batch_size == 0 {
            return Err(domain("batch_size must be positive"));
        }
        if self.dataset.train_size == 0 {
            return Err(domain("dataset.train_size must be positive"));
        }
        self.model_spec().map(|_| ())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut variant = VariantSpec::by_name(&self.variant)?;
        if self.channel_div != 1 || self.depths.is_some() {
            let depths = self
                .depths
                .clone()
                .unwrap_or_else(|| variant.stages.iter().map(|s| s.depth).collect());
            variant = variant.scaled(self.channel_div, &depths)?;
        }
        if let Some(r) = self.fr_ratio {
            variant = variant.with_fr_ratio(r)?;
        }
        let spec = ModelSpec::new(variant, self.dataset.class_count)
            .with_mode(self.mode)
            .with_fpc(self.fpc);
        spec.validate()?;
        spec.stage_sides(self.dataset.side)?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"{
        "lr": 0.002, "warmup_epochs": 1, "total_epochs": 5, "batch_size": 32,
        "channel_div": 4, "depths": [1, 1, 1, 1],
        "dataset": {"source": {"kind": "synthetic", "seed": 0},
                    "class_count": 4, "side": 32, "train_size": 256, "val_size": 64}
    }"#;

    #[test]
    fn parses_with_defaults() {
        let c = TrainConfig::from_json(SMOKE).unwrap();
        assert_eq!(c.weight_decay, 0.05);
        assert_eq!(c.mode, AttentionMode::Vicinity2D);
        assert!(c.fpc);
        assert_eq!(c.model_spec().unwrap().variant.stages[0].channels, 24);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = SMOKE.replacen("\"lr\"", "\"learning_rate\"", 1);
        assert!(TrainConfig::from_json(&bad).is_err());
        let nested = SMOKE.replacen("\"seed\": 0", "\"seed\": 0, \"extra\": 1", 1);
        assert!(TrainConfig::from_json(&nested).is_err());
    }

    #[test]
    fn keys_match_fields() {
        let c = TrainConfig::from_json(SMOKE).unwrap();
        let v = serde_json::to_value(&c).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        let mut want = TrainConfig::KEYS.to_vec();
        want.sort_unstable();
        assert_eq!(keys, want);
    }

    #[test]
    fn rejects_bad_schedule() {
        let bad = SMOKE.replacen("\"warmup_epochs\": 1", "\"warmup_epochs\": 5", 1);
        assert!(TrainConfig::from_json(&bad).is_err());
    }
}
