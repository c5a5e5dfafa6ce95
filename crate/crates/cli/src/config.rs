//! JSON run configuration. Every section is optional; missing keys take their defaults and
//! unknown keys are rejected.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use xfr_core::explain::{MaskingMode, Threshold};
use xfr_core::hiding::{default_kernel_size, HidingGameConfig};
use xfr_core::loss::LossConfig;
use xfr_core::model::Architecture;
use xfr_core::train::TrainConfig;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub img_ch: usize,
    /// Encoder block widths; the last one is the feature dimension `c`.
    pub channels: Vec<usize>,
    pub resolution: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let arch = Architecture::new(1, 2);
        ModelSection {
            img_ch: arch.img_ch,
            channels: arch.encoder_widths,
            resolution: arch.resolution,
        }
    }
}

impl ModelSection {
    pub fn architecture(&self, num_identities: usize) -> Architecture {
        Architecture {
            img_ch: self.img_ch,
            resolution: self.resolution,
            encoder_widths: self.channels.clone(),
            ..Architecture::new(self.img_ch, num_identities)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_sgd: f64,
    pub momentum: f64,
    pub lr_adam: f64,
    pub max_grad_norm: Option<f64>,
    pub lambda: f64,
    pub margin: f64,
    pub scale: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_sgd: t.lr_sgd,
            momentum: t.momentum,
            lr_adam: t.lr_adam,
            max_grad_norm: t.max_grad_norm,
            lambda: t.loss.lambda,
            margin: t.loss.margin,
            scale: t.loss.scale,
            seed: t.seed,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_sgd: self.lr_sgd,
            momentum: self.momentum,
            lr_adam: self.lr_adam,
            max_grad_norm: self.max_grad_norm,
            loss: LossConfig {
                lambda: self.lambda,
                margin: self.margin,
                scale: self.scale,
            },
            seed: self.seed,
        }
    }
}

/// `"auto"` or a number in JSON.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ThresholdSetting(pub Threshold);

impl Serialize for ThresholdSetting {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            Threshold::Auto => s.serialize_str("auto"),
            Threshold::Fixed(v) => s.serialize_f64(v),
        }
    }
}

impl<'de> Deserialize<'de> for ThresholdSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = ThresholdSetting;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"auto\" or a finite number")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                v.parse().map(ThresholdSetting).map_err(E::custom)
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
                Ok(ThresholdSetting(Threshold::Fixed(v)))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
                self.visit_f64(v as f64)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
                self.visit_f64(v as f64)
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub threshold: ThresholdSetting,
    pub mode: MaskingMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HidingSection {
    pub sigma: f64,
    /// Odd kernel side; derived from `sigma` when absent.
    pub kernel_size: Option<usize>,
    pub percentages: Vec<f64>,
    pub seed: u64,
}

impl Default for HidingSection {
    fn default() -> Self {
        let h = HidingGameConfig::default();
        HidingSection {
            sigma: h.sigma,
            kernel_size: None,
            percentages: h.percentages,
            seed: h.seed,
        }
    }
}

impl HidingSection {
    pub fn to_game_config(&self) -> HidingGameConfig {
        HidingGameConfig {
            percentages: self.percentages.clone(),
            sigma: self.sigma,
            kernel_size: self.kernel_size.unwrap_or_else(|| default_kernel_size(self.sigma)),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub explain: ExplainSection,
    pub hiding: HidingSection,
}

impl RunConfig {
    /// Parses and range-checks a JSON document.
    pub fn from_json(text: &str) -> Result<Self, UsageError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| UsageError(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| UsageError(format!("{}: {}", path.display(), e.0)))
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, UsageError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let usage = |e: xfr_core::Error| UsageError(format!("config: {e}"));
        // Two identities is the smallest head that trains; the real count comes from data.
        self.model.architecture(2).validate().map_err(usage)?;
        self.train.to_train_config().validate().map_err(usage)?;
        self.hiding.to_game_config().validate().map_err(usage)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn defaults_survive_a_json_roundtrip() {
        let text = serde_json::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn ranges_are_checked() {
        assert!(RunConfig::from_json(r#"{"train": {"epochs": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"momentum": 1.0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"margin": 2.0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"hiding": {"percentages": [20, 10]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"hiding": {"sigma": -1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"resolution": 60}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epochs": "ten"}}"#).is_err());
    }

    #[test]
    fn threshold_accepts_auto_or_number() {
        let a = RunConfig::from_json(r#"{"explain": {"threshold": "auto", "mode": "cumulative"}}"#).unwrap();
        assert_eq!(a.explain.threshold.0, Threshold::Auto);
        assert_eq!(a.explain.mode, MaskingMode::Cumulative);
        let b = RunConfig::from_json(r#"{"explain": {"threshold": 0}}"#).unwrap();
        assert_eq!(b.explain.threshold.0, Threshold::Fixed(0.0));
        assert!(RunConfig::from_json(r#"{"explain": {"threshold": "high"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"explain": {"mode": "both"}}"#).is_err());
    }
}
