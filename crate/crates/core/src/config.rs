//! Experiment configuration: one JSON document with dotted-key overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::{MaskConfig, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resource {
    /// Every third training clip per speaker.
    Low,
    /// The full training split.
    High,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub resource: Resource,
    /// Evaluate the validation split every this many epochs; 0 skips it.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            resource: Resource::Low,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub mask: MaskConfig,
    /// Gaussian landmark jitter applied to training clips, pixels.
    pub landmark_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            mask: MaskConfig::default(),
            landmark_jitter: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustConfig {
    /// Gaussian pixel noise, intensity units.
    pub visual_sigma: f64,
    /// Gaussian landmark jitter, pixels.
    pub landmark_sigma: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            visual_sigma: 0.05,
            landmark_sigma: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for initialization, shuffling and augmentation.
    pub seed: u64,
    /// Seed the dataset is generated from.
    pub data_seed: u64,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub robust: RobustConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            data: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            robust: RobustConfig::default(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.frontend.frame_size != self.data.frame_size {
            return Err(Error::Config(format!(
                "model frame size {} differs from data frame size {}",
                self.model.frontend.frame_size, self.data.frame_size
            )));
        }
        if self.model.backend.classes != self.data.classes {
            return Err(Error::Config(format!(
                "model has {} classes but the data has {}",
                self.model.backend.classes, self.data.classes
            )));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_p) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.augment.flip_p)));
        }
        if self.augment.mask.max_len > self.data.frames {
            return Err(Error::Config(format!(
                "mask length {} exceeds clip length {}",
                self.augment.mask.max_len, self.data.frames
            )));
        }
        if !(self.augment.landmark_jitter >= 0.0) {
            return Err(Error::Config("landmark jitter must be nonnegative".into()));
        }
        if !(self.robust.visual_sigma >= 0.0) || !(self.robust.landmark_sigma >= 0.0) {
            return Err(Error::Config("perturbation sigmas must be nonnegative".into()));
        }
        Ok(())
    }

    /// Parses a (possibly partial) JSON document over the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        Self::from_value(v)
    }

    fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value` overrides; `key` is dotted and must already
    /// exist, `value` is parsed as JSON and falls back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let val: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key, val)?;
        }
        let cfg = Self::from_value(v)?;
        Ok(cfg)
    }

    /// Canonical JSON used for hashing and snapshots.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Hash of the whole resolved configuration.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Hash of the parts that decide parameter names and shapes.
    pub fn architecture_hash(&self) -> String {
        architecture_hash(&self.model)
    }
}

pub fn architecture_hash(model: &ModelConfig) -> String {
    sha256_hex(serde_json::to_string(model).expect("config serializes").as_bytes())
}

fn set_path(root: &mut Value, key: &str, val: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*p)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            *slot = val;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let c = ExperimentConfig::default()
            .with_overrides(&["train.lr=0.01", "model.fusion=sum2", "model.use_sag=false"])
            .unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.model.fusion, crate::fusion::FusionMode::Sum2);
        assert!(!c.model.use_sag);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let e = ExperimentConfig::default().with_overrides(&["train.nope=1"]).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
        let e = ExperimentConfig::from_json(r#"{"train": {"nope": 1}}"#).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = ExperimentConfig::from_json(r#"{"seed": 5, "train": {"epochs": 2}}"#).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, 16);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = a.with_overrides(&["seed=1"]).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.architecture_hash(), b.architecture_hash());
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
    }
}
