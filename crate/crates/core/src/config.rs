//! JSON run configuration. Every section rejects unknown keys, so a typo
//! fails loudly with the offending key in the message; omitted keys take
//! their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::BagDataset;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{AdamConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub training: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Copies class count and patch shape from the dataset, then validates.
    pub fn resolve_for(&mut self, dataset: &BagDataset) -> Result<()> {
        let (c, h, w) = dataset.patch_shape()?;
        self.model.n_classes = dataset.n_classes();
        self.model.embedder.patch_channels = c;
        self.model.embedder.patch_h = h;
        self.model.embedder.patch_w = w;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.training.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Method;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.optimizer.lr, 1e-4);
        assert_eq!(c.optimizer.weight_decay, 5e-4);
        assert_eq!(c.model.downsampling, 128);
        assert_eq!(c.model.n_tiles, 200);
        assert_eq!(c.training.batch_size, 10);
        assert_eq!(c.model.sparse_conv_channels, vec![32, 32]);
    }

    #[test]
    fn nested_overrides() {
        let c = RunConfig::from_json(r#"{"model": {"method": "attention", "augment": {"jitter_radius": 2}}, "optimizer": {"lr": 0.01}}"#)
            .unwrap();
        assert_eq!(c.model.method, Method::Attention);
        assert_eq!(c.model.augment.jitter_radius, 2);
        assert_eq!(c.optimizer.lr, 0.01);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::from_json(r#"{"model": {"downsamplin": 4}}"#).unwrap_err().to_string();
        assert!(e.contains("downsamplin"), "{e}");
        let e = RunConfig::from_json(r#"{"optimiser": {}}"#).unwrap_err().to_string();
        assert!(e.contains("optimiser"), "{e}");
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }
}
