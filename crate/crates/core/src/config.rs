//! TOML run configuration with one section per component.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::DataConfig;
use crate::pipeline::InferenceConfig;
use crate::schedule::ScheduleConfig;
use crate::trainer::{AdapterConfig, PretrainConfig, TrainConfig, TrainParams};
use crate::{Error, Result};

/// Unknown keys anywhere in the document are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfigFile {
    pub schedule: ScheduleConfig,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub train: TrainParams,
    pub data: DataConfig,
    pub infer: InferenceConfig,
    pub pretrain: PretrainConfig,
}

impl CliConfigFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            params: self.train.clone(),
            schedule: self.schedule.clone(),
            backbone: self.backbone.clone(),
            adapter: self.adapter.clone(),
            data: self.data.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = CliConfigFile::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(CliConfigFile::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = CliConfigFile::from_toml(
            "[train]\nlearning_rate = 0.001\n[train.weights]\nlambda2 = 0.5\n[schedule]\nspacing = \"scaled_linear\"\n",
        )
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.weights.lambda2, 0.5);
        assert_eq!(cfg.train.weights.lambda1, 1e-3);
        assert_eq!(cfg.train.grad_accum, 4);
        let again = CliConfigFile::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for doc in ["[train]\nlearnig_rate = 1.0\n", "[trian]\n", "[backbone]\nbase_channel = 4\n", "top = 1\n"] {
            assert!(CliConfigFile::from_toml(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let cfg = CliConfigFile::load(&path).unwrap();
            cfg.train_config().validate().unwrap();
        }
    }
}
