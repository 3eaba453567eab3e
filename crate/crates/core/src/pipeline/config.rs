//! Run configuration, persisted as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::DEFAULT_B_MAX;
use crate::error::{BasnError, Result};
use crate::extractor::ClassifierTrainConfig;
use crate::fusion::{FinetuneConfig, FusionStrategy};
use crate::itc::ItcTrainConfig;
use crate::mfd::MfdTrainConfig;
use crate::models::{ClassifierSpec, UNetSpec};
use crate::nn::OptimizerConfig;
use crate::synthetic::NUM_CLASSES;

use super::strategy::StrategyName;

/// Bumped whenever a field changes meaning or is removed.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Bundled generator; labels come with the images.
    Synthetic,
    /// Lossless images from a directory, sorted by file name.
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub image_size: usize,
    pub train_images: usize,
    pub holdout_images: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub unet: UNetSpec,
    pub classifier: ClassifierSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSettings {
    /// Default strategy for embed/extract, e.g. `Min-LSM-1`.
    pub strategy: String,
    pub b_max: u8,
    /// Seed for permutative straddling; derived from the run seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ps_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub strategies: Vec<String>,
    /// Clean images for the LSB-replacement detector check.
    pub detector_images: usize,
    /// Images in each half of the clean-vs-clean null comparison.
    pub null_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub classifier: ClassifierTrainConfig,
    pub itc: ItcTrainConfig,
    pub mfd_phase1: MfdTrainConfig,
    pub mfd_phase2: MfdTrainConfig,
    pub finetune: FinetuneConfig,
    pub codec: CodecSettings,
    pub evaluate: EvaluateConfig,
}

impl RunConfig {
    /// Desk-scale run on the synthetic corpus at 64x64.
    pub fn toy(output_dir: impl Into<PathBuf>) -> Self {
        let unet = UNetSpec {
            in_channels: 3,
            base_channels: 8,
            depth: 4,
        };
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 20240229,
            output_dir: output_dir.into(),
            dataset: DatasetConfig {
                kind: DatasetKind::Synthetic,
                path: None,
                image_size: 64,
                train_images: 64,
                holdout_images: 32,
            },
            network: NetworkConfig {
                unet,
                classifier: ClassifierSpec {
                    in_channels: 3,
                    base_channels: 8,
                    classes: NUM_CLASSES,
                },
            },
            classifier: ClassifierTrainConfig {
                optimizer: OptimizerConfig::Adam {
                    learning_rate: 0.005,
                },
                batch_size: 16,
                epochs: 150,
            },
            itc: ItcTrainConfig {
                optimizer: OptimizerConfig::Adam {
                    learning_rate: 0.001,
                },
                batch_size: 8,
                epochs: 20,
                ..ItcTrainConfig::default()
            },
            mfd_phase1: MfdTrainConfig {
                optimizer: OptimizerConfig::Nesterov {
                    learning_rate: 0.2,
                    momentum: 0.9,
                },
                batch_size: 16,
                ..MfdTrainConfig::phase1()
            },
            mfd_phase2: MfdTrainConfig {
                optimizer: OptimizerConfig::Adam {
                    learning_rate: 0.001,
                },
                batch_size: 16,
                ..MfdTrainConfig::phase2()
            },
            finetune: FinetuneConfig {
                strategy: FusionStrategy::Mean,
                phase1_epochs: 10,
                phase2_epochs: 10,
                ..FinetuneConfig::default()
            },
            codec: CodecSettings {
                strategy: "Mean-LSM-1".into(),
                b_max: DEFAULT_B_MAX,
                ps_seed: None,
            },
            evaluate: EvaluateConfig {
                strategies: vec!["Min-LSM-1".into(), "Mean-LSM-1".into(), "Mean-LSM-1-PS-1.2".into()],
                detector_images: 50,
                null_images: 200,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BasnError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "config schema {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let d = &self.dataset;
        if d.train_images == 0 {
            return bad("dataset.train_images must be positive".into());
        }
        if d.kind == DatasetKind::Folder && d.path.is_none() {
            return bad("dataset.path is required for folder datasets".into());
        }
        self.network
            .unet
            .check_input(self.network.unet.in_channels, d.image_size, d.image_size)
            .map_err(|e| BasnError::Config(e.to_string()))?;
        if self.network.classifier.in_channels != self.network.unet.in_channels {
            return bad("classifier and attention networks disagree on channels".into());
        }
        if self.evaluate.detector_images == 0 || self.evaluate.null_images == 0 {
            return bad("evaluate image counts must be positive".into());
        }
        self.classifier.validate()?;
        self.itc.validate()?;
        self.mfd_phase1.validate()?;
        self.mfd_phase2.validate()?;
        self.finetune.validate()?;
        StrategyName::parse(&self.codec.strategy)?;
        for s in &self.evaluate.strategies {
            StrategyName::parse(s)?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| BasnError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| BasnError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn log_dir(&self) -> PathBuf {
        self.output_dir.join("logs")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_round_trips_through_toml() {
        let cfg = RunConfig::toy("runs/toy");
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_schema_and_fields_rejected() {
        let mut cfg = RunConfig::toy("x");
        cfg.schema_version = 99;
        assert!(cfg.validate().is_err());
        let text = RunConfig::toy("x").to_toml().unwrap() + "\nsurprise = 1\n";
        assert!(RunConfig::from_toml(&text).is_err());
    }
}
