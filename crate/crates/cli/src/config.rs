//! The resolved run configuration.
//!
//! One TOML file drives every command. Missing keys take their defaults,
//! unknown keys are rejected, and each command writes the fully resolved
//! file next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use biscc::datamodel::SyntheticSpec;
use biscc::localize::LocalizeConfig;
use biscc::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub localize: LocalizeConfig,
    pub eval: EvalConfig,
    pub report: ReportConfig,
    pub inputs: Inputs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (1..=7).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Test videos drawn as traces.
    pub videos: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { videos: 5 }
    }
}

/// Input paths a command consumed, recorded for reproduction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detections: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|message| CliError::Config {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }

    /// Every randomness source follows one seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.localize.validate()?;
        if self.eval.iou_thresholds.is_empty() {
            return Err(CliError::usage("eval.iou_thresholds is empty"));
        }
        if let Some(t) = self.eval.iou_thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(CliError::usage(format!("eval IoU threshold {t} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }
}
