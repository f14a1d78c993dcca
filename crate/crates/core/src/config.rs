//! The single JSON run configuration. Every field is optional and falls back
//! to its documented default; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaze::FilterConfig;
use crate::gazemix::RectOptions;
use crate::model::UNetConfig;
use crate::synth::{GazeSimConfig, WorldConfig};
use crate::trainer::{GazePrep, TrainerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GazeSection {
    /// Fixation velocity threshold in px/s.
    pub v_th: f64,
    /// Heatmap kernel width; `null` uses 5% of the image width.
    pub sigma_px: Option<f64>,
    pub simulation: GazeSimConfig,
}

impl Default for GazeSection {
    fn default() -> Self {
        Self {
            v_th: FilterConfig::default().v_th,
            sigma_px: None,
            simulation: GazeSimConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    #[default]
    Validation,
    /// The unlabeled training split scored against its withheld labels.
    Unlabeled,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: EvalSplit,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub gaze: GazeSection,
    pub mix: RectOptions,
    pub model: UNetConfig,
    pub train: TrainerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: String| ConfigError::Invalid {
            key: key.to_string(),
            message,
        };
        self.world
            .validate()
            .map_err(|e| invalid("world", e.to_string()))?;
        if !(self.world.labeling_ratio > 0.0 && self.world.labeling_ratio <= 1.0) {
            return Err(invalid(
                "world.labeling_ratio",
                format!("{} is outside (0, 1]", self.world.labeling_ratio),
            ));
        }
        if !(self.gaze.v_th > 0.0) {
            return Err(invalid("gaze.v_th", "must be positive".into()));
        }
        if self.gaze.sigma_px.is_some_and(|s| !(s > 0.0)) {
            return Err(invalid("gaze.sigma_px", "must be positive".into()));
        }
        self.model
            .validate()
            .map_err(|e| invalid("model", e.to_string()))?;
        if self.model.num_classes != self.world.num_classes {
            return Err(invalid(
                "model.num_classes",
                format!("must equal world.num_classes ({})", self.world.num_classes),
            ));
        }
        let unit = 1usize << self.model.depth;
        if !self.world.width.is_multiple_of(unit) || !self.world.height.is_multiple_of(unit) {
            return Err(invalid(
                "model.depth",
                format!("image sides must be divisible by {unit}"),
            ));
        }
        self.train
            .validate()
            .map_err(|e| invalid("train", e.to_string()))?;
        Ok(())
    }

    pub fn gaze_prep(&self) -> GazePrep {
        GazePrep {
            filter: FilterConfig {
                v_th: self.gaze.v_th,
            },
            sigma_px: self.gaze.sigma_px,
            rect: self.mix,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }
}
