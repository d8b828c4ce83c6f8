//! Run configuration, serialized as JSON.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{MvoError, Result};
use crate::estimation::{EstimatorConfig, Flavor};
use crate::segmentation::EnergyConfig;
use crate::sliding::PipelineConfig;
use crate::tracklet::InputFormat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    FullBatch,
    #[default]
    SlidingWindow,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub tracklets: PathBuf,
    pub calib: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub input_format: InputFormat,
    pub paths: Paths,
    pub energy: EnergyConfig,
    pub estimator: EstimatorConfig,
    pub max_occlusion_frames: usize,
    pub association_overlap: f64,
    /// Also write one trajectories and one segmentation file per window.
    pub per_window_output: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            mode: Mode::default(),
            seed: p.seed,
            input_format: InputFormat::default(),
            paths: Paths::default(),
            energy: p.energy,
            estimator: p.estimator,
            max_occlusion_frames: p.max_occlusion_frames,
            association_overlap: p.association_overlap,
            per_window_output: true,
        }
    }
}

impl RunConfig {
    pub fn flavor(&self) -> Flavor {
        self.estimator.flavor
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            energy: self.energy.clone(),
            estimator: self.estimator.clone(),
            max_occlusion_frames: self.max_occlusion_frames,
            association_overlap: self.association_overlap,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()
    }

    /// Input files must exist before a run starts.
    pub fn check_inputs(&self) -> Result<()> {
        for (what, p) in [("tracklets", &self.paths.tracklets), ("calib", &self.paths.calib)] {
            if !p.is_file() {
                return Err(MvoError::InvalidInput(format!("{what} file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}
