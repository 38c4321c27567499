//! TOML configuration covering every tunable of the simulator.
//!
//! ```toml
//! [scene]
//! height = 32
//! num_cavs = 2
//!
//! [train]
//! stage1_steps = 2000
//!
//! [experiment]
//! scenes = 200
//!
//! [experiment.snr_sweep]
//! methods = ["cmsc", "baseline_256qam"]
//! cav_modalities = "random"
//! ```
//!
//! Every section and key is optional; omitted values take their defaults.

use crate::error::{Error, Result};
use crate::harness::ExperimentConfig;
use crate::model::ModelConfig;
use crate::perception::PerceptionConfig;
use crate::scene::{RenderConfig, SceneConfig};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scene: SceneConfig,
    pub render: RenderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub perception: PerceptionConfig,
    pub experiment: ExperimentConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        if self.render.channels == 0 {
            return Err(Error::Config("render.channels must be positive".into()));
        }
        if !self
            .render
            .channels
            .is_multiple_of(self.model.converter.se_reduction)
        {
            return Err(Error::Config(format!(
                "render.channels {} not divisible by the SE reduction {}",
                self.render.channels, self.model.converter.se_reduction
            )));
        }
        let p = &self.perception;
        if !(p.score_threshold >= 0.0 && p.score_threshold < 1.0)
            || !(p.nms_iou > 0.0 && p.nms_iou <= 1.0)
        {
            return Err(Error::Config("perception thresholds out of range".into()));
        }
        if p.fusion_kernel.is_multiple_of(2) {
            return Err(Error::Config("perception.fusion_kernel must be odd".into()));
        }
        let e = &self.experiment;
        if e.num_cavs == 0 {
            return Err(Error::Config("experiment.num_cavs must be positive".into()));
        }
        let snrs = e.snr_sweep.snrs.iter().chain(&e.lambda_sweep.snrs);
        if snrs
            .chain([&e.sensor_matrix.snr_db])
            .any(|s| s.is_nan() || *s == f64::NEG_INFINITY)
        {
            return Err(Error::Config(
                "SNR values must be numbers (inf means noiseless)".into(),
            ));
        }
        Ok(())
    }
}
