//! Run configuration loaded from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evalkit::EvalConfig;
use crate::optimizer::{NoiseModel, OptimError, RobustKernel, SolverConfig};
use crate::simworld::{DriveConfig, SensorNoiseConfig, WorldConfig};
use crate::wire;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    /// The localized drive: low-grade INS.
    pub drive: SensorNoiseConfig,
    /// The mapping pass the library is built from.
    pub survey: SensorNoiseConfig,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            drive: SensorNoiseConfig::default(),
            survey: SensorNoiseConfig {
                ins_bias_rw_sigma: 0.01,
                ins_heading_rw_sigma: 0.0002,
                gnss_correction_time_s: Some(1.0),
                ..SensorNoiseConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurveyConfig {
    /// Arc-length offset of the mapping pass relative to the drive. Anchors
    /// sit at matched library poses, so a non-zero offset shows up as an
    /// along-track anchor bias of up to half the frame spacing.
    pub offset_m: f64,
    /// Constant error added to every geographic stamp in the library.
    pub map_bias_m: [f64; 3],
}

impl Default for SurveyConfig {
    fn default() -> Self {
        Self {
            offset_m: 0.0,
            map_bias_m: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizeConfig {
    /// Distance gate radius, metres.
    pub delta_m: f64,
    /// Box-deviation gate, pixels. Zero disables matching.
    pub xi_px: f64,
    pub reinit_threshold_m: f64,
    /// Every n-th frame is a keyframe.
    pub keyframe_interval: usize,
    /// Keyframes in the optimization window.
    pub window_keyframes: usize,
    /// Solve after this many new keyframes (and at the end).
    pub solve_every: usize,
    pub align_frames: usize,
    pub align_max_frames: usize,
    pub align_min_conditioning: f64,
    /// Ignore ground-truth ids in detections and track boxes instead.
    pub strip_ids: bool,
    /// Boxes this close to the image border are treated as clipped.
    pub border_margin_px: f64,
    /// Segment boxes must stay this far from the principal column.
    pub center_margin_px: f64,
    pub min_parallax_deg: f64,
    /// Library grid cell; defaults to `delta_m`.
    pub grid_cell_m: Option<f64>,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            delta_m: 15.0,
            xi_px: 15.0,
            reinit_threshold_m: 2.0,
            keyframe_interval: 5,
            window_keyframes: 20,
            solve_every: 10,
            align_frames: 8,
            align_max_frames: 64,
            align_min_conditioning: 0.1,
            strip_ids: false,
            border_margin_px: 2.0,
            center_margin_px: 64.0,
            min_parallax_deg: 1.0,
            grid_cell_m: None,
        }
    }
}

impl LocalizeConfig {
    pub fn grid_cell(&self) -> f64 {
        self.grid_cell_m.unwrap_or(self.delta_m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorConfig {
    pub pixel_sigma_px: f64,
    /// Anchor standard deviations (east, north, up), metres.
    pub anchor_sigma_m: [f64; 3],
    /// Huber thresholds in whitened units; `None` disables the kernel.
    pub pixel_huber: Option<f64>,
    pub anchor_huber: Option<f64>,
}

impl Default for FactorConfig {
    fn default() -> Self {
        Self {
            pixel_sigma_px: 1.0,
            anchor_sigma_m: [0.5, 0.5, 1.0],
            pixel_huber: Some(2.0),
            anchor_huber: Some(1.0),
        }
    }
}

impl FactorConfig {
    pub fn pixel_noise(&self) -> Result<NoiseModel<2>, OptimError> {
        NoiseModel::isotropic(self.pixel_sigma_px * self.pixel_sigma_px)
    }

    pub fn anchor_noise(&self) -> Result<NoiseModel<3>, OptimError> {
        let s = self.anchor_sigma_m;
        NoiseModel::diagonal([s[0] * s[0], s[1] * s[1], s[2] * s[2]])
    }

    pub fn kernels(&self) -> Result<(RobustKernel, RobustKernel), OptimError> {
        let k = |h: Option<f64>| h.map_or(Ok(RobustKernel::None), RobustKernel::huber);
        Ok((k(self.pixel_huber)?, k(self.anchor_huber)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub drive: DriveConfig,
    pub noise: NoiseSection,
    pub survey: SurveyConfig,
    pub localize: LocalizeConfig,
    pub factors: FactorConfig,
    pub optimizer: SolverConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            world: WorldConfig::default(),
            drive: DriveConfig::default(),
            noise: NoiseSection::default(),
            survey: SurveyConfig::default(),
            localize: LocalizeConfig::default(),
            factors: FactorConfig::default(),
            // Windows are re-solved as the drive proceeds; a loose stopping
            // rule loses nothing measurable and keeps localization fast.
            optimizer: SolverConfig {
                max_iterations: 30,
                relative_decrease_tol: 1e-6,
                ..SolverConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.world.validate().map_err(|e| inv(&e))?;
        self.drive.validate().map_err(|e| inv(&e))?;
        self.noise.drive.validate().map_err(|e| inv(&e))?;
        self.noise.survey.validate().map_err(|e| inv(&e))?;
        self.optimizer.validate().map_err(|e| inv(&e))?;
        self.eval.validate().map_err(|e| inv(&e))?;
        self.factors.pixel_noise().map_err(|e| inv(&e))?;
        self.factors.anchor_noise().map_err(|e| inv(&e))?;
        self.factors.kernels().map_err(|e| inv(&e))?;
        let l = &self.localize;
        if !(l.delta_m > 0.0) || !(l.xi_px >= 0.0) || !(l.reinit_threshold_m > 0.0) {
            return Err(ConfigError::Invalid("delta_m and reinit_threshold_m must be positive, xi_px non-negative".into()));
        }
        if l.keyframe_interval == 0 || l.solve_every == 0 || l.window_keyframes < l.solve_every {
            return Err(ConfigError::Invalid(
                "keyframe_interval and solve_every must be positive and window_keyframes ≥ solve_every".into(),
            ));
        }
        if l.align_frames < 3 || l.align_max_frames < l.align_frames {
            return Err(ConfigError::Invalid("align_frames must be ≥ 3 and ≤ align_max_frames".into()));
        }
        if !(l.grid_cell() > 0.0) {
            return Err(ConfigError::Invalid("grid_cell_m must be positive".into()));
        }
        if self.survey.map_bias_m.iter().any(|x| !x.is_finite()) || !self.survey.offset_m.is_finite() {
            return Err(ConfigError::Invalid("survey values must be finite".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let json = wire::to_json_line(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

impl SolverConfig {
    /// Parse a flat `key = value` optimizer file.
    pub fn from_toml_str(s: &str) -> Result<Self, String> {
        let cfg: SolverConfig = toml::from_str(s).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }
}
