//! Run configuration files.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::estimator::{ErrorMethod, ShotNoisePoint};
use crate::experiment::SequenceConfig;
use crate::grid_oracle::GridParams;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Theory,
    Simulate,
    Estimate,
    Sweep,
    OracleCheck,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Theory => "theory",
            Mode::Simulate => "simulate",
            Mode::Estimate => "estimate",
            Mode::Sweep => "sweep",
            Mode::OracleCheck => "oracle-check",
        }
    }
}

/// Angles `start + k·(stop - start)/count`, `k < count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaGridSpec {
    #[serde(default)]
    pub start: f64,
    #[serde(default = "full_turn")]
    pub stop: f64,
    pub count: usize,
}

fn full_turn() -> f64 {
    TAU
}

impl Default for ThetaGridSpec {
    fn default() -> Self {
        Self {
            start: 0.0,
            stop: TAU,
            count: 360,
        }
    }
}

impl ThetaGridSpec {
    pub fn angles(&self) -> Vec<f64> {
        crate::past_state::theta_grid(self.start, self.stop, self.count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

/// Grid oracle settings; off-axis optical values are only computed when enabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default = "default_points")]
    pub points: usize,
}

fn yes() -> bool {
    true
}
fn default_half_width() -> f64 {
    GridParams::default().half_width
}
fn default_points() -> usize {
    GridParams::default().points
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            half_width: default_half_width(),
            points: default_points(),
        }
    }
}

impl OracleSpec {
    pub fn grid(&self) -> GridParams {
        GridParams::new(self.half_width, self.points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EstimateSpec {
    /// Record files, relative to the config file.
    #[serde(default)]
    pub records: Vec<PathBuf>,
    #[serde(default)]
    pub error_method: ErrorMethod,
}

/// Optical calibration: an explicit coupling, or a thermal-state run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    #[serde(default)]
    pub kappa2_sq: Option<f64>,
    #[serde(default)]
    pub thermal_variance: Option<f64>,
    #[serde(default)]
    pub operating_power: Option<f64>,
    #[serde(default)]
    pub shot_noise: Vec<ShotNoisePoint>,
}

/// Top-level configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub mode: Option<Mode>,
    /// Overrides `sequence.seed`.
    #[serde(default)]
    pub seed: Option<u64>,
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub theta_grid: ThetaGridSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub estimate: EstimateSpec,
    #[serde(default)]
    pub calibration: CalibrationSpec,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Checks the fields `mode` needs and applies the seed override.
    pub fn prepare(mut self, mode: Mode) -> Result<Self> {
        if let Some(declared) = self.mode {
            if declared != mode {
                return Err(Error::Config(format!(
                    "config is for `{}` but `{}` was requested",
                    declared.name(),
                    mode.name()
                )));
            }
        }
        if let Some(seed) = self.seed {
            self.sequence.seed = seed;
        }
        self.sequence.validate().map_err(|e| Error::Config(e.to_string()))?;
        if matches!(mode, Mode::Theory | Mode::Sweep) && self.theta_grid.count == 0 {
            return Err(Error::Config("theta_grid.count must be positive".into()));
        }
        if matches!(mode, Mode::Theory | Mode::Sweep | Mode::OracleCheck | Mode::Estimate) && !self.sequence.is_four_pulse() {
            return Err(Error::Config(format!("`{}` needs the four-pulse sequence", mode.name())));
        }
        if matches!(mode, Mode::Simulate | Mode::Sweep) && self.sequence.repetitions == 0 {
            return Err(Error::Config("sequence.repetitions must be positive".into()));
        }
        if mode == Mode::OracleCheck || (mode == Mode::Theory && self.oracle.enabled) {
            self.oracle.grid().validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(self)
    }

    /// Resolves a path relative to the config file.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
[sequence]
repetitions = 10
seed = 3
pulses = [
  { theta_rad = 0.0, kappa_sq = 1.7, duration_ms = 1.0 },
  { theta_rad = 0.0, kappa_sq = 0.81, duration_ms = 0.5 },
  { theta_rad = 1.5707963267948966, kappa_sq = 3.3, duration_ms = 2.0 },
  { theta_rad = 0.0, kappa_sq = 2.2, duration_ms = 1.0 },
]
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.theta_grid.count, 360);
        assert_eq!(cfg.oracle.grid(), GridParams::default());
        assert_eq!(cfg.estimate.error_method, ErrorMethod::Jackknife);
        assert!(cfg.prepare(Mode::Theory).is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[output]\ndir = \"x\"\ncolour = 1\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
        let text = MINIMAL.replace("seed = 3", "seed = 3\nsead = 4");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn schema_and_mode_are_checked() {
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 2");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 1\nmode = \"simulate\"");
        let cfg = RunConfig::from_toml(&text).unwrap();
        assert!(cfg.clone().prepare(Mode::Simulate).is_ok());
        assert!(matches!(cfg.prepare(Mode::Theory), Err(Error::Config(_))));
    }

    #[test]
    fn seed_override_applies() {
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 1\nseed = 42");
        let cfg = RunConfig::from_toml(&text).unwrap().prepare(Mode::Simulate).unwrap();
        assert_eq!(cfg.sequence.seed, 42);
    }
}
