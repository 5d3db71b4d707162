//! Run configuration: one TOML file covering every subcommand, with CLI
//! flags overriding file values. The merged ("effective") config is written
//! into each output directory so runs stay reproducible.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ra_core::metrics::{DEFAULT_CALIBRATION_PERCENTILE, DEFAULT_MIN_FP_AREA};
use ra_core::scoring::ScoringConfig;
use ra_core::synth::SynthConfig;
use ra_core::trainer::TrainConfig;
use ra_core::{RaError, Result};

pub const EFFECTIVE_CONFIG: &str = "effective-config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset root: manifests plus their images/masks.
    pub data_root: Option<PathBuf>,
    /// Where a subcommand writes its artifacts.
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Perceptual backend for scoring: an ra-feat-v1 feature file, or the
    /// literal `bank` for the built-in generic filter bank. Unset: the
    /// checkpoint's own encoder.
    pub features: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Fixed pixel threshold; when absent it is calibrated on healthy maps.
    pub threshold: Option<f64>,
    pub calibration_percentile: f64,
    /// False-positive blobs smaller than this many pixels are ignored.
    pub min_fp_area: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            threshold: None,
            calibration_percentile: DEFAULT_CALIBRATION_PERCENTILE,
            min_fp_area: DEFAULT_MIN_FP_AREA,
        }
    }
}

impl EvaluateConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.threshold {
            if !t.is_finite() {
                return Err(RaError::Config(format!("threshold must be finite, got {t}")));
            }
        }
        if !(self.calibration_percentile > 0.0 && self.calibration_percentile < 100.0) {
            return Err(RaError::Config(format!(
                "calibration_percentile must lie in (0, 100), got {}",
                self.calibration_percentile
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub synth: SynthConfig,
    pub evaluate: EvaluateConfig,
}

impl RunConfig {
    /// Defaults when no file is given; strict parse otherwise (unknown keys
    /// are named in the error).
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = fs::read_to_string(path).map_err(|e| RaError::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| RaError::Config(format!("invalid config {}: {e}", path.display())))
    }

    /// Snapshot the merged configuration next to the artifacts it produced.
    pub fn write_effective(&self, out_dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| RaError::Config(format!("cannot encode config: {e}")))?;
        let path = out_dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, text).map_err(|e| RaError::io(&path, e))
    }
}

/// Honor RA_NUM_WORKERS before any parallel work starts.
pub fn init_worker_pool() -> Result<()> {
    let Ok(raw) = std::env::var("RA_NUM_WORKERS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| {
            RaError::Config(format!("RA_NUM_WORKERS must be a positive integer, got {raw:?}"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| RaError::Config(format!("worker pool: {e}")))
}
