//! Service configuration file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use drscreen::attribution::ClusterParams;
use drscreen::backend::BackendSpec;
use drscreen::calibration::{Calibrator, OperatingPoint};
use drscreen::enhancement::{ClaheParams, EnhanceParams};
use drscreen::{Execution, OrchestratorConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Calibrators {
    #[serde(default)]
    pub dr: Option<Calibrator>,
    #[serde(default)]
    pub gradability: Option<Calibrator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// `heuristic`, `analytic` or `remote:<url>`.
    pub backend: String,
    pub thresholds: OperatingPoint,
    pub calibrators: Calibrators,
    pub clahe: ClaheParams,
    pub clustering: ClusterParams,
    pub store_path: PathBuf,
    pub seed: u64,
    pub inference_timeout_secs: f64,
    pub stretch_percentiles: (f64, f64),
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            backend: "heuristic".into(),
            thresholds: OperatingPoint::default(),
            calibrators: Calibrators::default(),
            clahe: ClaheParams::default(),
            clustering: ClusterParams::default(),
            store_path: PathBuf::from("drscreen-events.jsonl"),
            seed: 0,
            inference_timeout_secs: 30.0,
            stretch_percentiles: (1.0, 99.0),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let config: ServiceConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backend_spec()?;
        self.thresholds.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !self.clahe.is_valid() {
            return Err(ConfigError::Invalid(format!("bad CLAHE parameters {:?}", self.clahe)));
        }
        let (lo, hi) = self.stretch_percentiles;
        if !(0.0..100.0).contains(&lo) || !(lo < hi && hi <= 100.0) {
            return Err(ConfigError::Invalid(format!("bad stretch percentiles ({lo}, {hi})")));
        }
        if !(self.inference_timeout_secs > 0.0 && self.inference_timeout_secs.is_finite()) {
            return Err(ConfigError::Invalid("inference_timeout_secs must be positive".into()));
        }
        if self.clustering.min_size == 0 || self.clustering.eps.is_nan() || self.clustering.eps <= 0.0 {
            return Err(ConfigError::Invalid(format!("bad clustering parameters {:?}", self.clustering)));
        }
        Ok(())
    }

    pub fn backend_spec(&self) -> Result<BackendSpec, ConfigError> {
        self.backend.parse().map_err(|e: drscreen::BackendError| ConfigError::Invalid(e.to_string()))
    }

    pub fn inference_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.inference_timeout_secs)
    }

    pub fn orchestrator(&self, execution: Execution) -> OrchestratorConfig {
        OrchestratorConfig {
            operating_point: self.thresholds,
            dr_calibrator: self.calibrators.dr.clone(),
            gradability_calibrator: self.calibrators.gradability.clone(),
            clustering: self.clustering,
            execution,
            ..OrchestratorConfig::default()
        }
    }

    pub fn enhance_params(&self) -> EnhanceParams {
        EnhanceParams { lo_pct: self.stretch_percentiles.0, hi_pct: self.stretch_percentiles.1, clahe: self.clahe }
    }
}
