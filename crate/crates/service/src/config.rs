use std::path::{Path, PathBuf};

use abis_core::index::DEFAULT_SHARD_ROWS;
use abis_core::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

/// Used when neither an explicit threshold nor calibration probes are
/// configured. Flags roughly 0.1% of non-mated searches against a 100K
/// gallery under the reference synthetic model with the adult weights.
pub const DEFAULT_ADJUDICATION_THRESHOLD: f32 = 0.12;

/// About 1e-4 false matches per 1:1 comparison under the same model.
pub const DEFAULT_VERIFICATION_THRESHOLD: f32 = 0.075;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Gallery file loaded at startup; must exist when set.
    pub gallery_path: Option<PathBuf>,
    /// Directory for case, audit and enrollment logs and gallery snapshots.
    /// Without it the service keeps everything in memory.
    pub state_dir: Option<PathBuf>,
    /// Weight profile TOML; the adult profile when unset.
    pub weight_profile: Option<PathBuf>,
    /// Fused score at or above which an enrollment is held for adjudication.
    pub adjudication_threshold: Option<f32>,
    /// Gallery-format probe file of non-mated captures used to derive the
    /// adjudication threshold from `flag_rate` when no threshold is set.
    pub calibration_probes: Option<PathBuf>,
    pub flag_rate: f64,
    pub verification_threshold: f32,
    pub shard_rows: usize,
    pub max_rows: Option<usize>,
    /// Candidates kept on an adjudication case and returned by search.
    pub candidates: usize,
    /// Snapshot the gallery after this many committed inserts.
    pub snapshot_interval: u64,
    /// Static console assets served under `/ui/`.
    pub ui_dir: Option<PathBuf>,
    pub pipeline: PipelineConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            gallery_path: None,
            state_dir: None,
            weight_profile: None,
            adjudication_threshold: None,
            calibration_probes: None,
            flag_rate: 0.001,
            verification_threshold: DEFAULT_VERIFICATION_THRESHOLD,
            shard_rows: DEFAULT_SHARD_ROWS,
            max_rows: None,
            candidates: 10,
            snapshot_interval: 1000,
            ui_dir: None,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ServiceError> {
        let config: Self = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: &str| Err(ServiceError::Config(m.into()));
        if self.shard_rows == 0 {
            return bad("shard_rows must be positive");
        }
        if self.candidates == 0 {
            return bad("candidates must be positive");
        }
        if !(0.0..1.0).contains(&self.flag_rate) || self.flag_rate == 0.0 {
            return bad("flag_rate must be in (0, 1)");
        }
        for t in [Some(self.verification_threshold), self.adjudication_threshold].into_iter().flatten() {
            if !(-1.0..=1.0).contains(&t) {
                return bad("thresholds must be in [-1, 1]");
            }
        }
        Ok(())
    }
}
