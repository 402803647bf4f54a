use std::path::Path;

use serde::{Deserialize, Serialize};
use smallify_core::{ArchSpec, Error, PenaltyConfig, Result, ScheduleConfig, ScreenerConfig};

/// Everything one training run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    #[serde(default)]
    pub screener: ScreenerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Epochs of unchanged layer sizes before an epoch counts as size-converged.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Hard cap on epochs in case the schedule never stops.
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    64
}

fn default_window() -> usize {
    3
}

fn default_max_epochs() -> usize {
    200
}

impl TrainConfig {
    pub fn new(arch: ArchSpec) -> Self {
        TrainConfig {
            arch,
            penalty: PenaltyConfig::default(),
            screener: ScreenerConfig::default(),
            schedule: ScheduleConfig::default(),
            lr: default_lr(),
            batch: default_batch(),
            seed: 0,
            window: default_window(),
            max_epochs: default_max_epochs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.penalty.validate()?;
        self.screener.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("size-convergence window must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        let s = &self.schedule;
        if s.patience == 0 || !(s.factor > 1.0) || !(s.min_lr > 0.0) {
            return Err(Error::Config(format!("bad schedule {s:?}")));
        }
        Ok(())
    }

    /// Pruning is off: no penalty on the switches and no screening.
    pub fn pruning_disabled(&self) -> bool {
        self.penalty.lambda == 0.0 && self.screener.threshold == f64::INFINITY
    }

    /// Reads `.json` as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            _ => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
