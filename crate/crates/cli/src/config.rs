//! Run configuration: one JSON file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use rap_core::budget::BudgetMode;
use rap_core::factorize::Method;
use rap_core::recover::KdConfig;
use rap_core::toymodel::{ModelSpec, PretrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scoring {
    Fisher,
    Magnitude,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub count: usize,
    pub window_len: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { count: 16, window_len: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dense checkpoint to start from; when absent a base model is pretrained from `spec`.
    pub model: Option<PathBuf>,
    pub spec: ModelSpec,
    pub pretrain: PretrainConfig,
    pub method: Method,
    pub rho: f64,
    pub scoring: Scoring,
    pub budget: BudgetMode,
    pub kd: KdConfig,
    pub calibration: CalibrationConfig,
    /// Compression ratios for `report` and `sweep`.
    pub ratios: Vec<f64>,
    /// Global seed: model initialization, calibration sampling and distillation.
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            spec: ModelSpec::default(),
            pretrain: PretrainConfig::default(),
            method: Method::Rap,
            rho: 0.3,
            scoring: Scoring::Fisher,
            budget: BudgetMode::Adaptive,
            kd: KdConfig::default(),
            calibration: CalibrationConfig::default(),
            ratios: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            seed: 42,
            out: PathBuf::from("raplab-out"),
        }
    }
}

/// Flag values; `None` leaves the file (or default) value in place.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub rho: Option<f64>,
    pub method: Option<Method>,
    pub scoring: Option<Scoring>,
    pub budget: Option<BudgetMode>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = flags.rho {
            cfg.rho = v;
        }
        if let Some(v) = flags.method {
            cfg.method = v;
        }
        if let Some(v) = flags.scoring {
            cfg.scoring = v;
        }
        if let Some(v) = flags.budget {
            cfg.budget = v;
        }
        if let Some(v) = flags.seed {
            cfg.seed = v;
        }
        if let Some(v) = &flags.out {
            cfg.out = v.clone();
        }
        cfg.spec.seed = cfg.seed;
        cfg.kd.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            bail!("rho {} must lie in [0, 1)", self.rho);
        }
        if let Some(bad) = self.ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            bail!("ratio {bad} must lie in [0, 1)");
        }
        if self.ratios.is_empty() {
            bail!("at least one ratio is required");
        }
        if let Some(m) = &self.model {
            if !m.is_file() {
                bail!("model checkpoint {} does not exist", m.display());
            }
        }
        if self.calibration.count == 0 || self.calibration.window_len < 2 {
            bail!("calibration needs at least one window of two tokens");
        }
        self.spec.validate()?;
        self.kd.validate()?;
        Ok(())
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}
