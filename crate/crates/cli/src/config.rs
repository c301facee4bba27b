//! Run configuration file (TOML). Every section is optional; command-line
//! flags override whatever the file sets.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use tdcae::detector::{DetectorConfig, ThresholdGrid};
use tdcae::diagnostics;
use tdcae::pipeline::{Subset, DEFAULT_TEST_FRACTION};
use tdcae::synthetic::SyntheticConfig;
use tdcae::{PendulumConfig, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub data: DataSection,
    pub training: TrainingConfig,
    /// Detector settings; the subset's defaults apply when absent.
    pub detector: Option<DetectorConfig>,
    pub grid: Option<ThresholdGrid>,
    pub diagnostics: DiagnosticsSection,
    pub pendulum: PendulumConfig,
    pub simulate: SimulateSection,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out: PathBuf::from("runs"),
            data: DataSection::default(),
            training: TrainingConfig::default(),
            detector: None,
            grid: None,
            diagnostics: DiagnosticsSection::default(),
            pendulum: PendulumConfig::default(),
            simulate: SimulateSection::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub subset: Subset,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: None,
            subset: Subset::Fd001,
            test_fraction: DEFAULT_TEST_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsSection {
    pub rank_threshold: f64,
    pub injectivity_delta: f64,
    pub injectivity_floor: f64,
    pub max_pairs: usize,
    /// Moving-average window applied before the consistency metrics.
    pub smoothing: Option<usize>,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            rank_threshold: diagnostics::DEFAULT_RANK_THRESHOLD,
            injectivity_delta: diagnostics::INJECTIVITY_DELTA,
            injectivity_floor: diagnostics::INJECTIVITY_FLOOR,
            max_pairs: diagnostics::DEFAULT_MAX_PAIRS,
            smoothing: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateSection {
    /// Phase-slice window (sample indices) used for box counting.
    pub slice_start: usize,
    pub slice_end: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            slice_start: 0,
            slice_end: 1000,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn detector(&self) -> DetectorConfig {
        let mut d = self
            .detector
            .clone()
            .unwrap_or_else(|| self.data.subset.detector_defaults());
        d.latent_dim = self.training.latent_dim;
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("config lists no seeds");
        }
        if let Some(dir) = &self.data.dir {
            if !dir.is_dir() {
                bail!("data directory {} does not exist", dir.display());
            }
        }
        self.training.validate()?;
        self.detector().validate()?;
        Ok(())
    }
}
