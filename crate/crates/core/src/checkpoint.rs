//! Versioned JSON checkpoints holding everything needed to reproduce
//! inference: weights, scaler, split and training configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DatasetSplit, ScalerParams};
use crate::detector::{DetectorConfig, Thresholds};
use crate::net::{NetError, Network};
use crate::tdc::TrainingConfig;

pub const FORMAT: &str = "tdcae-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint {format} v{version} (expected {FORMAT} v{VERSION})")]
    Version { format: String, version: u32 },
    #[error("inconsistent checkpoint: {0}")]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Vec<usize>,
    pub network: Network<f64>,
    pub scaler: ScalerParams,
    pub split: Option<DatasetSplit>,
    pub seed: u64,
    pub training: TrainingConfig,
    #[serde(default)]
    pub detector: Option<DetectorConfig>,
    #[serde(default)]
    pub thresholds: Option<Thresholds>,
}

impl Checkpoint {
    pub fn new(
        network: Network<f64>,
        scaler: ScalerParams,
        split: Option<DatasetSplit>,
        training: TrainingConfig,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            architecture: network.widths(),
            network,
            scaler,
            split,
            seed: training.seed,
            training,
            detector: None,
            thresholds: None,
        }
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let json = serde_json::to_vec_pretty(self).map_err(|source| CheckpointError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&json).and_then(|_| f.sync_all()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|source| CheckpointError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        let format = value
            .get("format")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if format != FORMAT || version != VERSION {
            return Err(CheckpointError::Version { format, version });
        }
        let mut ck: Checkpoint =
            serde_json::from_value(value).map_err(|source| CheckpointError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        ck.network =
            Network::from_layers(ck.network.layers().to_vec(), ck.network.encoder_depth())?;
        if ck.network.widths() != ck.architecture {
            return Err(NetError::InvalidArchitecture(format!(
                "stored architecture {:?} does not match layers {:?}",
                ck.architecture,
                ck.network.widths()
            ))
            .into());
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Architecture;

    fn sample() -> Checkpoint {
        let mut rng = crate::seed::component_rng(7, crate::seed::INIT);
        let net = Network::<f64>::autoencoder(&Architecture::micro(24, 8), &mut rng).unwrap();
        let scaler = ScalerParams {
            min: vec![0.1; 24],
            max: vec![1.0 / 3.0; 24],
        };
        let split = DatasetSplit {
            train_engines: vec![1, 2, 4],
            test_engines: vec![3],
            val_fraction: 0.1,
        };
        Checkpoint::new(net, scaler, Some(split), TrainingConfig::default())
    }

    #[test]
    fn exact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut ck = sample();
        ck.thresholds = Some(Thresholds {
            upper: vec![0.1; 8],
            lower: vec![-0.1; 8],
        });
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.network.flat_params(), ck.network.flat_params());
        assert_eq!(back.scaler, ck.scaler);
        assert_eq!(back.split, ck.split);
        assert_eq!(back.thresholds, ck.thresholds);
        assert!(!dir.path().join("model.json.tmp").exists());
    }

    #[test]
    fn rejects_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut ck = sample();
        ck.version = 99;
        ck.save(&path).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Version { version: 99, .. })
        ));
        fs::write(&path, b"{not json").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Json { .. })
        ));
    }
}
