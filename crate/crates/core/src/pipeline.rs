//! End-to-end orchestration: load, split, scale, train, infer, fit
//! thresholds on training engines, detect and score on held-out engines.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{self, DataError, DatasetSplit, EngineRun, Label, ScalerParams};
use crate::detector::{self, Detection, DetectorConfig, DetectorError, MetricsSummary, Thresholds};
use crate::net::{NetError, Network};
use crate::synthetic::{self, SyntheticConfig};
use crate::tdc::{self, LatentSeries, TrainError, TrainedModel, TrainingConfig};

/// Environment variable naming the directory holding `train_FD00x.txt`.
pub const DATA_DIR_ENV: &str = "TDCAE_CMAPSS_DIR";
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("{0} data not found; pass a data directory or set {DATA_DIR_ENV}")]
    MissingData(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Fd001,
    Fd003,
    Synthetic,
}

impl Subset {
    pub fn file_name(self) -> Option<&'static str> {
        match self {
            Subset::Fd001 => Some("train_FD001.txt"),
            Subset::Fd003 => Some("train_FD003.txt"),
            Subset::Synthetic => None,
        }
    }

    pub fn detector_defaults(self) -> DetectorConfig {
        match self {
            Subset::Fd003 => DetectorConfig::fd003(),
            _ => DetectorConfig::fd001(),
        }
    }
}

impl FromStr for Subset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fd001" => Ok(Subset::Fd001),
            "fd003" => Ok(Subset::Fd003),
            "synthetic" => Ok(Subset::Synthetic),
            other => Err(format!(
                "unknown subset {other:?} (expected fd001, fd003 or synthetic)"
            )),
        }
    }
}

impl std::fmt::Display for Subset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Subset::Fd001 => "FD001",
            Subset::Fd003 => "FD003",
            Subset::Synthetic => "synthetic",
        })
    }
}

/// Resolves the data file for a turbofan subset from `dir`, falling back to
/// the environment variable. Returns `None` when neither yields a file.
pub fn locate_subset(subset: Subset, dir: Option<&Path>) -> Option<PathBuf> {
    let name = subset.file_name()?;
    let dir = dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))?;
    let path = dir.join(name);
    path.is_file().then_some(path)
}

/// Loads a turbofan subset, or generates the synthetic fleet from `seed`.
pub fn load_subset(
    subset: Subset,
    dir: Option<&Path>,
    synthetic: &SyntheticConfig,
    seed: u64,
) -> Result<Vec<EngineRun>, PipelineError> {
    match subset {
        Subset::Synthetic => Ok(synthetic::generate(synthetic, seed)),
        _ => {
            let path = locate_subset(subset, dir)
                .ok_or_else(|| PipelineError::MissingData(subset.to_string()))?;
            Ok(dataio::parse_cmapss(path)?)
        }
    }
}

/// Engine split plus scaled runs on each side.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub scaler: ScalerParams,
    pub train: Vec<EngineRun>,
    pub test: Vec<EngineRun>,
}

/// Splits by engine, fits the scaler on training-engine normal rows and
/// scales both sides.
pub fn prepare(
    runs: &[EngineRun],
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<PreparedData, PipelineError> {
    let mut split = dataio::split_engines(runs, test_fraction, seed)?;
    split.val_fraction = val_fraction;
    let (train_raw, test_raw) = split.partition(runs);
    let scaler = dataio::fit_scaler(&train_raw)?;
    let train = train_raw.iter().map(|r| scaler.apply(r)).collect();
    let test = test_raw.iter().map(|r| scaler.apply(r)).collect();
    Ok(PreparedData {
        split,
        scaler,
        train,
        test,
    })
}

pub fn infer_all(
    net: &Network<f64>,
    runs: &[EngineRun],
) -> Result<Vec<LatentSeries<f64>>, NetError> {
    runs.iter().map(|r| tdc::infer_latent(net, r)).collect()
}

fn label_refs(runs: &[EngineRun]) -> Vec<(u32, &[Label])> {
    runs.iter()
        .map(|r| (r.unit_id, r.labels.as_slice()))
        .collect()
}

/// Bands pooled over every timestep of the (scaled) training engines.
pub fn fit_detector(
    net: &Network<f64>,
    train: &[EngineRun],
    config: &DetectorConfig,
) -> Result<Thresholds, PipelineError> {
    let latents = infer_all(net, train)?;
    Ok(detector::fit_and_detect(&latents, config)?.0)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub detections: Vec<Detection>,
    pub metrics: MetricsSummary,
}

pub fn evaluate(
    net: &Network<f64>,
    runs: &[EngineRun],
    config: &DetectorConfig,
    thresholds: &Thresholds,
) -> Result<Evaluation, PipelineError> {
    config.validate()?;
    let detections = infer_all(net, runs)?
        .iter()
        .map(|l| detector::detect(&detector::normalize_stream(l, config), thresholds, config))
        .collect::<Result<Vec<_>, _>>()?;
    let metrics = detector::score(&detections, &label_refs(runs))?;
    Ok(Evaluation {
        detections,
        metrics,
    })
}

pub fn write_detections(
    eval: &Evaluation,
    runs: &[EngineRun],
    w: impl std::io::Write,
) -> std::io::Result<()> {
    detector::write_detections_csv(&eval.detections, &label_refs(runs), w)
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub data: PreparedData,
    pub model: TrainedModel<f64>,
    pub thresholds: Thresholds,
    pub train_eval: Evaluation,
    pub test_eval: Evaluation,
}

pub fn run(
    runs: &[EngineRun],
    training: &TrainingConfig,
    detector_config: &DetectorConfig,
    test_fraction: f64,
) -> Result<PipelineOutcome, PipelineError> {
    let data = prepare(runs, test_fraction, training.val_fraction, training.seed)?;
    log::info!(
        "{} training engines, {} test engines",
        data.split.train_engines.len(),
        data.split.test_engines.len()
    );
    let model = tdc::train::<f64>(&data.train, training)?;
    let thresholds = fit_detector(&model.network, &data.train, detector_config)?;
    let train_eval = evaluate(&model.network, &data.train, detector_config, &thresholds)?;
    let test_eval = evaluate(&model.network, &data.test, detector_config, &thresholds)?;
    Ok(PipelineOutcome {
        data,
        model,
        thresholds,
        train_eval,
        test_eval,
    })
}
