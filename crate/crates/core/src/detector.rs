//! Latent-space anomaly detection.
//!
//! Each latent node stream passes through a truncated trailing moving
//! average and a baseline recalibration (`v(t) = s(t) - b(t)`), is compared
//! with per-node percentile bands fitted on normal training rows, and a
//! timestep is positive when enough nodes leave their band at once.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Label;
use crate::net::Network;
use crate::scalar::Scalar;
use crate::tdc::LatentSeries;

/// Commonly quoted weight-MAC figure for the micro autoencoder. The layer
/// widths themselves give 2688; the gap is unexplained.
pub const QUOTED_MAC_ESTIMATE: u64 = 3360;
/// LSTM baseline cost for sequence length 48, hidden width 16, input 24.
pub const LSTM_REFERENCE_MACS: u64 = 245_760;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("no training data to fit thresholds on")]
    Empty,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("unit {unit}: {msg}")]
    Misaligned { unit: u32, msg: String },
    #[error("threshold grid is empty")]
    EmptyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Subtract the trailing-mean baseline.
    #[default]
    Recalibrated,
    /// Threshold the smoothed stream directly.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub upper_percentile: f64,
    pub lower_percentile: f64,
    pub moving_average_window: usize,
    pub baseline_window: usize,
    pub vote_threshold: usize,
    pub latent_dim: usize,
    pub baseline: BaselineMode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::fd001()
    }
}

impl DetectorConfig {
    /// 86th / 9th percentile bands.
    pub fn fd001() -> Self {
        Self {
            upper_percentile: 86.0,
            lower_percentile: 9.0,
            moving_average_window: 12,
            baseline_window: 10,
            vote_threshold: 2,
            latent_dim: 8,
            baseline: BaselineMode::Recalibrated,
        }
    }

    /// 75th / 22nd percentile bands.
    pub fn fd003() -> Self {
        Self {
            upper_percentile: 75.0,
            lower_percentile: 22.0,
            ..Self::fd001()
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::InvalidConfig(m));
        let in_range = |p: f64| p > 0.0 && p < 100.0;
        if !in_range(self.upper_percentile) || !in_range(self.lower_percentile) {
            return bad("percentiles must lie in (0, 100)".into());
        }
        if self.lower_percentile >= self.upper_percentile {
            return bad(format!(
                "lower percentile {} must be below upper {}",
                self.lower_percentile, self.upper_percentile
            ));
        }
        if self.moving_average_window == 0 || self.baseline_window == 0 {
            return bad("windows must be at least 1".into());
        }
        if self.vote_threshold == 0 || self.vote_threshold > self.latent_dim {
            return bad(format!(
                "vote threshold {} outside [1, {}]",
                self.vote_threshold, self.latent_dim
            ));
        }
        Ok(())
    }
}

/// Percentile with linear interpolation between order statistics
/// (rank `p/100 * (n - 1)`), on pre-sorted data.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&v, p)
}

/// Trailing mean over the last `window` values, truncated at the start.
pub fn moving_average<T: Scalar>(xs: &[T], window: usize) -> Vec<T> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = T::zero();
    for (t, &x) in xs.iter().enumerate() {
        sum += x;
        if t >= window {
            sum -= xs[t - window];
        }
        let n = (t + 1).min(window);
        out.push(sum / T::from_count(n));
    }
    out
}

/// Baseline-recalibrated node values, `[T x n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSeries {
    pub unit_id: u32,
    pub values: Vec<Vec<f64>>,
}

impl NormalizedSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn window(&self, range: Range<usize>) -> Self {
        Self {
            unit_id: self.unit_id,
            values: self.values[range].to_vec(),
        }
    }
}

fn normalize_node(xs: &[f64], config: &DetectorConfig) -> Vec<f64> {
    let s = moving_average(xs, config.moving_average_window);
    if config.baseline == BaselineMode::Raw {
        return s;
    }
    let w = config.baseline_window;
    let mut out = Vec::with_capacity(s.len());
    for t in 0..s.len() {
        // frozen at the first smoothed value until `w` earlier values exist
        let b = if t < w {
            s[0]
        } else {
            s[t - w..t].iter().sum::<f64>() / w as f64
        };
        out.push(s[t] - b);
    }
    out
}

/// Moving average then baseline subtraction, independently per node.
pub fn normalize_stream(latent: &LatentSeries<f64>, config: &DetectorConfig) -> NormalizedSeries {
    let n = latent.latent_dim();
    let nodes: Vec<Vec<f64>> = (0..n)
        .map(|i| normalize_node(&latent.node(i), config))
        .collect();
    let values = (0..latent.len())
        .map(|t| nodes.iter().map(|c| c[t]).collect())
        .collect();
    NormalizedSeries {
        unit_id: latent.unit_id,
        values,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

/// Per-node percentile band over every value of the given series, pooled
/// across engines and timesteps.
pub fn fit_thresholds(
    series: &[NormalizedSeries],
    config: &DetectorConfig,
) -> Result<Thresholds, DetectorError> {
    config.validate()?;
    let sorted = pooled_sorted(series)?;
    Ok(thresholds_from_sorted(
        &sorted,
        config.upper_percentile,
        config.lower_percentile,
    ))
}

fn pooled_sorted(series: &[NormalizedSeries]) -> Result<Vec<Vec<f64>>, DetectorError> {
    let n = series
        .iter()
        .find(|s| !s.is_empty())
        .map(|s| s.values[0].len())
        .ok_or(DetectorError::Empty)?;
    let mut nodes = vec![Vec::new(); n];
    for s in series {
        for row in &s.values {
            if row.len() != n {
                return Err(DetectorError::DimensionMismatch {
                    expected: n,
                    found: row.len(),
                });
            }
            for (i, &v) in row.iter().enumerate() {
                nodes[i].push(v);
            }
        }
    }
    for node in &mut nodes {
        node.sort_by(|a, b| a.total_cmp(b));
    }
    Ok(nodes)
}

fn thresholds_from_sorted(sorted: &[Vec<f64>], upper: f64, lower: f64) -> Thresholds {
    Thresholds {
        upper: sorted.iter().map(|v| percentile_sorted(v, upper)).collect(),
        lower: sorted.iter().map(|v| percentile_sorted(v, lower)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub unit_id: u32,
    pub votes: Vec<usize>,
    pub positive: Vec<bool>,
}

/// Out-of-band vote count per timestep; positive when `votes >= vote_threshold`.
pub fn detect(
    series: &NormalizedSeries,
    thresholds: &Thresholds,
    config: &DetectorConfig,
) -> Result<Detection, DetectorError> {
    let n = thresholds.upper.len();
    let mut votes = Vec::with_capacity(series.len());
    for row in &series.values {
        if row.len() != n {
            return Err(DetectorError::DimensionMismatch {
                expected: n,
                found: row.len(),
            });
        }
        votes.push(
            row.iter()
                .enumerate()
                .filter(|&(i, &v)| v > thresholds.upper[i] || v < thresholds.lower[i])
                .count(),
        );
    }
    let positive = votes.iter().map(|&v| v >= config.vote_threshold).collect();
    Ok(Detection {
        unit_id: series.unit_id,
        votes,
        positive,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, predicted: bool, truth: Label) {
        match (predicted, truth.is_anomalous()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

/// Pooled classification metrics (fractions in [0, 1]) plus the share of
/// engines with a positive in their final `ceil(0.1 T)` cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub cdr: f64,
    pub n_engines: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsSummary {
    pub fn from_counts(counts: ConfusionCounts, engines_detected: usize, n_engines: usize) -> Self {
        let c = counts;
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            counts,
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision,
            recall,
            specificity: ratio(c.tn, c.tn + c.fp),
            f1,
            cdr: ratio(engines_detected, n_engines),
            n_engines,
        }
    }
}

/// Scores detections against per-engine labels (same order, same lengths).
pub fn score(
    detections: &[Detection],
    labels: &[(u32, &[Label])],
) -> Result<MetricsSummary, DetectorError> {
    if detections.len() != labels.len() {
        return Err(DetectorError::DimensionMismatch {
            expected: labels.len(),
            found: detections.len(),
        });
    }
    let mut counts = ConfusionCounts::default();
    let mut detected = 0;
    for (d, &(unit, truth)) in detections.iter().zip(labels) {
        if d.unit_id != unit {
            return Err(DetectorError::Misaligned {
                unit,
                msg: format!("detection belongs to unit {}", d.unit_id),
            });
        }
        if d.positive.len() != truth.len() {
            return Err(DetectorError::Misaligned {
                unit,
                msg: format!("{} detections for {} labels", d.positive.len(), truth.len()),
            });
        }
        for (&p, &l) in d.positive.iter().zip(truth) {
            counts.add(p, l);
        }
        let t = truth.len();
        if d.positive[t - t.div_ceil(10)..].iter().any(|&p| p) {
            detected += 1;
        }
    }
    Ok(MetricsSummary::from_counts(
        counts,
        detected,
        detections.len(),
    ))
}

/// Normalises training latents, fits bands on every timestep of them, and
/// runs detection on the same streams.
pub fn fit_and_detect(
    latents: &[LatentSeries<f64>],
    config: &DetectorConfig,
) -> Result<(Thresholds, Vec<Detection>), DetectorError> {
    let normalized: Vec<NormalizedSeries> = latents
        .iter()
        .map(|l| normalize_stream(l, config))
        .collect();
    let thresholds = fit_thresholds(&normalized, config)?;
    let detections = normalized
        .iter()
        .map(|s| detect(s, &thresholds, config))
        .collect::<Result<_, _>>()?;
    Ok((thresholds, detections))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub upper_percentiles: Vec<f64>,
    pub lower_percentiles: Vec<f64>,
    pub moving_average_windows: Vec<usize>,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            upper_percentiles: (60..=98).step_by(2).map(f64::from).collect(),
            lower_percentiles: (2..=40).step_by(2).map(f64::from).collect(),
            moving_average_windows: vec![4, 8, 12, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizedDetector {
    pub config: DetectorConfig,
    pub thresholds: Thresholds,
    pub training_metrics: MetricsSummary,
}

/// Grid search maximising pooled F1 on the training engines' labelled rows.
/// Ties go to higher specificity, then the smaller window, then grid order.
pub fn optimize_thresholds(
    latents: &[LatentSeries<f64>],
    labels: &[Vec<Label>],
    base: &DetectorConfig,
    grid: &ThresholdGrid,
) -> Result<OptimizedDetector, DetectorError> {
    if grid.upper_percentiles.is_empty()
        || grid.lower_percentiles.is_empty()
        || grid.moving_average_windows.is_empty()
    {
        return Err(DetectorError::EmptyGrid);
    }
    if latents.len() != labels.len() || latents.is_empty() {
        return Err(DetectorError::Empty);
    }
    let label_refs: Vec<(u32, &[Label])> = latents
        .iter()
        .zip(labels)
        .map(|(l, y)| (l.unit_id, y.as_slice()))
        .collect();
    let mut best: Option<(OptimizedDetector, (f64, f64, usize))> = None;
    for &window in &grid.moving_average_windows {
        let cfg_w = DetectorConfig {
            moving_average_window: window,
            ..base.clone()
        };
        let normalized: Vec<NormalizedSeries> = latents
            .iter()
            .map(|l| normalize_stream(l, &cfg_w))
            .collect();
        let sorted = pooled_sorted(&normalized)?;
        for &upper in &grid.upper_percentiles {
            for &lower in &grid.lower_percentiles {
                let cfg = DetectorConfig {
                    upper_percentile: upper,
                    lower_percentile: lower,
                    ..cfg_w.clone()
                };
                if cfg.validate().is_err() {
                    continue;
                }
                let thresholds = thresholds_from_sorted(&sorted, upper, lower);
                let detections = normalized
                    .iter()
                    .map(|s| detect(s, &thresholds, &cfg))
                    .collect::<Result<Vec<_>, _>>()?;
                let metrics = score(&detections, &label_refs)?;
                let key = (metrics.f1, metrics.specificity, window);
                let better = match &best {
                    None => true,
                    Some((_, k)) => {
                        key.0 > k.0
                            || (key.0 == k.0 && (key.1 > k.1 || (key.1 == k.1 && key.2 < k.2)))
                    }
                };
                if better {
                    best = Some((
                        OptimizedDetector {
                            config: cfg,
                            thresholds,
                            training_metrics: metrics,
                        },
                        key,
                    ));
                }
            }
        }
    }
    best.map(|b| b.0).ok_or(DetectorError::EmptyGrid)
}

/// `unit,cycle,votes,label,truth` per timestep.
pub fn write_detections_csv<W: Write>(
    detections: &[Detection],
    labels: &[(u32, &[Label])],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "unit,cycle,votes,label,truth")?;
    for (d, (_, truth)) in detections.iter().zip(labels) {
        for (t, ((&v, &p), l)) in d
            .votes
            .iter()
            .zip(&d.positive)
            .zip(truth.iter())
            .enumerate()
        {
            let label = if p { "positive" } else { "negative" };
            let truth = if l.is_anomalous() {
                "anomalous"
            } else {
                "normal"
            };
            writeln!(w, "{},{},{},{},{}", d.unit_id, t + 1, v, label, truth)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    pub architecture: Vec<usize>,
    pub weight_macs: u64,
    pub bias_adds: u64,
    pub quoted_estimate: u64,
    pub lstm_reference_macs: u64,
    pub lstm_ratio: f64,
    pub note: String,
}

/// `sum(in_dim * out_dim)` over layers; bias additions reported separately.
pub fn count_macs<T: Scalar>(net: &Network<T>) -> MacReport {
    let weight_macs: u64 = net
        .layers()
        .iter()
        .map(|l| (l.spec.in_dim * l.spec.out_dim) as u64)
        .sum();
    let bias_adds: u64 = net.layers().iter().map(|l| l.spec.out_dim as u64).sum();
    MacReport {
        architecture: net.widths(),
        weight_macs,
        bias_adds,
        quoted_estimate: QUOTED_MAC_ESTIMATE,
        lstm_reference_macs: LSTM_REFERENCE_MACS,
        lstm_ratio: LSTM_REFERENCE_MACS as f64 / weight_macs as f64,
        note: format!(
            "architecture yields {weight_macs} weight MACs (+{bias_adds} bias adds); the quoted figure of about {QUOTED_MAC_ESTIMATE} does not follow from the layer widths"
        ),
    }
}
