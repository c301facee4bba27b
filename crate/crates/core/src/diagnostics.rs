//! Embedding and consistency diagnostics: Two-NN intrinsic dimension,
//! box-counting dimension, encoder Jacobian rank, pairwise injectivity and
//! the state/derivative consistency metrics `eta` and `rho`.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Label;
use crate::detector::moving_average;
use crate::linalg::svd;
use crate::net::{NetError, Network};
use crate::scalar::{linear_fit, mean_std, sq_dist, variance, Scalar};
use crate::seed;
use crate::tdc::LatentSeries;

pub const TWO_NN_MIN_POINTS: usize = 20;
pub const DEFAULT_TRIM_FRACTION: f64 = 0.1;
pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-9;
pub const INJECTIVITY_DELTA: f64 = 1e-6;
pub const INJECTIVITY_FLOOR: f64 = 1e-5;
pub const DEFAULT_MAX_PAIRS: usize = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("need at least {needed} points, found {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("degenerate point set: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionMethod {
    TwoNn,
    BoxCounting,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionEstimate {
    pub value: f64,
    pub std: f64,
    pub method: DimensionMethod,
    pub n_samples: usize,
}

/// How the Two-NN slope is extracted from the ratios `mu = r2 / r1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoNnFit {
    /// Line through the origin of `-ln(1 - F(mu))` against `ln mu` over the
    /// smallest `1 - trim` fraction of ratios.
    Regression { trim: f64 },
    /// Closed-form maximum likelihood `(N - 1) / sum(ln mu)` over all ratios.
    Likelihood,
}

impl Default for TwoNnFit {
    fn default() -> Self {
        TwoNnFit::Regression {
            trim: DEFAULT_TRIM_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoNnOutcome {
    pub estimate: DimensionEstimate,
    pub duplicates_removed: usize,
}

/// Two-NN intrinsic dimension of a point cloud (Euclidean distances).
/// Exact duplicates are dropped before the neighbour search.
pub fn two_nn_dimension<T: Scalar, P: AsRef<[T]>>(
    points: &[P],
    fit: TwoNnFit,
) -> Result<TwoNnOutcome, DiagnosticsError> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| lex_cmp(points[a].as_ref(), points[b].as_ref()));
    idx.dedup_by(|a, b| points[*a].as_ref() == points[*b].as_ref());
    let duplicates_removed = points.len() - idx.len();
    let pts: Vec<&[T]> = idx.iter().map(|&i| points[i].as_ref()).collect();
    let n = pts.len();
    if n < TWO_NN_MIN_POINTS {
        return Err(if n <= 1 && !points.is_empty() {
            DiagnosticsError::Degenerate("all points identical".into())
        } else {
            DiagnosticsError::TooFewPoints {
                needed: TWO_NN_MIN_POINTS,
                found: n,
            }
        });
    }

    let mut log_mu: Vec<f64> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (mut d1, mut d2) = (f64::INFINITY, f64::INFINITY);
            for (j, q) in pts.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = sq_dist(p, q).as_f64();
                if d < d1 {
                    d2 = d1;
                    d1 = d;
                } else if d < d2 {
                    d2 = d;
                }
            }
            0.5 * (d2 / d1).ln()
        })
        .collect();

    let value = match fit {
        TwoNnFit::Likelihood => {
            let s: f64 = log_mu.iter().sum();
            if s <= 0.0 {
                return Err(DiagnosticsError::Degenerate(
                    "all neighbour ratios equal one".into(),
                ));
            }
            (n as f64 - 1.0) / s
        }
        TwoNnFit::Regression { trim } => {
            if !(0.0..1.0).contains(&trim) {
                return Err(DiagnosticsError::Invalid(format!(
                    "trim fraction {trim} outside [0, 1)"
                )));
            }
            log_mu.sort_by(|a, b| a.partial_cmp(b).expect("finite logs"));
            let keep = (((n as f64) * (1.0 - trim)).floor() as usize).min(n - 1);
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for (i, &x) in log_mu[..keep].iter().enumerate() {
                let y = -(1.0 - (i + 1) as f64 / n as f64).ln();
                sxy += x * y;
                sxx += x * x;
            }
            if sxx <= 0.0 {
                return Err(DiagnosticsError::Degenerate(
                    "all neighbour ratios equal one".into(),
                ));
            }
            sxy / sxx
        }
    };
    Ok(TwoNnOutcome {
        estimate: DimensionEstimate {
            value,
            std: 0.0,
            method: DimensionMethod::TwoNn,
            n_samples: n,
        },
        duplicates_removed,
    })
}

fn lex_cmp<T: Scalar>(a: &[T], b: &[T]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Mean and population std of per-set Two-NN estimates (one set per engine).
pub fn two_nn_per_set<T: Scalar, P: AsRef<[T]>>(
    sets: &[Vec<P>],
    fit: TwoNnFit,
) -> Result<DimensionEstimate, DiagnosticsError> {
    if sets.is_empty() {
        return Err(DiagnosticsError::TooFewPoints {
            needed: 1,
            found: 0,
        });
    }
    let mut values = Vec::with_capacity(sets.len());
    let mut n_samples = 0;
    for s in sets {
        let o = two_nn_dimension(s, fit)?;
        n_samples += o.estimate.n_samples;
        values.push(o.estimate.value);
    }
    let (value, std) = mean_std(&values);
    Ok(DimensionEstimate {
        value,
        std,
        method: DimensionMethod::TwoNn,
        n_samples,
    })
}

/// Smallest even integer strictly greater than `2 d`.
pub fn recommended_latent_dim(intrinsic_dim: f64) -> usize {
    let m = (2.0 * intrinsic_dim).floor() as usize + 1;
    m + m % 2
}

/// `10^-2, 10^-1.9, ..., 10^-0.4`.
pub fn log_spaced_epsilons() -> Vec<f64> {
    (0..=16)
        .map(|i| 10f64.powf(-2.0 + 0.1 * i as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCount {
    pub epsilon: f64,
    pub occupied: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxCountFit {
    pub estimate: DimensionEstimate,
    pub intercept: f64,
    /// RMS residual of the log-log fit.
    pub residual: f64,
    pub counts: Vec<BoxCount>,
}

/// Occupied cells of an `epsilon` grid anchored at the bounding-box minimum.
pub fn occupied_boxes<T: Scalar>(points: &[[T; 2]], epsilon: T) -> usize {
    if points.is_empty() {
        return 0;
    }
    let (x0, y0) = points
        .iter()
        .fold((T::infinity(), T::infinity()), |(a, b), p| {
            (a.min(p[0]), b.min(p[1]))
        });
    let cells: HashSet<(i64, i64)> = points
        .iter()
        .map(|p| {
            let i = ((p[0] - x0) / epsilon).floor().to_i64().unwrap_or(i64::MAX);
            let j = ((p[1] - y0) / epsilon).floor().to_i64().unwrap_or(i64::MAX);
            (i, j)
        })
        .collect();
    cells.len()
}

/// Slope of `ln N(eps)` against `ln(1/eps)` by least squares.
pub fn box_counting_dimension<T: Scalar>(
    points: &[[T; 2]],
    epsilons: &[T],
) -> Result<BoxCountFit, DiagnosticsError> {
    if points.len() < 100 {
        return Err(DiagnosticsError::TooFewPoints {
            needed: 100,
            found: points.len(),
        });
    }
    if epsilons.len() < 4 {
        return Err(DiagnosticsError::Invalid(
            "need at least 4 box sizes".into(),
        ));
    }
    if epsilons.iter().any(|e| !(*e > T::zero() && e.is_finite())) {
        return Err(DiagnosticsError::Invalid(
            "box sizes must be positive and finite".into(),
        ));
    }
    let lo = epsilons
        .iter()
        .copied()
        .fold(T::infinity(), T::min)
        .as_f64();
    let hi = epsilons.iter().copied().fold(T::zero(), T::max).as_f64();
    if (hi / lo).log10() < 1.0 - 1e-9 {
        return Err(DiagnosticsError::Invalid(
            "box sizes must span at least one decade".into(),
        ));
    }
    if points.iter().all(|p| p == &points[0]) {
        return Err(DiagnosticsError::Degenerate("all points identical".into()));
    }
    let counts: Vec<BoxCount> = epsilons
        .iter()
        .map(|&e| BoxCount {
            epsilon: e.as_f64(),
            occupied: occupied_boxes(points, e),
        })
        .collect();
    let xs: Vec<f64> = counts.iter().map(|c| (1.0 / c.epsilon).ln()).collect();
    let ys: Vec<f64> = counts.iter().map(|c| (c.occupied as f64).ln()).collect();
    let (slope, intercept, residual, se) = linear_fit(&xs, &ys);
    Ok(BoxCountFit {
        estimate: DimensionEstimate {
            value: slope,
            std: se,
            method: DimensionMethod::BoxCounting,
            n_samples: points.len(),
        },
        intercept,
        residual,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub threshold: f64,
    pub full_rank: usize,
    /// Singular values per sample, sorted non-increasing.
    pub singular_values: Vec<Vec<f64>>,
    pub ranks: Vec<usize>,
    pub full_rank_fraction: f64,
    /// Samples whose SVD failed; they count as rank deficient.
    pub flagged: Vec<usize>,
}

impl RankReport {
    pub fn min_singular_value(&self) -> f64 {
        self.singular_values
            .iter()
            .filter_map(|s| s.last().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Encoder Jacobian rank at every input.
pub fn jacobian_rank_survey<T: Scalar, P: AsRef<[T]>>(
    net: &Network<T>,
    inputs: &[P],
    threshold: f64,
) -> Result<RankReport, DiagnosticsError> {
    if !(threshold > 0.0) {
        return Err(DiagnosticsError::Invalid(
            "rank threshold must be positive".into(),
        ));
    }
    let full_rank = net.latent_dim().min(net.input_dim());
    let mut report = RankReport {
        threshold,
        full_rank,
        singular_values: Vec::with_capacity(inputs.len()),
        ranks: Vec::with_capacity(inputs.len()),
        full_rank_fraction: 0.0,
        flagged: Vec::new(),
    };
    for (i, x) in inputs.iter().enumerate() {
        let jac = net.encoder_jacobian(x.as_ref())?;
        match svd(&jac) {
            Ok(s) => {
                let sv: Vec<f64> = s.singular_values.iter().map(|v| v.as_f64()).collect();
                report
                    .ranks
                    .push(sv.iter().filter(|&&v| v > threshold).count());
                report.singular_values.push(sv);
            }
            Err(e) => {
                log::warn!("sample {i}: jacobian svd failed: {e}");
                report.flagged.push(i);
                report.ranks.push(0);
                report.singular_values.push(Vec::new());
            }
        }
    }
    let full = report.ranks.iter().filter(|&&r| r == full_rank).count();
    report.full_rank_fraction = if inputs.is_empty() {
        0.0
    } else {
        full as f64 / inputs.len() as f64
    };
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectivityReport {
    pub min_ratio: f64,
    pub violations: usize,
    pub pairs_evaluated: usize,
    pub exhaustive: bool,
    pub delta: f64,
    pub floor: f64,
}

/// Minimum of `|E(x1) - E(x2)| / |x1 - x2|` over input pairs farther apart
/// than `delta`, and the number of ratios below `floor`. All pairs are
/// visited when there are at most `max_pairs`; otherwise `max_pairs` pairs
/// are drawn uniformly from the `injectivity` seed stream.
pub fn injectivity_ratio_survey<T: Scalar, P: AsRef<[T]>>(
    net: &Network<T>,
    inputs: &[P],
    delta: f64,
    floor: f64,
    max_pairs: usize,
    seed_root: u64,
) -> Result<InjectivityReport, DiagnosticsError> {
    let n = inputs.len();
    if n < 2 {
        return Err(DiagnosticsError::TooFewPoints {
            needed: 2,
            found: n,
        });
    }
    let codes = inputs
        .iter()
        .map(|x| net.encode_vec(x.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = InjectivityReport {
        min_ratio: f64::INFINITY,
        violations: 0,
        pairs_evaluated: 0,
        exhaustive: true,
        delta,
        floor,
    };
    let mut visit = |i: usize, j: usize| {
        let dx = sq_dist(inputs[i].as_ref(), inputs[j].as_ref())
            .as_f64()
            .sqrt();
        if dx <= delta {
            return;
        }
        let dz = sq_dist(&codes[i], &codes[j]).as_f64().sqrt();
        let r = dz / dx;
        report.pairs_evaluated += 1;
        report.min_ratio = report.min_ratio.min(r);
        if r < floor {
            report.violations += 1;
        }
    };
    let total = n * (n - 1) / 2;
    if total <= max_pairs {
        for i in 0..n {
            for j in i + 1..n {
                visit(i, j);
            }
        }
    } else {
        let mut rng = seed::component_rng(seed_root, seed::INJECTIVITY);
        let mut drawn = 0;
        while drawn < max_pairs {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if i != j {
                visit(i, j);
                drawn += 1;
            }
        }
        report.exhaustive = false;
    }
    Ok(report)
}

fn min_max_scaled<T: Scalar>(xs: &[T]) -> Option<Vec<T>> {
    let lo = xs.iter().copied().fold(T::infinity(), T::min);
    let hi = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    if !(range > T::zero()) {
        return None;
    }
    Some(xs.iter().map(|&x| (x - lo) / range).collect())
}

/// `var(scaled z_dot) / var(scaled z)` with each series min-max scaled to [0, 1].
pub fn eta_metric<T: Scalar>(z: &[T], z_dot: &[T]) -> Result<T, DiagnosticsError> {
    if z.len() < 2 || z_dot.len() < 2 {
        return Err(DiagnosticsError::TooFewPoints {
            needed: 2,
            found: z.len().min(z_dot.len()),
        });
    }
    let zs = min_max_scaled(z)
        .ok_or_else(|| DiagnosticsError::Degenerate("state series has zero range".into()))?;
    let ds = min_max_scaled(z_dot)
        .ok_or_else(|| DiagnosticsError::Degenerate("derivative series has zero range".into()))?;
    Ok(variance(&ds) / variance(&zs))
}

/// Drift between the accumulated derivative and the re-based state:
///
/// ```text
/// rho = 1/N * sum_{i=1..N} ((z_i - z_0) - dt * sum_{j=1..i} z_dot_j)^2
/// ```
///
/// for series indexed `0..=N`. Sample 0 only anchors the state.
pub fn rho_metric<T: Scalar>(z: &[T], z_dot: &[T], dt: T) -> Result<T, DiagnosticsError> {
    if z.len() != z_dot.len() {
        return Err(DiagnosticsError::Invalid(format!(
            "series lengths differ: {} vs {}",
            z.len(),
            z_dot.len()
        )));
    }
    if z.len() < 2 {
        return Err(DiagnosticsError::TooFewPoints {
            needed: 2,
            found: z.len(),
        });
    }
    let mut acc = T::zero();
    let mut sum = T::zero();
    for i in 1..z.len() {
        acc += z_dot[i] * dt;
        let e = (z[i] - z[0]) - acc;
        sum += e * e;
    }
    Ok(sum / T::from_count(z.len() - 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub unit_id: u32,
    pub pair_index: usize,
    /// `None` when either series is constant over the window.
    pub eta: Option<f64>,
    pub rho: f64,
    pub window: (usize, usize),
}

/// One row of the per-pair `rho` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoRow {
    pub pair: (usize, usize),
    pub normal_mean: f64,
    pub normal_std: f64,
    pub anomalous_mean: f64,
    pub anomalous_std: f64,
}

fn smoothed(series: &[f64], window: Option<usize>) -> Vec<f64> {
    match window {
        Some(w) if w > 1 => moving_average(series, w),
        _ => series.to_vec(),
    }
}

/// `eta` and `rho` for every pair of one engine over rows `window`.
pub fn consistency_metrics(
    latent: &LatentSeries<f64>,
    window: std::ops::Range<usize>,
    dt: f64,
    smoothing: Option<usize>,
) -> Result<Vec<ConsistencyReport>, DiagnosticsError> {
    if window.end > latent.len() || window.len() < 2 {
        return Err(DiagnosticsError::Invalid(format!(
            "window {window:?} invalid for {} rows",
            latent.len()
        )));
    }
    (0..latent.half)
        .map(|p| {
            let (z, zd) = latent.pair(p);
            let z = smoothed(&z[window.clone()], smoothing);
            let zd = smoothed(&zd[window.clone()], smoothing);
            Ok(ConsistencyReport {
                unit_id: latent.unit_id,
                pair_index: p,
                eta: eta_metric(&z, &zd).ok(),
                rho: rho_metric(&z, &zd, dt)?,
                window: (window.start, window.end),
            })
        })
        .collect()
}

/// Mean ± std across engines of `rho` over normal and anomalous windows,
/// one row per latent pair `(i, i + n/2)`.
pub fn rho_table(
    engines: &[(LatentSeries<f64>, Vec<Label>)],
    dt: f64,
    smoothing: Option<usize>,
) -> Result<Vec<RhoRow>, DiagnosticsError> {
    let half = engines
        .first()
        .map(|e| e.0.half)
        .ok_or(DiagnosticsError::TooFewPoints {
            needed: 1,
            found: 0,
        })?;
    let mut normal = vec![Vec::new(); half];
    let mut anomalous = vec![Vec::new(); half];
    for (lat, labels) in engines {
        let n_norm = labels.iter().filter(|l| **l == Label::Normal).count();
        if n_norm >= 2 {
            for r in consistency_metrics(lat, 0..n_norm, dt, smoothing)? {
                normal[r.pair_index].push(r.rho);
            }
        }
        if lat.len() - n_norm >= 2 {
            for r in consistency_metrics(lat, n_norm..lat.len(), dt, smoothing)? {
                anomalous[r.pair_index].push(r.rho);
            }
        }
    }
    Ok((0..half)
        .map(|p| {
            let (nm, ns) = mean_std(&normal[p]);
            let (am, as_) = mean_std(&anomalous[p]);
            RhoRow {
                pair: (p, p + half),
                normal_mean: nm,
                normal_std: ns,
                anomalous_mean: am,
                anomalous_std: as_,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub threshold: f64,
    pub n_samples: usize,
    pub full_rank_fraction: f64,
    pub min_singular_value: f64,
    pub flagged: usize,
}

impl From<&RankReport> for RankSummary {
    fn from(r: &RankReport) -> Self {
        Self {
            threshold: r.threshold,
            n_samples: r.ranks.len(),
            full_rank_fraction: r.full_rank_fraction,
            min_singular_value: r.min_singular_value(),
            flagged: r.flagged.len(),
        }
    }
}

/// JSON-serialisable collection of all diagnostics for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub intrinsic_dimension: Option<DimensionEstimate>,
    pub recommended_latent_dim: Option<usize>,
    pub box_counting: Option<BoxCountFit>,
    pub jacobian: Option<RankSummary>,
    pub injectivity: Option<InjectivityReport>,
    pub eta: Vec<ConsistencyReport>,
    pub rho_table: Vec<RhoRow>,
}
