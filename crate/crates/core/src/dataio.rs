//! C-MAPSS parsing, 60/40 anomaly labelling, engine-level splits and
//! min-max scaling.
//!
//! A raw record carries 26 whitespace-separated numbers: unit id, cycle,
//! three operational settings and 21 sensors. The last 24 form the feature
//! vector; unit and cycle are identifiers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub const N_SETTINGS: usize = 3;
pub const N_SENSORS: usize = 21;
pub const FEATURE_DIM: usize = N_SETTINGS + N_SENSORS;
pub const RAW_FIELDS: usize = FEATURE_DIM + 2;
/// Shortest run accepted from a file: central differences and the moving
/// averages both need neighbours.
pub const MIN_LIFE: usize = 5;
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

pub type Features = [f64; FEATURE_DIM];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unit {unit}: {msg}")]
    Integrity { unit: u32, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorRecord {
    pub unit_id: u32,
    pub cycle: u32,
    pub op_settings: [f64; N_SETTINGS],
    pub sensors: [f64; N_SENSORS],
}

impl SensorRecord {
    pub fn features(&self) -> Features {
        let mut f = [0.0; FEATURE_DIM];
        f[..N_SETTINGS].copy_from_slice(&self.op_settings);
        f[N_SETTINGS..].copy_from_slice(&self.sensors);
        f
    }

    fn parse(line: &str, line_no: usize) -> Result<Self, DataError> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != RAW_FIELDS {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("expected {RAW_FIELDS} fields, found {}", fields.len()),
            });
        }
        let mut values = [0.0f64; RAW_FIELDS];
        for (i, tok) in fields.iter().enumerate() {
            values[i] = tok.parse::<f64>().map_err(|_| DataError::Parse {
                line: line_no,
                msg: format!("field {} is not numeric: {tok:?}", i + 1),
            })?;
            if !values[i].is_finite() {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: format!("field {} is not finite", i + 1),
                });
            }
        }
        let as_id = |v: f64, what: &str| -> Result<u32, DataError> {
            if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(DataError::Parse {
                    line: line_no,
                    msg: format!("{what} must be a positive integer, found {v}"),
                })
            }
        };
        let mut op_settings = [0.0; N_SETTINGS];
        op_settings.copy_from_slice(&values[2..2 + N_SETTINGS]);
        let mut sensors = [0.0; N_SENSORS];
        sensors.copy_from_slice(&values[2 + N_SETTINGS..]);
        Ok(Self {
            unit_id: as_id(values[0], "unit")?,
            cycle: as_id(values[1], "cycle")?,
            op_settings,
            sensors,
        })
    }
}

/// Number of normal-labelled cycles in a life of `t` cycles: `ceil(0.6 t)`.
pub fn normal_count(t: usize) -> usize {
    (6 * t).div_ceil(10)
}

/// One engine's cycle-indexed feature matrix with 60/40 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineRun {
    pub unit_id: u32,
    pub features: Vec<Features>,
    pub labels: Vec<Label>,
}

impl EngineRun {
    /// Builds a run and assigns the 60/40 labels.
    pub fn new(unit_id: u32, features: Vec<Features>) -> Self {
        let n_normal = normal_count(features.len());
        let labels = (0..features.len())
            .map(|t| {
                if t < n_normal {
                    Label::Normal
                } else {
                    Label::Anomalous
                }
            })
            .collect();
        Self {
            unit_id,
            features,
            labels,
        }
    }

    pub fn life_length(&self) -> usize {
        self.features.len()
    }

    pub fn normal_count(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Normal).count()
    }

    pub fn normal_range(&self) -> Range<usize> {
        0..self.normal_count()
    }

    pub fn anomalous_range(&self) -> Range<usize> {
        self.normal_count()..self.life_length()
    }

    /// Row-contiguous split of the normal rows: the first `1 - val_fraction`
    /// train, the remainder validates.
    pub fn train_val_ranges(&self, val_fraction: f64) -> (Range<usize>, Range<usize>) {
        let n = self.normal_count();
        let n_val = ((n as f64) * val_fraction).round() as usize;
        let n_train = n - n_val.min(n);
        (0..n_train, n_train..n)
    }

    /// Index window covering the final `ceil(0.1 T)` cycles.
    pub fn critical_range(&self) -> Range<usize> {
        let t = self.life_length();
        t - t.div_ceil(10)..t
    }
}

/// Parses a C-MAPSS text file into one run per unit, ordered by unit id.
pub fn parse_cmapss(path: impl AsRef<Path>) -> Result<Vec<EngineRun>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_cmapss_str(&text)
}

pub fn parse_cmapss_str(text: &str) -> Result<Vec<EngineRun>, DataError> {
    let mut units: BTreeMap<u32, Vec<SensorRecord>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = SensorRecord::parse(line, i + 1)?;
        units.entry(rec.unit_id).or_default().push(rec);
    }
    let mut runs = Vec::with_capacity(units.len());
    for (unit, mut recs) in units {
        recs.sort_by_key(|r| r.cycle);
        for (idx, r) in recs.iter().enumerate() {
            if r.cycle as usize != idx + 1 {
                return Err(DataError::Integrity {
                    unit,
                    msg: format!(
                        "cycles must be consecutive from 1; position {} holds cycle {}",
                        idx + 1,
                        r.cycle
                    ),
                });
            }
        }
        if recs.len() < MIN_LIFE {
            return Err(DataError::Integrity {
                unit,
                msg: format!("life of {} cycles is shorter than {MIN_LIFE}", recs.len()),
            });
        }
        runs.push(EngineRun::new(
            unit,
            recs.iter().map(SensorRecord::features).collect(),
        ));
    }
    Ok(runs)
}

/// Writes runs back in the raw 26-column layout. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_cmapss(runs: &[EngineRun]) -> String {
    let mut out = String::new();
    for run in runs {
        for (t, row) in run.features.iter().enumerate() {
            let _ = write!(out, "{} {}", run.unit_id, t + 1);
            for v in row {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Columnar CSV export: `unit,cycle,f0..f23,label`.
pub fn write_scaled_csv<W: Write>(runs: &[EngineRun], mut w: W) -> std::io::Result<()> {
    write!(w, "unit,cycle")?;
    for i in 0..FEATURE_DIM {
        write!(w, ",f{i}")?;
    }
    writeln!(w, ",label")?;
    for run in runs {
        for (t, (row, label)) in run.features.iter().zip(&run.labels).enumerate() {
            write!(w, "{},{}", run.unit_id, t + 1)?;
            for v in row {
                write!(w, ",{v}")?;
            }
            let l = match label {
                Label::Normal => "normal",
                Label::Anomalous => "anomalous",
            };
            writeln!(w, ",{l}")?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_engines: Vec<u32>,
    pub test_engines: Vec<u32>,
    pub val_fraction: f64,
}

impl DatasetSplit {
    /// Clones the runs on each side of the split, preserving input order.
    pub fn partition(&self, runs: &[EngineRun]) -> (Vec<EngineRun>, Vec<EngineRun>) {
        let pick = |ids: &[u32]| {
            runs.iter()
                .filter(|r| ids.binary_search(&r.unit_id).is_ok())
                .cloned()
                .collect::<Vec<_>>()
        };
        (pick(&self.train_engines), pick(&self.test_engines))
    }
}

/// Seeded engine-level split. The number of test engines is
/// `round(test_fraction * n)` clamped so both sides are non-empty.
pub fn split_engines(
    runs: &[EngineRun],
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if runs.len() < 2 {
        return Err(DataError::Invalid(format!(
            "need at least 2 engines to split, found {}",
            runs.len()
        )));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "test fraction must lie in (0, 1), found {test_fraction}"
        )));
    }
    let mut ids: Vec<u32> = runs.iter().map(|r| r.unit_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != runs.len() {
        return Err(DataError::Invalid("duplicate unit ids".into()));
    }
    let n = ids.len();
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut rng = seed::component_rng(seed, seed::SPLIT);
    ids.shuffle(&mut rng);
    let mut test_engines = ids[..n_test].to_vec();
    let mut train_engines = ids[n_test..].to_vec();
    test_engines.sort_unstable();
    train_engines.sort_unstable();
    Ok(DatasetSplit {
        train_engines,
        test_engines,
        val_fraction: DEFAULT_VAL_FRACTION,
    })
}

/// Per-feature min/max fitted on normal rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalerParams {
    pub fn scale_row(&self, row: &Features) -> Features {
        let mut out = [0.0; FEATURE_DIM];
        for i in 0..FEATURE_DIM {
            let range = self.max[i] - self.min[i];
            out[i] = if range > 0.0 {
                (row[i] - self.min[i]) / range
            } else {
                0.0
            };
        }
        out
    }

    pub fn apply(&self, run: &EngineRun) -> EngineRun {
        EngineRun {
            unit_id: run.unit_id,
            features: run.features.iter().map(|r| self.scale_row(r)).collect(),
            labels: run.labels.clone(),
        }
    }
}

/// Fits the scaler on the normal-labelled rows of the given (training) runs.
pub fn fit_scaler(runs: &[EngineRun]) -> Result<ScalerParams, DataError> {
    let mut min = vec![f64::INFINITY; FEATURE_DIM];
    let mut max = vec![f64::NEG_INFINITY; FEATURE_DIM];
    let mut seen = 0usize;
    for run in runs {
        for (row, label) in run.features.iter().zip(&run.labels) {
            if *label != Label::Normal {
                continue;
            }
            seen += 1;
            for i in 0..FEATURE_DIM {
                min[i] = min[i].min(row[i]);
                max[i] = max[i].max(row[i]);
            }
        }
    }
    if seen == 0 {
        return Err(DataError::Invalid(
            "no normal-labelled rows to fit the scaler on".into(),
        ));
    }
    Ok(ScalerParams { min, max })
}

pub fn apply_scaler(run: &EngineRun, scaler: &ScalerParams) -> EngineRun {
    scaler.apply(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(unit: u32, cycle: u32, base: f64) -> String {
        let mut s = format!("{unit} {cycle}");
        for i in 0..FEATURE_DIM {
            s.push_str(&format!(" {}", base + i as f64 * 0.25));
        }
        s
    }

    fn file(units: &[(u32, u32)]) -> String {
        let mut s = String::new();
        for &(u, t) in units {
            for c in 1..=t {
                s.push_str(&line(u, c, c as f64));
                s.push('\n');
            }
        }
        s
    }

    #[test]
    fn labels_sixty_forty() {
        let runs = parse_cmapss_str(&file(&[(1, 10)])).unwrap();
        assert_eq!(runs.len(), 1);
        let n: Vec<_> = runs[0].labels.iter().map(|l| l.is_anomalous()).collect();
        assert_eq!(
            n,
            [false; 6]
                .iter()
                .chain(&[true; 4])
                .copied()
                .collect::<Vec<_>>()
        );

        let runs = parse_cmapss_str(&file(&[(3, 100)])).unwrap();
        assert_eq!(runs[0].normal_count(), 60);
        // cycle 61 (index 60) is the first anomalous one
        assert_eq!(runs[0].labels[59], Label::Normal);
        assert_eq!(runs[0].labels[60], Label::Anomalous);
    }

    #[test]
    fn normal_count_is_integer_ceiling() {
        assert_eq!(normal_count(10), 6);
        assert_eq!(normal_count(100), 60);
        assert_eq!(normal_count(7), 5);
        assert_eq!(normal_count(128), 77);
    }

    #[test]
    fn groups_and_sorts_units() {
        let mut text = file(&[(2, 6), (1, 5)]);
        // shuffle lines within the file
        let mut lines: Vec<&str> = text.lines().collect();
        lines.reverse();
        text = lines.join("\n");
        let runs = parse_cmapss_str(&text).unwrap();
        assert_eq!(
            runs.iter().map(|r| r.unit_id).collect::<Vec<_>>(),
            vec![1, 2]
        );
        assert_eq!(runs[1].features[0][0], 1.0);
        assert_eq!(runs[1].life_length(), 6);
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let mut text = file(&[(1, 5)]);
        text.push_str("1 6 0.1 0.2\n");
        match parse_cmapss_str(&text) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("unexpected {other:?}"),
        }
        let bad = line(1, 1, 0.0).replacen("0.25", "abc", 1);
        assert!(matches!(
            parse_cmapss_str(&bad),
            Err(DataError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn gaps_are_integrity_errors() {
        let text: String = [1, 2, 3, 5, 6]
            .iter()
            .map(|&c| line(4, c, 0.0) + "\n")
            .collect();
        assert!(matches!(
            parse_cmapss_str(&text),
            Err(DataError::Integrity { unit: 4, .. })
        ));
        assert!(matches!(
            parse_cmapss_str(&file(&[(1, 4)])),
            Err(DataError::Integrity { .. })
        ));
    }

    #[test]
    fn split_cardinalities() {
        let runs: Vec<EngineRun> = (1..=100)
            .map(|u| EngineRun::new(u, vec![[0.0; 24]; 5]))
            .collect();
        let s = split_engines(&runs, 0.2, 7).unwrap();
        assert_eq!((s.train_engines.len(), s.test_engines.len()), (80, 20));
        assert_eq!(s, split_engines(&runs, 0.2, 7).unwrap());
        let five = &runs[..5];
        let s = split_engines(five, 0.2, 1).unwrap();
        assert_eq!((s.train_engines.len(), s.test_engines.len()), (4, 1));
        assert!(split_engines(&runs[..1], 0.2, 1).is_err());
        assert!(split_engines(&runs, 1.0, 1).is_err());
    }

    #[test]
    fn scaler_examples() {
        let run = EngineRun::new(1, vec![[0.0; 24]]);
        let s = fit_scaler(std::slice::from_ref(&run)).unwrap();
        assert_eq!(s.min, vec![0.0; 24]);
        assert_eq!(s.apply(&run).features[0], [0.0; 24]);

        let mut a = [0.0; 24];
        let mut b = [0.0; 24];
        a[0] = 1.0;
        b[0] = 3.0;
        // both rows normal: T=2 gives ceil(1.2)=2 normal rows
        let run = EngineRun::new(1, vec![a, b]);
        let s = fit_scaler(&[run]).unwrap();
        assert_eq!((s.min[0], s.max[0]), (1.0, 3.0));
        let mut x = [0.0; 24];
        x[0] = 2.0;
        assert_eq!(s.scale_row(&x)[0], 0.5);
        x[0] = 1.0;
        assert_eq!(s.scale_row(&x)[0], 0.0);
        x[0] = 3.0;
        assert_eq!(s.scale_row(&x)[0], 1.0);
        x[0] = -1.0;
        assert_eq!(s.scale_row(&x)[0], -1.0);
        assert!(fit_scaler(&[]).is_err());
    }

    #[test]
    fn scaler_ignores_anomalous_rows() {
        let rows: Vec<Features> = (0..10).map(|t| [t as f64; 24]).collect();
        let run = EngineRun::new(1, rows.clone());
        let s = fit_scaler(&[run]).unwrap();
        let mut perturbed = rows;
        for r in perturbed.iter_mut().skip(6) {
            *r = [1e6; 24];
        }
        let s2 = fit_scaler(&[EngineRun::new(1, perturbed)]).unwrap();
        assert_eq!(s, s2);
        assert_eq!(s.max[0], 5.0);
    }

    #[test]
    fn train_val_split_is_contiguous() {
        let run = EngineRun::new(1, vec![[0.0; 24]; 100]);
        let (tr, va) = run.train_val_ranges(0.1);
        assert_eq!((tr, va), (0..54, 54..60));
        assert_eq!(run.critical_range(), 90..100);
    }

    #[test]
    fn scaled_csv_header() {
        let run = EngineRun::new(9, vec![[0.5; 24]; 5]);
        let mut buf = Vec::new();
        write_scaled_csv(&[run], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("unit,cycle,f0,f1"));
        assert!(header.ends_with("f23,label"));
        assert_eq!(lines.next().unwrap().split(',').count(), 27);
        assert!(text.lines().last().unwrap().ends_with("anomalous"));
    }

    proptest! {
        #[test]
        fn parse_write_round_trip(
            lens in proptest::collection::vec(5usize..20, 1..4),
            vals in proptest::collection::vec(-1e4f64..1e4, 24),
        ) {
            let runs: Vec<EngineRun> = lens.iter().enumerate().map(|(u, &t)| {
                let rows = (0..t).map(|c| {
                    let mut r = [0.0; 24];
                    for i in 0..24 { r[i] = vals[i] * (c as f64 + 1.0) / 7.0; }
                    r
                }).collect();
                EngineRun::new(u as u32 + 1, rows)
            }).collect();
            let back = parse_cmapss_str(&write_cmapss(&runs)).unwrap();
            prop_assert_eq!(back, runs);
        }

        #[test]
        fn split_is_partition(n in 2usize..60, seed in any::<u64>(), frac in 0.05f64..0.95) {
            let runs: Vec<EngineRun> = (1..=n as u32).map(|u| EngineRun::new(u, vec![[0.0; 24]; 5])).collect();
            let s = split_engines(&runs, frac, seed).unwrap();
            let mut all: Vec<u32> = s.train_engines.iter().chain(&s.test_engines).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (1..=n as u32).collect::<Vec<_>>());
            prop_assert!(s.train_engines.iter().all(|u| !s.test_engines.contains(u)));
        }
    }
}
