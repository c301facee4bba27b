use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use serde_json::Value;

use tdcae::checkpoint::Checkpoint;
use tdcae::dataio::{EngineRun, Label};
use tdcae::detector::{self, count_macs, DetectorConfig, MetricsSummary, Thresholds};
use tdcae::diagnostics::{self, DiagnosticsReport, RankSummary, TwoNnFit};
use tdcae::pendulum;
use tdcae::pipeline::{self, Subset};
use tdcae::tdc::{self, GradientFlow};

use crate::config::RunConfig;
use crate::{Cli, Command, Common, Engines, ModelFlags};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate {
            common,
            no_drift,
            dt,
            t_end,
        } => {
            apply_common(&mut cfg, &common);
            if let Some(dt) = dt {
                cfg.pendulum.dt = dt;
            }
            if let Some(t) = t_end {
                cfg.pendulum.t_end = t;
            }
            if no_drift {
                cfg.pendulum = cfg.pendulum.without_drift();
            }
            simulate(&cfg, no_drift)
        }
        Command::Train {
            common,
            model,
            optimize,
        } => {
            apply_common(&mut cfg, &common);
            apply_model(&mut cfg, &model);
            cfg.validate()?;
            train(&cfg, optimize)
        }
        Command::Detect {
            common,
            checkpoint,
            engines,
            refit,
        } => {
            apply_common(&mut cfg, &common);
            let detector_from_file = cfg.detector.is_some();
            detect(&cfg, &checkpoint, engines, refit || detector_from_file)
        }
        Command::Diagnose {
            common,
            checkpoint,
            engines,
        } => {
            apply_common(&mut cfg, &common);
            diagnose(&cfg, &checkpoint, engines)
        }
        Command::Report { inputs, out } => report(&inputs, out.as_deref()),
    }
}

fn apply_common(cfg: &mut RunConfig, c: &Common) {
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(subset) = c.subset {
        cfg.data.subset = subset;
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if let Some(dir) = &c.data_dir {
        cfg.data.dir = Some(dir.clone());
    }
}

fn apply_model(cfg: &mut RunConfig, m: &ModelFlags) {
    if let Some(a) = m.alpha {
        cfg.training.alpha = a;
    }
    if let Some(n) = m.latent_dim {
        cfg.training.latent_dim = n;
    }
    if let Some(e) = m.epochs {
        cfg.training.epochs = e;
    }
    if m.stop_gradient {
        cfg.training.gradient_flow = GradientFlow::StopGradient;
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn load_runs(cfg: &RunConfig, seed: u64) -> Result<Vec<EngineRun>> {
    let runs = pipeline::load_subset(
        cfg.data.subset,
        cfg.data.dir.as_deref(),
        &cfg.synthetic,
        seed,
    )?;
    ensure!(!runs.is_empty(), "dataset contains no engines");
    Ok(runs)
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize)]
struct WindowRadius {
    start: f64,
    end: f64,
    max_radius: f64,
}

#[derive(Serialize)]
struct SimulateReport {
    config: tdcae::PendulumConfig,
    drift: bool,
    slice: (usize, usize),
    box_counting: diagnostics::BoxCountFit,
    window_radii: Vec<WindowRadius>,
    bounded: bool,
}

fn simulate(cfg: &RunConfig, no_drift: bool) -> Result<()> {
    let traj = pendulum::simulate(&cfg.pendulum)?;
    let out = out_dir(cfg)?;
    let mut w = create(&out.join("trajectory.csv"))?;
    writeln!(w, "t,theta,theta_dot")?;
    for p in &traj {
        writeln!(w, "{},{},{}", p.t, p.theta, p.theta_dot)?;
    }
    w.flush()?;

    let end = cfg.simulate.slice_end.min(traj.len());
    let slice = pendulum::phase_slice(&traj, cfg.simulate.slice_start, end)?;
    let fit = diagnostics::box_counting_dimension(&slice, &diagnostics::log_spaced_epsilons())?;

    // max phase-space radius per 20 s window
    let per_window = (20.0 / cfg.pendulum.dt).round().max(1.0) as usize;
    let window_radii: Vec<WindowRadius> = traj
        .chunks(per_window)
        .map(|c| WindowRadius {
            start: c[0].t,
            end: c[c.len() - 1].t,
            max_radius: c
                .iter()
                .map(|p| p.theta.hypot(p.theta_dot))
                .fold(0.0, f64::max),
        })
        .collect();
    let first = window_radii.first().map_or(0.0, |w| w.max_radius);
    let bounded = window_radii
        .iter()
        .all(|w| w.max_radius <= first * 1.05 + 1e-9);
    log::info!(
        "box-counting slope {:.3} over samples {}..{end}",
        fit.estimate.value,
        cfg.simulate.slice_start
    );
    write_json(
        &out.join("box_counting.json"),
        &SimulateReport {
            config: cfg.pendulum,
            drift: !no_drift,
            slice: (cfg.simulate.slice_start, end),
            box_counting: fit,
            window_radii,
            bounded,
        },
    )
}

// ---------------------------------------------------------------- train

#[derive(Serialize)]
struct SeedMetrics {
    seed: u64,
    subset: Subset,
    engines: &'static str,
    metrics: MetricsSummary,
    training_metrics: MetricsSummary,
    detector: DetectorConfig,
    weight_macs: u64,
    final_rec_loss: f64,
    final_tdc_loss: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    subset: Subset,
    architecture: String,
    weight_macs: u64,
    seeds: Vec<SeedMetrics>,
}

fn train(cfg: &RunConfig, optimize: bool) -> Result<()> {
    let out = out_dir(cfg)?.to_path_buf();
    // data problems surface before any training
    let datasets = cfg
        .seeds
        .iter()
        .map(|&s| load_runs(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let mut summary = TrainSummary {
        subset: cfg.data.subset,
        architecture: cfg.training.architecture().to_string(),
        weight_macs: 0,
        seeds: Vec::new(),
    };
    for (&seed, runs) in cfg.seeds.iter().zip(&datasets) {
        let training = tdc::TrainingConfig {
            seed,
            ..cfg.training.clone()
        };
        let data = pipeline::prepare(runs, cfg.data.test_fraction, training.val_fraction, seed)?;
        log::info!("seed {seed}: training on {} engines", data.train.len());
        let model = tdc::train::<f64>(&data.train, &training)?;
        let (detector_cfg, thresholds) = fit_bands(cfg, &model.network, &data.train, optimize)?;
        let train_eval =
            pipeline::evaluate(&model.network, &data.train, &detector_cfg, &thresholds)?;
        let test_eval = pipeline::evaluate(&model.network, &data.test, &detector_cfg, &thresholds)?;

        let dir = out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir)?;
        let mut w = create(&dir.join("loss.csv"))?;
        tdc::write_loss_csv(&model.history, &mut w)?;
        w.flush()?;
        summary.weight_macs = count_macs(&model.network).weight_macs;
        let last = model.history.last().expect("at least one epoch");
        let metrics = SeedMetrics {
            seed,
            subset: cfg.data.subset,
            engines: "test",
            metrics: test_eval.metrics,
            training_metrics: train_eval.metrics,
            detector: detector_cfg.clone(),
            weight_macs: count_macs(&model.network).weight_macs,
            final_rec_loss: last.rec_loss,
            final_tdc_loss: last.tdc_loss,
        };
        write_json(&dir.join("metrics.json"), &metrics)?;
        let mut ck = Checkpoint::new(model.network, data.scaler, Some(data.split), training);
        ck.detector = Some(detector_cfg);
        ck.thresholds = Some(thresholds);
        ck.save(dir.join("checkpoint.json"))?;
        println!(
            "seed {seed}: test F1 {:.2}%, CDR {:.0}%",
            metrics.metrics.f1 * 100.0,
            metrics.metrics.cdr * 100.0
        );
        summary.seeds.push(metrics);
    }
    write_json(&out.join("summary.json"), &summary)
}

fn fit_bands(
    cfg: &RunConfig,
    net: &tdcae::Autoencoder,
    train: &[EngineRun],
    optimize: bool,
) -> Result<(DetectorConfig, Thresholds)> {
    let base = cfg.detector();
    if !optimize {
        return Ok((base.clone(), pipeline::fit_detector(net, train, &base)?));
    }
    let latents = pipeline::infer_all(net, train)?;
    let labels: Vec<Vec<Label>> = train.iter().map(|r| r.labels.clone()).collect();
    let grid = cfg.grid.clone().unwrap_or_default();
    let best = detector::optimize_thresholds(&latents, &labels, &base, &grid)?;
    log::info!(
        "grid search: upper {} lower {} window {} (train F1 {:.4})",
        best.config.upper_percentile,
        best.config.lower_percentile,
        best.config.moving_average_window,
        best.training_metrics.f1
    );
    Ok((best.config, best.thresholds))
}

// ---------------------------------------------------------------- detect

fn select_engines(
    ck: &Checkpoint,
    runs: &[EngineRun],
    engines: Engines,
) -> Result<(Vec<EngineRun>, Vec<EngineRun>)> {
    let split = ck
        .split
        .as_ref()
        .context("checkpoint has no engine split")?;
    let known: std::collections::HashSet<u32> = runs.iter().map(|r| r.unit_id).collect();
    let missing: Vec<u32> = split
        .train_engines
        .iter()
        .chain(&split.test_engines)
        .filter(|u| !known.contains(u))
        .copied()
        .collect();
    if !missing.is_empty() {
        bail!("dataset does not match checkpoint: units {missing:?} are missing");
    }
    let (train_raw, test_raw) = split.partition(runs);
    let train: Vec<EngineRun> = train_raw.iter().map(|r| ck.scaler.apply(r)).collect();
    let test: Vec<EngineRun> = test_raw.iter().map(|r| ck.scaler.apply(r)).collect();
    let chosen = match engines {
        Engines::Train => train.clone(),
        Engines::Test => test,
        Engines::All => {
            let mut all: Vec<EngineRun> = runs.iter().map(|r| ck.scaler.apply(r)).collect();
            all.sort_by_key(|r| r.unit_id);
            all
        }
    };
    ensure!(!chosen.is_empty(), "no engines selected");
    Ok((train, chosen))
}

fn engines_name(e: Engines) -> &'static str {
    match e {
        Engines::Train => "train",
        Engines::Test => "test",
        Engines::All => "all",
    }
}

#[derive(Serialize)]
struct DetectReport {
    seed: u64,
    subset: Subset,
    engines: &'static str,
    metrics: MetricsSummary,
    weight_macs: u64,
    detector: DetectorConfig,
    thresholds: Thresholds,
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn detect(cfg: &RunConfig, checkpoint: &Path, engines: Engines, refit: bool) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let runs = load_runs(cfg, ck.seed)?;
    let (train, chosen) = select_engines(&ck, &runs, engines)?;
    let (detector_cfg, thresholds) = match (&ck.detector, &ck.thresholds, refit) {
        (Some(d), Some(t), false) => (d.clone(), t.clone()),
        _ => {
            let mut d = cfg
                .detector
                .clone()
                .unwrap_or_else(|| cfg.data.subset.detector_defaults());
            if cfg.detector.is_none() {
                d.latent_dim = ck.network.latent_dim();
            }
            let t = pipeline::fit_detector(&ck.network, &train, &d).map_err(anyhow::Error::from);
            (d, t?)
        }
    };
    ensure!(
        detector_cfg.latent_dim == ck.network.latent_dim()
            && thresholds.upper.len() == ck.network.latent_dim(),
        "detector expects {} latent nodes but the checkpoint has {}",
        detector_cfg.latent_dim,
        ck.network.latent_dim()
    );
    let eval = pipeline::evaluate(&ck.network, &chosen, &detector_cfg, &thresholds)?;
    let out = out_dir(cfg)?;
    let mut w = create(&out.join("detections.csv"))?;
    pipeline::write_detections(&eval, &chosen, &mut w)?;
    w.flush()?;
    let m = eval.metrics;
    println!(
        "{} engines ({}): Acc {:.2} Prec {:.2} Rec {:.2} F1 {:.2} CDR {:.1}",
        m.n_engines,
        engines_name(engines),
        m.accuracy * 100.0,
        m.precision * 100.0,
        m.recall * 100.0,
        m.f1 * 100.0,
        m.cdr * 100.0
    );
    write_json(
        &out.join("metrics.json"),
        &DetectReport {
            seed: ck.seed,
            subset: cfg.data.subset,
            engines: engines_name(engines),
            metrics: m,
            weight_macs: count_macs(&ck.network).weight_macs,
            detector: detector_cfg,
            thresholds,
        },
    )
}

// ---------------------------------------------------------------- diagnose

fn diagnose(cfg: &RunConfig, checkpoint: &Path, engines: Engines) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let runs = load_runs(cfg, ck.seed)?;
    let (_, chosen) = select_engines(&ck, &runs, engines)?;
    let d = &cfg.diagnostics;

    let normal_sets: Vec<Vec<Vec<f64>>> = chosen
        .iter()
        .map(|r| {
            r.features[r.normal_range()]
                .iter()
                .map(|f| f.to_vec())
                .collect()
        })
        .collect();
    let intrinsic = match diagnostics::two_nn_per_set(&normal_sets, TwoNnFit::default()) {
        Ok(e) => Some(e),
        Err(e) => {
            log::warn!("intrinsic dimension skipped: {e}");
            None
        }
    };
    let rows: Vec<Vec<f64>> = chosen
        .iter()
        .flat_map(|r| r.features.iter().map(|f| f.to_vec()))
        .collect();
    let rank = diagnostics::jacobian_rank_survey(&ck.network, &rows, d.rank_threshold)?;
    let injectivity = diagnostics::injectivity_ratio_survey(
        &ck.network,
        &rows,
        d.injectivity_delta,
        d.injectivity_floor,
        d.max_pairs,
        ck.seed,
    )?;
    let latents = pipeline::infer_all(&ck.network, &chosen)?;
    let mut eta = Vec::new();
    for l in &latents {
        eta.extend(diagnostics::consistency_metrics(
            l,
            0..l.len(),
            ck.training.dt,
            d.smoothing,
        )?);
    }
    let engines_with_labels: Vec<_> = latents
        .into_iter()
        .zip(&chosen)
        .map(|(l, r)| (l, r.labels.clone()))
        .collect();
    let rho_table = diagnostics::rho_table(&engines_with_labels, ck.training.dt, d.smoothing)?;
    let report = DiagnosticsReport {
        recommended_latent_dim: intrinsic.map(|e| diagnostics::recommended_latent_dim(e.value)),
        intrinsic_dimension: intrinsic,
        box_counting: None,
        jacobian: Some(RankSummary::from(&rank)),
        injectivity: Some(injectivity),
        eta,
        rho_table,
    };
    if let Some(e) = &report.intrinsic_dimension {
        println!("intrinsic dimension {:.2} ± {:.2}", e.value, e.std);
    }
    println!(
        "jacobian full-rank fraction {:.4}; injectivity min ratio {:.3e} ({} below floor)",
        rank.full_rank_fraction, injectivity.min_ratio, injectivity.violations
    );
    let out = out_dir(cfg)?;
    write_json(&out.join("diagnostics.json"), &report)
}

// ---------------------------------------------------------------- report

fn collect_metrics(path: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() || p.file_name().is_some_and(|n| n == "metrics.json") {
                collect_metrics(&p, found)?;
            }
        }
    } else if path.is_file() {
        found.push(path.to_path_buf());
    } else {
        bail!("{} does not exist", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct Stat {
    mean: f64,
    std: f64,
}

#[derive(Serialize)]
struct Aggregate {
    files: Vec<PathBuf>,
    n: usize,
    accuracy: Stat,
    precision: Stat,
    recall: Stat,
    f1: Stat,
    cdr: Stat,
}

fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut files = Vec::new();
    for p in inputs {
        collect_metrics(p, &mut files)?;
    }
    ensure!(!files.is_empty(), "no metrics.json files found");
    let mut rows: Vec<MetricsSummary> = Vec::new();
    for f in &files {
        let v: Value = serde_json::from_str(&fs::read_to_string(f)?)
            .with_context(|| format!("parsing {}", f.display()))?;
        let m = v
            .get("metrics")
            .cloned()
            .with_context(|| format!("{} has no metrics field", f.display()))?;
        rows.push(
            serde_json::from_value(m)
                .with_context(|| format!("reading metrics in {}", f.display()))?,
        );
    }
    let stat = |get: fn(&MetricsSummary) -> f64| {
        let xs: Vec<f64> = rows.iter().map(|m| get(m) * 100.0).collect();
        let (mean, std) = tdcae::scalar::mean_std(&xs);
        Stat { mean, std }
    };
    let agg = Aggregate {
        files: files.clone(),
        n: rows.len(),
        accuracy: stat(|m| m.accuracy),
        precision: stat(|m| m.precision),
        recall: stat(|m| m.recall),
        f1: stat(|m| m.f1),
        cdr: stat(|m| m.cdr),
    };
    println!("| runs | Acc | Prec | Rec | F1 | CDR |");
    println!("|---|---|---|---|---|---|");
    let cell = |s: &Stat| format!("{:.2} ± {:.2}", s.mean, s.std);
    println!(
        "| {} | {} | {} | {} | {} | {} |",
        agg.n,
        cell(&agg.accuracy),
        cell(&agg.precision),
        cell(&agg.recall),
        cell(&agg.f1),
        cell(&agg.cdr)
    );
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_json(&out.join("report.json"), &agg)?;
    }
    Ok(())
}
