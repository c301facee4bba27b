//! Acceptance checks, one printed line per criterion.
//!
//! Criteria 5 to 9 need the public turbofan files (`train_FD001.txt`,
//! `train_FD003.txt`) in the directory named by `TDCAE_CMAPSS_DIR`; without
//! them they are reported as SKIP. Runs without the libtest harness so the
//! report is never captured.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tdcae::dataio::{self, EngineRun, Label};
use tdcae::detector::{count_macs, MetricsSummary, LSTM_REFERENCE_MACS, QUOTED_MAC_ESTIMATE};
use tdcae::diagnostics::{self, TwoNnFit};
use tdcae::net::{Activation, Architecture, LayerSpec, Network};
use tdcae::pendulum::{self, PendulumConfig, TrajectoryPoint};
use tdcae::pipeline::{self, PipelineOutcome, Subset};
use tdcae::tdc::{self, GradientFlow, TrainingConfig, TripletBatch};

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        })
    }
}

struct Outcome {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn skip(detail: &str) -> Outcome {
    Outcome {
        status: Status::Skip,
        detail: detail.to_string(),
    }
}

const N_SEEDS: u64 = 5;

// ---------------------------------------------------------------- 1

fn random_micro_net(rng: &mut ChaCha8Rng) -> Network<f64> {
    let k = rng.gen_range(1..=8);
    let n = 2 * rng.gen_range(1..=4);
    let n_layers = rng.gen_range(2..=4);
    let (widths, depth) = match n_layers {
        2 => (vec![k, n, k], 1),
        3 if rng.gen_bool(0.5) => (vec![k, rng.gen_range(1..=8), n, k], 2),
        3 => (vec![k, n, rng.gen_range(1..=8), k], 1),
        _ => (vec![k, rng.gen_range(1..=8), n, rng.gen_range(1..=8), k], 2),
    };
    let specs: Vec<LayerSpec> = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| LayerSpec {
            in_dim: w[0],
            out_dim: w[1],
            activation: if i + 2 == widths.len() {
                Activation::Identity
            } else {
                Activation::Tanh
            },
        })
        .collect();
    let mut net = Network::glorot(&specs, depth, rng).unwrap();
    // larger weights than Glorot so tanh curvature matters
    let p: Vec<f64> = net
        .flat_params()
        .iter()
        .map(|w| w * 1.5 + rng.gen_range(-0.1..0.1))
        .collect();
    net.set_flat_params(&p).unwrap();
    net
}

fn total_loss(net: &Network<f64>, batch: &TripletBatch<f64>, alpha: f64) -> f64 {
    tdc::batch_loss(net, batch, alpha, 1.0).unwrap().total
}

/// Richardson-extrapolated central difference (fourth order).
fn fd_gradient(net: &Network<f64>, batch: &TripletBatch<f64>, alpha: f64) -> Vec<f64> {
    let base = net.flat_params();
    let mut probe = net.clone();
    let mut eval = |i: usize, h: f64| {
        let mut p = base.clone();
        p[i] += h;
        probe.set_flat_params(&p).unwrap();
        let up = total_loss(&probe, batch, alpha);
        p[i] -= 2.0 * h;
        probe.set_flat_params(&p).unwrap();
        (up - total_loss(&probe, batch, alpha)) / (2.0 * h)
    };
    let h = 1e-3;
    (0..base.len())
        .map(|i| (4.0 * eval(i, h / 2.0) - eval(i, h)) / 3.0)
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let net = random_micro_net(&mut rng);
        let k = net.input_dim();
        let mut rows = |n: usize| {
            (0..n)
                .map(|_| (0..k).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect::<Vec<Vec<f64>>>()
        };
        let batch = TripletBatch {
            prev: rows(4),
            curr: rows(4),
            next: rows(4),
        };
        for alpha in [0.0, 100.0] {
            let (_, grads) =
                tdc::batch_loss_and_gradients(&net, &batch, alpha, 1.0, GradientFlow::Full)
                    .unwrap();
            let numeric = fd_gradient(&net, &batch, alpha);
            for (a, b) in grads.iter().zip(&numeric) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-5 && secs < 30.0,
        format!("max relative error {worst:.2e} (< 1e-5) over 100 nets, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let z = |t: f64| (1.3 * t).sin();
    let rms_error = |h: f64| {
        let ts: Vec<f64> = (0..200).map(|i| 0.05 * i as f64).collect();
        let prev: Vec<f64> = ts.iter().map(|&t| z(t - h)).collect();
        let next: Vec<f64> = ts.iter().map(|&t| z(t + h)).collect();
        let exact: Vec<f64> = ts.iter().map(|&t| 1.3 * (1.3 * t).cos()).collect();
        tdc::tdc_loss(&prev, &next, &exact, h).sqrt()
    };
    let ratios: Vec<f64> = [0.2, 0.1, 0.05]
        .iter()
        .map(|&h| rms_error(h) / rms_error(h / 2.0))
        .collect();
    let ok = ratios.iter().all(|r| (3.5..=4.5).contains(r));
    verdict(
        ok,
        format!(
            "error ratios under halving {:?} (expected in [3.5, 4.5])",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn bbox(points: &[TrajectoryPoint<f64>]) -> [f64; 4] {
    points.iter().fold(
        [
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        ],
        |b, p| {
            [
                b[0].min(p.theta),
                b[1].max(p.theta),
                b[2].min(p.theta_dot),
                b[3].max(p.theta_dot),
            ]
        },
    )
}

fn criterion_3() -> Outcome {
    let free = |dt: f64| PendulumConfig::<f64> {
        gamma: 0.0,
        amplitude: 0.0,
        alpha: 0.0,
        beta: 0.0,
        theta0: 0.01,
        thetadot0: 0.0,
        dt,
        t_end: 20.0,
        ..Default::default()
    };
    let end = |dt: f64| {
        let p = *pendulum::simulate(&free(dt)).unwrap().last().unwrap();
        (p.theta, p.theta_dot)
    };
    let dt = 0.1;
    let r = end(dt / 8.0);
    let err = |e: (f64, f64)| ((e.0 - r.0).powi(2) + (e.1 - r.1).powi(2)).sqrt();
    let ratio = err(end(dt)) / err(end(dt / 2.0));
    let order_ok = (14.0..=18.0).contains(&ratio);

    let driven = pendulum::simulate(&PendulumConfig::default().without_drift()).unwrap();
    let half = driven.len() / 2;
    let early = bbox(&driven[..half]);
    let late = bbox(&driven[half..]);
    let bounded = late[0] >= early[0] - 0.1
        && late[1] <= early[1] + 0.1
        && late[2] >= early[2] - 0.1
        && late[3] <= early[3] + 0.1
        && driven
            .iter()
            .all(|p| p.theta.abs() < 10.0 && p.theta_dot.abs() < 10.0);

    let cfg = PendulumConfig::<f64>::default();
    let drifted = pendulum::simulate(&cfg).unwrap();
    let first = (20.0 / cfg.dt).round() as usize;
    let b = bbox(&drifted[..first]);
    let escape = drifted[first..]
        .iter()
        .find(|p| p.theta < b[0] || p.theta > b[1] || p.theta_dot < b[2] || p.theta_dot > b[3])
        .map(|p| p.t);
    let escaped = escape.is_some_and(|t| t <= 200.0);
    verdict(
        order_ok && bounded && escaped,
        format!(
            "endpoint error ratio {ratio:.2} (in [14, 18]); undrifted bounded: {bounded}; drifted leaves 20 s box at t = {}",
            escape.map_or("never".to_string(), |t| format!("{t:.2} s"))
        ),
    )
}

// ---------------------------------------------------------------- 4

fn embed(rng: &mut ChaCha8Rng, latent: &[Vec<f64>], dims: usize) -> Vec<Vec<f64>> {
    // random rotation of the first `dims` axes into 24-D via Gram-Schmidt
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < dims {
        let mut v: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    latent
        .iter()
        .map(|p| {
            (0..24)
                .map(|j| p.iter().zip(&basis).map(|(c, b)| c * b[j]).sum())
                .collect()
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 5000;
    // circle (1-D, curved in 2 ambient axes) and a flat square patch (2-D)
    let circle: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            vec![t.cos(), t.sin()]
        })
        .collect();
    let square: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
        .collect();
    let circle = embed(&mut rng, &circle, 2);
    let square = embed(&mut rng, &square, 2);
    let d1 = diagnostics::two_nn_dimension(&circle, TwoNnFit::default())
        .unwrap()
        .estimate
        .value;
    let d2 = diagnostics::two_nn_dimension(&square, TwoNnFit::default())
        .unwrap()
        .estimate
        .value;

    let eps = diagnostics::log_spaced_epsilons();
    let segment: Vec<[f64; 2]> = (0..20_000)
        .map(|i| {
            let s = i as f64 / 19_999.0;
            [s, 0.5 * s]
        })
        .collect();
    let filled: Vec<[f64; 2]> = (0..200_000)
        .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
        .collect();
    let b1 = diagnostics::box_counting_dimension(&segment, &eps)
        .unwrap()
        .estimate
        .value;
    let b2 = diagnostics::box_counting_dimension(&filled, &eps)
        .unwrap()
        .estimate
        .value;
    let secs = start.elapsed().as_secs_f64();
    let ok = (d1 - 1.0).abs() <= 0.2
        && (d2 - 2.0).abs() <= 0.2
        && (b1 - 1.0).abs() <= 0.1
        && (b2 - 2.0).abs() <= 0.2
        && secs < 60.0;
    verdict(ok, format!("two-nn 1-D {d1:.3}, 2-D {d2:.3}; box-count segment {b1:.3}, square {b2:.3}; {secs:.1}s"))
}

// ---------------------------------------------------------------- data

fn data_path(subset: Subset) -> Option<PathBuf> {
    pipeline::locate_subset(subset, None)
}

const NO_DATA: &str = "turbofan data not available (set TDCAE_CMAPSS_DIR to the folder with train_FD001.txt / train_FD003.txt)";

fn load(subset: Subset) -> Option<Vec<EngineRun>> {
    data_path(subset).map(|p| dataio::parse_cmapss(p).expect("turbofan file parses"))
}

struct SubsetRuns {
    subset: Subset,
    outcomes: Vec<PipelineOutcome>,
}

fn run_seeds(subset: Subset, runs: &[EngineRun]) -> SubsetRuns {
    let outcomes = (0..N_SEEDS)
        .map(|seed| {
            let start = Instant::now();
            let cfg = TrainingConfig {
                seed,
                ..Default::default()
            };
            let o = pipeline::run(
                runs,
                &cfg,
                &subset.detector_defaults(),
                pipeline::DEFAULT_TEST_FRACTION,
            )
            .unwrap();
            eprintln!(
                "{subset} seed {seed}: trained in {:.1}s",
                start.elapsed().as_secs_f64()
            );
            o
        })
        .collect();
    SubsetRuns { subset, outcomes }
}

fn criterion_5(fd001: Option<&[EngineRun]>, fd003: Option<&[EngineRun]>) -> Outcome {
    let (Some(a), Some(b)) = (fd001, fd003) else {
        return skip(NO_DATA);
    };
    let per_engine = |runs: &[EngineRun]| {
        let scaler = dataio::fit_scaler(runs).unwrap();
        let sets: Vec<Vec<Vec<f64>>> = runs
            .iter()
            .map(|r| {
                r.features[r.normal_range()]
                    .iter()
                    .map(|f| scaler.scale_row(f).to_vec())
                    .collect()
            })
            .collect();
        diagnostics::two_nn_per_set(&sets, TwoNnFit::default()).unwrap()
    };
    let (ea, eb) = (per_engine(a), per_engine(b));
    verdict(
        (ea.value - 4.93).abs() <= 0.5 && (eb.value - 4.83).abs() <= 0.5,
        format!(
            "FD001 {:.2} ± {:.2} (4.93 ± 0.5); FD003 {:.2} ± {:.2} (4.83 ± 0.5)",
            ea.value, ea.std, eb.value, eb.std
        ),
    )
}

fn criterion_6(fd001: Option<&SubsetRuns>) -> Outcome {
    let Some(s) = fd001 else { return skip(NO_DATA) };
    let mean = |f: &dyn Fn(&PipelineOutcome) -> f64| {
        s.outcomes.iter().map(f).sum::<f64>() / s.outcomes.len() as f64
    };
    let rec0 = mean(&|o| o.model.history[0].rec_loss);
    let rec1 = mean(&|o| o.model.history.last().unwrap().rec_loss);
    let tdc0 = mean(&|o| o.model.history[0].tdc_loss);
    let tdc1 = mean(&|o| o.model.history.last().unwrap().tdc_loss);
    verdict(
        rec1 < 0.2 * rec0 && tdc1 < 0.2 * tdc0,
        format!("rec {rec0:.3e} -> {rec1:.3e} ({:.1}%), tdc {tdc0:.3e} -> {tdc1:.3e} ({:.1}%) over {N_SEEDS} seeds", 100.0 * rec1 / rec0, 100.0 * tdc1 / tdc0),
    )
}

fn table_check(s: &SubsetRuns, target: [f64; 4], band: f64) -> (bool, String) {
    let pct = |m: &MetricsSummary| {
        [
            m.accuracy * 100.0,
            m.precision * 100.0,
            m.recall * 100.0,
            m.f1 * 100.0,
        ]
    };
    let best = s
        .outcomes
        .iter()
        .map(|o| o.test_eval.metrics)
        .max_by(|a, b| a.f1.total_cmp(&b.f1))
        .unwrap();
    let got = pct(&best);
    let within = got.iter().zip(target).all(|(g, t)| (g - t).abs() <= band);
    let cdr_all = s.outcomes.iter().all(|o| o.test_eval.metrics.cdr == 1.0);
    let cdrs: Vec<String> = s
        .outcomes
        .iter()
        .map(|o| format!("{:.0}", o.test_eval.metrics.cdr * 100.0))
        .collect();
    (
        within && cdr_all,
        format!(
            "{} best seed Acc {:.2} Prec {:.2} Rec {:.2} F1 {:.2} (target {:?} ±{band}); CDR per seed [{}]",
            s.subset,
            got[0],
            got[1],
            got[2],
            got[3],
            target,
            cdrs.join(", ")
        ),
    )
}

fn criterion_7(fd001: Option<&SubsetRuns>, fd003: Option<&SubsetRuns>) -> Outcome {
    let (Some(a), Some(b)) = (fd001, fd003) else {
        return skip(NO_DATA);
    };
    let (ok_a, da) = table_check(a, [96.49, 95.95, 95.18, 95.56], 3.0);
    let (ok_b, db) = table_check(b, [94.84, 93.81, 93.16, 93.49], 4.0);
    verdict(ok_a && ok_b, format!("{da}; {db}"))
}

fn best(s: &SubsetRuns) -> &PipelineOutcome {
    s.outcomes
        .iter()
        .max_by(|a, b| a.test_eval.metrics.f1.total_cmp(&b.test_eval.metrics.f1))
        .unwrap()
}

fn criterion_8(fd001: Option<&SubsetRuns>) -> Outcome {
    let Some(s) = fd001 else { return skip(NO_DATA) };
    let o = best(s);
    let latents = pipeline::infer_all(&o.model.network, &o.data.train).unwrap();
    let mut etas = Vec::new();
    for l in &latents {
        for r in diagnostics::consistency_metrics(l, 0..l.len(), 1.0, None).unwrap() {
            etas.push(r.eta.unwrap_or(f64::NAN));
        }
    }
    let in_band = etas.iter().filter(|e| (0.6..=1.3).contains(*e)).count();
    let engines: Vec<(tdcae::Latent, Vec<Label>)> = latents
        .into_iter()
        .zip(&o.data.train)
        .map(|(l, r)| (l, r.labels.clone()))
        .collect();
    let table = diagnostics::rho_table(&engines, 1.0, None).unwrap();
    let ordered = table
        .iter()
        .filter(|r| r.anomalous_mean > r.normal_mean)
        .count();
    let (lo, hi) = etas
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| {
            (a.min(e), b.max(e))
        });
    verdict(
        in_band == etas.len() && ordered >= 3,
        format!(
            "eta in [0.6, 1.3] for {in_band}/{} engine-pairs (range {lo:.3}..{hi:.3}); rho anomalous > normal for {ordered}/{} pairs",
            etas.len(),
            table.len()
        ),
    )
}

fn criterion_9(fd001: Option<&SubsetRuns>) -> Outcome {
    let Some(s) = fd001 else { return skip(NO_DATA) };
    let o = best(s);
    let test_rows: Vec<Vec<f64>> = o
        .data
        .test
        .iter()
        .flat_map(|r| r.features.iter().map(|f| f.to_vec()))
        .collect();
    let rank = diagnostics::jacobian_rank_survey(
        &o.model.network,
        &test_rows,
        diagnostics::DEFAULT_RANK_THRESHOLD,
    )
    .unwrap();
    let mut rows = test_rows.clone();
    rows.extend(
        o.data
            .train
            .iter()
            .flat_map(|r| r.features.iter().map(|f| f.to_vec()))
            .take(4000usize.saturating_sub(test_rows.len())),
    );
    let inj = diagnostics::injectivity_ratio_survey(
        &o.model.network,
        &rows,
        diagnostics::INJECTIVITY_DELTA,
        diagnostics::INJECTIVITY_FLOOR,
        diagnostics::DEFAULT_MAX_PAIRS,
        0,
    )
    .unwrap();
    verdict(
        rank.full_rank_fraction >= 0.99 && rows.len() >= 4000 && inj.violations == 0,
        format!(
            "full-rank fraction {:.4} over {} test rows; injectivity over {} samples ({} pairs): min ratio {:.3e}, {} below 1e-5",
            rank.full_rank_fraction,
            test_rows.len(),
            rows.len(),
            inj.pairs_evaluated,
            inj.min_ratio,
            inj.violations
        ),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let net = Network::<f64>::zeros(&Architecture::micro(24, 8).layer_specs(), 3).unwrap();
    let r = count_macs(&net);
    verdict(
        r.weight_macs == 2688 && r.lstm_ratio >= 90.0,
        format!(
            "weight MACs {} (expected 2688), quoted figure {QUOTED_MAC_ESTIMATE} differs by {}; LSTM {LSTM_REFERENCE_MACS} / {} = {:.1}x; note: {}",
            r.weight_macs,
            QUOTED_MAC_ESTIMATE as i64 - r.weight_macs as i64,
            r.weight_macs,
            r.lstm_ratio,
            r.note
        ),
    )
}

fn main() -> std::process::ExitCode {
    let fd001 = load(Subset::Fd001);
    let fd003 = load(Subset::Fd003);
    let runs001 = fd001.as_deref().map(|r| run_seeds(Subset::Fd001, r));
    let runs003 = fd003.as_deref().map(|r| run_seeds(Subset::Fd003, r));

    let results = vec![
        (1, "gradient correctness", criterion_1()),
        (2, "central-difference order", criterion_2()),
        (3, "RK4 order, boundedness, drift escape", criterion_3()),
        (4, "dimension estimators", criterion_4()),
        (
            5,
            "intrinsic dimension of turbofan data",
            criterion_5(fd001.as_deref(), fd003.as_deref()),
        ),
        (6, "training convergence", criterion_6(runs001.as_ref())),
        (
            7,
            "detection metrics",
            criterion_7(runs001.as_ref(), runs003.as_ref()),
        ),
        (8, "consistency structure", criterion_8(runs001.as_ref())),
        (9, "geometry checks", criterion_9(runs001.as_ref())),
        (10, "MAC accounting", criterion_10()),
    ];
    let mut failed = Vec::new();
    for (id, name, o) in &results {
        println!("criterion {id:>2} [{}] {name}: {}", o.status, o.detail);
        if o.status == Status::Fail {
            failed.push(*id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: no failing criteria");
        std::process::ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::ExitCode::FAILURE
    }
}
