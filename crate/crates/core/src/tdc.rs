//! Autoencoder training with the temporal differential consistency loss.
//!
//! For every centre row `x_t` with both neighbours available the total loss
//! is `MSE(AE(x_t), x_t) + alpha * MSE((z_{t+1} - z_{t-1}) / 2dt, z_dot_t)`,
//! where `z` is the state half and `z_dot` the derivative half of the latent
//! vector. Gradients flow through all three encoder evaluations unless the
//! stop-gradient ablation is selected.

use std::io::Write;
use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{EngineRun, DEFAULT_VAL_FRACTION, FEATURE_DIM};
use crate::net::{AdamaxConfig, AdamaxState, Architecture, Gradients, NetError, Network};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training triplets available")]
    NoTriplets,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// How the central difference couples into the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientFlow {
    /// Gradients reach the encoder through `z_{t-1}`, `z_{t+1}` and `z_dot_t`.
    #[default]
    Full,
    /// The central difference is a constant target; only `z_dot_t` is pulled.
    StopGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub dt: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub gradient_flow: GradientFlow,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.003,
            alpha: 100.0,
            latent_dim: 8,
            hidden_width: 24,
            dt: 1.0,
            seed: 0,
            val_fraction: DEFAULT_VAL_FRACTION,
            gradient_flow: GradientFlow::Full,
        }
    }
}

impl TrainingConfig {
    pub fn architecture(&self) -> Architecture {
        let h = self.hidden_width;
        Architecture {
            widths: vec![FEATURE_DIM, h, h, self.latent_dim, h, h, FEATURE_DIM],
            latent_index: 3,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_width == 0 {
            return bad("epochs, batch size and hidden width must be positive");
        }
        if self.latent_dim == 0 || !self.latent_dim.is_multiple_of(2) {
            return bad("latent dimension must be a positive even integer");
        }
        if !(self.learning_rate > 0.0 && self.dt > 0.0) || !(self.alpha >= 0.0) {
            return bad("learning rate and dt must be positive, alpha non-negative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Centre row `t` of engine `run`; the triplet is rows `t-1, t, t+1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub run: usize,
    pub t: usize,
}

/// Which rows of each engine may contribute triplets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowWindow {
    All,
    Normal,
    /// First `1 - val_fraction` of the normal rows.
    NormalTrain(f64),
    /// Last `val_fraction` of the normal rows.
    NormalVal(f64),
}

impl RowWindow {
    pub fn range(self, run: &EngineRun) -> Range<usize> {
        match self {
            RowWindow::All => 0..run.life_length(),
            RowWindow::Normal => run.normal_range(),
            RowWindow::NormalTrain(v) => run.train_val_ranges(v).0,
            RowWindow::NormalVal(v) => run.train_val_ranges(v).1,
        }
    }
}

/// Every interior row of each engine's window, in engine order.
pub fn make_triplets(runs: &[EngineRun], window: RowWindow) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (idx, run) in runs.iter().enumerate() {
        let r = window.range(run);
        if r.len() < 3 {
            log::warn!(
                "unit {}: window of {} rows yields no triplets",
                run.unit_id,
                r.len()
            );
            continue;
        }
        out.extend((r.start + 1..r.end - 1).map(|t| Triplet { run: idx, t }));
    }
    out
}

/// Aligned measurements at `t-1`, `t`, `t+1`, one row per triplet.
#[derive(Debug, Clone)]
pub struct TripletBatch<T> {
    pub prev: Vec<Vec<T>>,
    pub curr: Vec<Vec<T>>,
    pub next: Vec<Vec<T>>,
}

impl<T: Scalar> TripletBatch<T> {
    pub fn gather(runs: &[EngineRun], triplets: &[Triplet]) -> Self {
        let row = |r: usize, t: usize| {
            runs[r].features[t]
                .iter()
                .map(|&v| T::lit(v))
                .collect::<Vec<T>>()
        };
        Self {
            prev: triplets.iter().map(|p| row(p.run, p.t - 1)).collect(),
            curr: triplets.iter().map(|p| row(p.run, p.t)).collect(),
            next: triplets.iter().map(|p| row(p.run, p.t + 1)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.curr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curr.is_empty()
    }
}

/// `MSE((z_next - z_prev) / 2dt, z_dot)`.
pub fn tdc_loss<T: Scalar>(z_prev: &[T], z_next: &[T], z_dot: &[T], dt: T) -> T {
    let two_dt = T::lit(2.0) * dt;
    let sum: T = z_prev
        .iter()
        .zip(z_next)
        .zip(z_dot)
        .map(|((&a, &b), &d)| {
            let e = (b - a) / two_dt - d;
            e * e
        })
        .sum();
    sum / T::from_count(z_dot.len())
}

/// Batch-mean loss terms; `total = rec + alpha * tdc`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub rec: T,
    pub tdc: T,
    pub total: T,
}

/// Loss terms of a batch without gradients.
pub fn batch_loss<T: Scalar>(
    net: &Network<T>,
    batch: &TripletBatch<T>,
    alpha: T,
    dt: T,
) -> Result<LossParts<T>, NetError> {
    let (mut rec, mut tdc) = (T::zero(), T::zero());
    let half = net.latent_dim() / 2;
    for i in 0..batch.len() {
        let (y, cache) = net.forward(&batch.curr[i])?;
        rec += mse(&y, &batch.curr[i]);
        let latent = &cache.activations[net.encoder_depth()];
        let zp = net.encode_vec(&batch.prev[i])?;
        let zn = net.encode_vec(&batch.next[i])?;
        tdc += tdc_loss(&zp[..half], &zn[..half], &latent[half..], dt);
    }
    let n = T::from_count(batch.len().max(1));
    let (rec, tdc) = (rec / n, tdc / n);
    Ok(LossParts {
        rec,
        tdc,
        total: rec + alpha * tdc,
    })
}

/// Loss terms and exact gradients of `rec + alpha * tdc` for one batch.
pub fn batch_loss_and_gradients<T: Scalar>(
    net: &Network<T>,
    batch: &TripletBatch<T>,
    alpha: T,
    dt: T,
    flow: GradientFlow,
) -> Result<(LossParts<T>, Gradients<T>), NetError> {
    let mut grads = Gradients::zeros_like(net);
    let b = T::from_count(batch.len().max(1));
    let k = net.output_dim();
    let half = net.latent_dim() / 2;
    let two = T::lit(2.0);
    let two_dt = two * dt;
    let rec_scale = two / (b * T::from_count(k));
    let tdc_scale = two * alpha / (b * T::from_count(half));
    let (mut rec, mut tdc) = (T::zero(), T::zero());

    for i in 0..batch.len() {
        let x = &batch.curr[i];
        let enc = net.forward_range(net.encoder_range(), x)?;
        let latent = enc.output().to_vec();
        let dec = net.forward_range(net.decoder_range(), &latent)?;
        let y = dec.output();
        rec += mse(y, x);

        let enc_prev = net.forward_range(net.encoder_range(), &batch.prev[i])?;
        let enc_next = net.forward_range(net.encoder_range(), &batch.next[i])?;
        let (zp, zn) = (&enc_prev.output()[..half], &enc_next.output()[..half]);
        let z_dot = &latent[half..];
        tdc += tdc_loss(zp, zn, z_dot, dt);

        // residual of the consistency term per state node
        let resid: Vec<T> = (0..half)
            .map(|j| (zn[j] - zp[j]) / two_dt - z_dot[j])
            .collect();

        let out_grad: Vec<T> = y
            .iter()
            .zip(x)
            .map(|(&a, &t)| rec_scale * (a - t))
            .collect();
        let mut latent_grad = net.backward_into(&dec, &out_grad, &mut grads)?;
        for j in 0..half {
            latent_grad[half + j] -= tdc_scale * resid[j];
        }
        net.backward_into(&enc, &latent_grad, &mut grads)?;

        if flow == GradientFlow::Full && alpha != T::zero() {
            let mut g_next = vec![T::zero(); 2 * half];
            let mut g_prev = vec![T::zero(); 2 * half];
            for j in 0..half {
                g_next[j] = tdc_scale * resid[j] / two_dt;
                g_prev[j] = -g_next[j];
            }
            net.backward_into(&enc_next, &g_next, &mut grads)?;
            net.backward_into(&enc_prev, &g_prev, &mut grads)?;
        }
    }
    let (rec, tdc) = (rec / b, tdc / b);
    Ok((
        LossParts {
            rec,
            tdc,
            total: rec + alpha * tdc,
        },
        grads,
    ))
}

fn mse<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / T::from_count(a.len())
}

/// Per-epoch means of both loss terms. Validation columns are `NaN` when no
/// validation triplets exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub rec_loss: f64,
    pub tdc_loss: f64,
    pub val_rec_loss: f64,
    pub val_tdc_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    pub network: Network<T>,
    pub history: Vec<EpochLoss>,
    pub n_train_triplets: usize,
    pub n_val_triplets: usize,
}

/// Trains a freshly initialised autoencoder on the normal training rows of
/// the given (scaled) runs.
pub fn train<T: Scalar>(
    runs: &[EngineRun],
    config: &TrainingConfig,
) -> Result<TrainedModel<T>, TrainError> {
    config.validate()?;
    let mut init_rng = seed::component_rng(config.seed, seed::INIT);
    let net = Network::<T>::autoencoder(&config.architecture(), &mut init_rng)?;
    train_from(net, runs, config)
}

/// Continues training `net` with the given configuration.
pub fn train_from<T: Scalar>(
    mut net: Network<T>,
    runs: &[EngineRun],
    config: &TrainingConfig,
) -> Result<TrainedModel<T>, TrainError> {
    config.validate()?;
    if net.latent_dim() != config.latent_dim {
        return Err(TrainError::InvalidConfig(format!(
            "network latent width {} differs from configured {}",
            net.latent_dim(),
            config.latent_dim
        )));
    }
    let mut triplets = make_triplets(runs, RowWindow::NormalTrain(config.val_fraction));
    if triplets.is_empty() {
        return Err(TrainError::NoTriplets);
    }
    let val_triplets = if config.val_fraction > 0.0 {
        make_triplets(runs, RowWindow::NormalVal(config.val_fraction))
    } else {
        Vec::new()
    };
    let val_batch = TripletBatch::<T>::gather(runs, &val_triplets);

    let alpha = T::lit(config.alpha);
    let dt = T::lit(config.dt);
    let mut opt = AdamaxState::new(
        &net,
        AdamaxConfig {
            learning_rate: config.learning_rate,
            ..Default::default()
        },
    );
    let mut shuffle_rng = seed::component_rng(config.seed, seed::SHUFFLE);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        triplets.shuffle(&mut shuffle_rng);
        let (mut rec_sum, mut tdc_sum) = (0.0, 0.0);
        for (bi, chunk) in triplets.chunks(config.batch_size).enumerate() {
            let batch = TripletBatch::gather(runs, chunk);
            let (loss, grads) =
                batch_loss_and_gradients(&net, &batch, alpha, dt, config.gradient_flow)?;
            if !loss.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            opt.step(&mut net, &grads).map_err(|e| match e {
                NetError::NonFiniteGradient => TrainError::NonFiniteLoss { epoch, batch: bi },
                other => other.into(),
            })?;
            let n = chunk.len() as f64;
            rec_sum += loss.rec.as_f64() * n;
            tdc_sum += loss.tdc.as_f64() * n;
        }
        let n = triplets.len() as f64;
        let (val_rec_loss, val_tdc_loss) = if val_batch.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let v = batch_loss(&net, &val_batch, alpha, dt)?;
            (v.rec.as_f64(), v.tdc.as_f64())
        };
        let row = EpochLoss {
            epoch,
            rec_loss: rec_sum / n,
            tdc_loss: tdc_sum / n,
            val_rec_loss,
            val_tdc_loss,
        };
        log::debug!(
            "epoch {epoch}: rec {:.6e} tdc {:.6e}",
            row.rec_loss,
            row.tdc_loss
        );
        history.push(row);
    }
    Ok(TrainedModel {
        network: net,
        history,
        n_train_triplets: triplets.len(),
        n_val_triplets: val_triplets.len(),
    })
}

/// `epoch,rec_loss,tdc_loss,val_rec_loss,val_tdc_loss`.
pub fn write_loss_csv<W: Write>(history: &[EpochLoss], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,rec_loss,tdc_loss,val_rec_loss,val_tdc_loss")?;
    for h in history {
        writeln!(
            w,
            "{},{},{},{},{}",
            h.epoch, h.rec_loss, h.tdc_loss, h.val_rec_loss, h.val_tdc_loss
        )?;
    }
    Ok(())
}

/// Per-timestep latent vectors of one engine; columns `[0, half)` are states
/// and `[half, 2 half)` their derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeries<T> {
    pub unit_id: u32,
    pub values: Vec<Vec<T>>,
    pub half: usize,
}

impl<T: Scalar> LatentSeries<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        2 * self.half
    }

    pub fn node(&self, i: usize) -> Vec<T> {
        self.values.iter().map(|v| v[i]).collect()
    }

    /// `(z_i, z_dot_i)` series of pair `i`.
    pub fn pair(&self, i: usize) -> (Vec<T>, Vec<T>) {
        (self.node(i), self.node(i + self.half))
    }

    pub fn to_f64(&self) -> LatentSeries<f64> {
        LatentSeries {
            unit_id: self.unit_id,
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| x.as_f64()).collect())
                .collect(),
            half: self.half,
        }
    }
}

/// Single-step inference: each row is encoded independently.
pub fn infer_latent<T: Scalar>(
    net: &Network<T>,
    run: &EngineRun,
) -> Result<LatentSeries<T>, NetError> {
    let n = net.latent_dim();
    if !n.is_multiple_of(2) {
        return Err(NetError::OddLatent(n));
    }
    let values = run
        .features
        .iter()
        .map(|row| {
            let x: Vec<T> = row.iter().map(|&v| T::lit(v)).collect();
            net.encode_vec(&x)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LatentSeries {
        unit_id: run.unit_id,
        values,
        half: n / 2,
    })
}
