//! Temporal differential consistency autoencoders for run-to-failure
//! anomaly detection.
//!
//! The math modules (`pendulum`, `linalg`, `net`, `tdc`, `diagnostics`) are
//! generic over [`Scalar`]; data handling and detection run in `f64`.

// `!(x > 0)` guards are intentional: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod dataio;
pub mod detector;
pub mod diagnostics;
pub mod linalg;
pub mod net;
pub mod pendulum;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod synthetic;
pub mod tdc;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use dataio::{DataError, EngineRun, Label};
pub use detector::{DetectorConfig, DetectorError};
pub use diagnostics::DiagnosticsError;
pub use net::NetError;
pub use pendulum::PendulumError;
pub use pipeline::{PipelineError, Subset};
pub use scalar::Scalar;
pub use tdc::{TrainError, TrainingConfig};

/// Double-precision autoencoder.
pub type Autoencoder = net::Network<f64>;
/// Single-precision autoencoder.
pub type Autoencoder32 = net::Network<f32>;
pub type Latent = tdc::LatentSeries<f64>;
pub type PendulumConfig = pendulum::PendulumConfig<f64>;
