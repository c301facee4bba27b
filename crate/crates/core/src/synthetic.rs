//! Run-to-failure fleets with the same layout as the turbofan files, for
//! smoke tests and demos when the real data is not available.
//!
//! Every informative sensor follows `base + sign * scale * h(t) + noise`
//! with health index `h(t) = exp(k * t / T) - 1`, so drift is negligible
//! early in life and steep at the end. Six sensors are held constant.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{EngineRun, Features, FEATURE_DIM};
use crate::seed;

/// Sensor slots (0-based within the 21 sensors) that carry no signal.
pub const CONSTANT_SENSORS: [usize; 6] = [0, 4, 9, 15, 17, 18];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_engines: usize,
    pub min_life: usize,
    pub max_life: usize,
    /// Growth rate of the health index.
    pub degradation_rate: f64,
    /// Noise standard deviation relative to each sensor's degradation scale.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_engines: 100,
            min_life: 128,
            max_life: 362,
            degradation_rate: 5.0,
            noise: 0.08,
        }
    }
}

struct SensorModel {
    base: f64,
    scale: f64,
    sign: f64,
}

fn sensor_models<R: Rng>(rng: &mut R) -> Vec<SensorModel> {
    (0..21)
        .map(|s| {
            let base = rng.gen_range(10.0..2000.0);
            let scale = if CONSTANT_SENSORS.contains(&s) {
                0.0
            } else {
                base * rng.gen_range(0.002..0.01)
            };
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            SensorModel { base, scale, sign }
        })
        .collect()
}

/// Generates a fleet; unit ids start at 1.
pub fn generate(config: &SyntheticConfig, seed_root: u64) -> Vec<EngineRun> {
    let mut rng = seed::component_rng(seed_root, "synthetic");
    let sensors = sensor_models(&mut rng);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let lo = config.min_life.max(crate::dataio::MIN_LIFE);
    let hi = config.max_life.max(lo);
    (1..=config.n_engines as u32)
        .map(|unit| {
            let life = rng.gen_range(lo..=hi);
            let offset: Vec<f64> = sensors
                .iter()
                .map(|m| m.scale * 0.3 * std.sample(&mut rng))
                .collect();
            let features: Vec<Features> = (0..life)
                .map(|t| {
                    let h = (config.degradation_rate * (t + 1) as f64 / life as f64).exp() - 1.0;
                    let h = h / (config.degradation_rate.exp() - 1.0);
                    let mut row = [0.0; FEATURE_DIM];
                    row[0] = 0.002 * std.sample(&mut rng);
                    row[1] = 0.0003 * std.sample(&mut rng);
                    row[2] = 100.0;
                    for (s, m) in sensors.iter().enumerate() {
                        let noise = config.noise * m.scale * std.sample(&mut rng);
                        row[3 + s] = m.base + offset[s] + m.sign * m.scale * h + noise;
                    }
                    row
                })
                .collect();
            EngineRun::new(unit, features)
        })
        .collect()
}
