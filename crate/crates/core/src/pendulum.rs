//! Damped driven pendulum with slow additive drift.
//!
//! The dynamics `θ'' + γθ' + ω0² sin θ = A cos(ω_drive t)` are integrated
//! with classical RK4. Drift is superimposed on the output trajectory
//! (`θ + αt`, `θ' + βt`) and never fed back into the integrator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum PendulumError {
    #[error("invalid pendulum config: {0}")]
    InvalidConfig(String),
    #[error("integration diverged at t = {t}")]
    Diverged { t: f64 },
    #[error("slice [{start}, {end}) is out of range for a trajectory of {len} points")]
    SliceOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct PendulumConfig<T> {
    pub gamma: T,
    pub omega0: T,
    pub amplitude: T,
    pub omega_drive: T,
    pub alpha: T,
    pub beta: T,
    pub dt: T,
    pub t_end: T,
    pub theta0: T,
    pub thetadot0: T,
}

impl<T: Scalar> Default for PendulumConfig<T> {
    /// Driven, drifting configuration used for the illustrative phase plot.
    fn default() -> Self {
        Self {
            gamma: T::lit(0.2),
            omega0: T::lit(1.0),
            amplitude: T::lit(0.8),
            omega_drive: T::lit(1.2),
            alpha: T::lit(0.005),
            beta: T::lit(0.002),
            dt: T::lit(0.01),
            t_end: T::lit(200.0),
            theta0: T::lit(0.5),
            thetadot0: T::zero(),
        }
    }
}

impl<T: Scalar> PendulumConfig<T> {
    pub fn without_drift(mut self) -> Self {
        self.alpha = T::zero();
        self.beta = T::zero();
        self
    }

    pub fn validate(&self) -> Result<(), PendulumError> {
        let all = [
            self.gamma,
            self.omega0,
            self.amplitude,
            self.omega_drive,
            self.alpha,
            self.beta,
            self.dt,
            self.t_end,
            self.theta0,
            self.thetadot0,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(PendulumError::InvalidConfig(
                "all parameters must be finite".into(),
            ));
        }
        if !(self.dt > T::zero()) {
            return Err(PendulumError::InvalidConfig(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.t_end > self.dt) {
            return Err(PendulumError::InvalidConfig("t_end must exceed dt".into()));
        }
        if self.gamma < T::zero() {
            return Err(PendulumError::InvalidConfig(
                "gamma must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// `floor(t_end / dt) + 1`, tolerant to representation error in the ratio.
    pub fn n_points(&self) -> usize {
        let ratio = (self.t_end / self.dt).as_f64();
        (ratio + 1e-9).floor() as usize + 1
    }

    fn acceleration(&self, t: T, theta: T, omega: T) -> T {
        self.amplitude * (self.omega_drive * t).cos()
            - self.gamma * omega
            - self.omega0 * self.omega0 * theta.sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint<T> {
    pub t: T,
    pub theta: T,
    pub theta_dot: T,
}

/// Integrates the pendulum and returns `floor(t_end/dt) + 1` points.
pub fn simulate<T: Scalar>(
    config: &PendulumConfig<T>,
) -> Result<Vec<TrajectoryPoint<T>>, PendulumError> {
    config.validate()?;
    let n = config.n_points();
    let dt = config.dt;
    let half = T::lit(0.5);
    let sixth = T::one() / T::lit(6.0);
    let two = T::lit(2.0);
    let (mut theta, mut omega) = (config.theta0, config.thetadot0);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = dt * T::from_count(i);
        if !(theta.is_finite() && omega.is_finite()) {
            return Err(PendulumError::Diverged { t: t.as_f64() });
        }
        out.push(TrajectoryPoint {
            t,
            theta: theta + config.alpha * t,
            theta_dot: omega + config.beta * t,
        });
        if i + 1 == n {
            break;
        }
        let k1t = omega;
        let k1w = config.acceleration(t, theta, omega);
        let k2t = omega + half * dt * k1w;
        let k2w = config.acceleration(
            t + half * dt,
            theta + half * dt * k1t,
            omega + half * dt * k1w,
        );
        let k3t = omega + half * dt * k2w;
        let k3w = config.acceleration(
            t + half * dt,
            theta + half * dt * k2t,
            omega + half * dt * k2w,
        );
        let k4t = omega + dt * k3w;
        let k4w = config.acceleration(t + dt, theta + dt * k3t, omega + dt * k3w);
        theta += dt * sixth * (k1t + two * k2t + two * k3t + k4t);
        omega += dt * sixth * (k1w + two * k2w + two * k3w + k4w);
    }
    Ok(out)
}

/// `(θ, θ')` pairs of the index window `[start, end)`.
pub fn phase_slice<T: Scalar>(
    traj: &[TrajectoryPoint<T>],
    start: usize,
    end: usize,
) -> Result<Vec<[T; 2]>, PendulumError> {
    if start >= end || end > traj.len() {
        return Err(PendulumError::SliceOutOfRange {
            start,
            end,
            len: traj.len(),
        });
    }
    Ok(traj[start..end]
        .iter()
        .map(|p| [p.theta, p.theta_dot])
        .collect())
}

/// Conserved energy of the undamped, undriven pendulum.
pub fn energy<T: Scalar>(config: &PendulumConfig<T>, theta: T, theta_dot: T) -> T {
    T::lit(0.5) * theta_dot * theta_dot + config.omega0 * config.omega0 * (T::one() - theta.cos())
}
