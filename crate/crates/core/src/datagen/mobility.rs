//! 2-D user kinematics for the angle task and its zero-shot delay twin.
//!
//! Each user starts at a random position in an annulus around the base
//! station and integrates a velocity whose speed and heading receive
//! zero-mean perturbations. The emitted series are the azimuth angle seen
//! from the base station (unwrapped, so the model never sees jumps at the
//! branch cut) and the two-way propagation delay `2 d / c`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::series::{TaskTag, TimeSeriesWindow, Transform};

/// Speed of light for delay conversion, meters per second.
pub const SPEED_OF_LIGHT: f64 = 2.998e8;

/// Mobility class; fixes the admissible speed band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityMode {
    Pedestrian,
    Bicycle,
    Vehicle,
    RuralVehicle,
}

impl MobilityMode {
    /// Canonical speed band in km/h.
    pub fn speed_range_kmh(self) -> (f64, f64) {
        match self {
            MobilityMode::Pedestrian => (0.0, 10.0),
            MobilityMode::Bicycle => (10.0, 25.0),
            MobilityMode::Vehicle => (30.0, 80.0),
            MobilityMode::RuralVehicle => (80.0, 120.0),
        }
    }
}

impl std::str::FromStr for MobilityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pedestrian" => Ok(MobilityMode::Pedestrian),
            "bicycle" => Ok(MobilityMode::Bicycle),
            "vehicle" => Ok(MobilityMode::Vehicle),
            "rural_vehicle" => Ok(MobilityMode::RuralVehicle),
            other => Err(Error::InvalidArgument(format!("unknown mobility mode `{other}`"))),
        }
    }
}

/// Trajectory generator configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub mobility_mode: MobilityMode,
    /// Sampled speed band; must lie inside the mode's canonical band.
    pub speed_range_kmh: (f64, f64),
    /// Users are kept inside this distance annulus (meters) by reflection.
    pub distance_range_m: (f64, f64),
    /// Standard deviation of speed perturbation, m/s per second.
    pub accel_std: f64,
    /// Standard deviation of heading perturbation, rad per second.
    pub turn_rate_std: f64,
    pub delta_t_seconds: f64,
    pub num_users: usize,
    /// Observation noise added to the unwrapped angles, radians.
    pub angle_noise_std_rad: f64,
    pub history_len: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self::for_mode(MobilityMode::Vehicle)
    }
}

impl TrajectoryConfig {
    /// Preset for a mobility class with the canonical speed band.
    pub fn for_mode(mode: MobilityMode) -> Self {
        Self {
            mobility_mode: mode,
            speed_range_kmh: mode.speed_range_kmh(),
            distance_range_m: (5.0, 500.0),
            accel_std: 0.5,
            turn_rate_std: 0.2,
            delta_t_seconds: 0.5,
            num_users: 4,
            angle_noise_std_rad: 0.0,
            history_len: 64,
            horizon: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.speed_range_kmh;
        let (mlo, mhi) = self.mobility_mode.speed_range_kmh();
        if !(lo <= hi && lo >= mlo && hi <= mhi) {
            return Err(Error::InvalidArgument(format!(
                "speed range ({lo}, {hi}) must lie inside the {:?} band ({mlo}, {mhi})",
                self.mobility_mode
            )));
        }
        let (dlo, dhi) = self.distance_range_m;
        if !(0.0 < dlo && dlo < dhi) {
            return Err(Error::InvalidArgument(format!(
                "distance range must be ordered and positive, got ({dlo}, {dhi})"
            )));
        }
        if !(self.delta_t_seconds > 0.0) {
            return Err(Error::InvalidArgument("delta_t_seconds must be positive".into()));
        }
        if self.num_users == 0 {
            return Err(Error::InvalidArgument("need at least one user".into()));
        }
        if self.accel_std < 0.0 || self.turn_rate_std < 0.0 || self.angle_noise_std_rad < 0.0 {
            return Err(Error::InvalidArgument("noise magnitudes must be nonnegative".into()));
        }
        if self.history_len == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument("history and horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_to_pi(angle: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = angle.rem_euclid(two_pi);
    if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// Removes branch-cut jumps: each step moves by the minimal wrapped
/// difference, so consecutive values never jump by more than pi. Reversible
/// through [`wrap_to_pi`].
pub fn unwrap_angles(wrapped: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(wrapped.len());
    let (mut prev_in, mut acc) = match wrapped.first() {
        Some(&v) => (v, v),
        None => return out,
    };
    out.push(acc);
    for &w in &wrapped[1..] {
        // Differencing raw inputs keeps a repeated angle bitwise constant;
        // re-wrapping the accumulator would drift by one ulp per step.
        acc += wrap_to_pi(w - prev_in);
        prev_in = w;
        out.push(acc);
    }
    out
}

/// Kinematic state of one user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserState {
    pub position: (f64, f64),
    pub heading_rad: f64,
    pub speed_ms: f64,
}

/// Integrates one user for `steps` samples; returns wrapped azimuth angles
/// and distances, both evaluated before each move.
///
/// Per step, three standard normal draws perturb speed and heading and
/// supply angle observation noise (the draw happens even when the matching
/// std is zero, keeping the stream layout fixed). Speed is clamped to the
/// configured band; positions leaving the distance annulus are reflected
/// radially back inside.
pub fn simulate_user(
    init: &UserState,
    config: &TrajectoryConfig,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let (dlo, dhi) = config.distance_range_m;
    let (slo, shi) = config.speed_range_kmh;
    let (slo_ms, shi_ms) = (slo / 3.6, shi / 3.6);
    let dt = config.delta_t_seconds;
    let mut pos = init.position;
    let mut heading = init.heading_rad;
    let mut speed = init.speed_ms;
    let mut angles = Vec::with_capacity(steps);
    let mut dists = Vec::with_capacity(steps);
    for _ in 0..steps {
        angles.push(pos.1.atan2(pos.0));
        dists.push((pos.0 * pos.0 + pos.1 * pos.1).sqrt());
        let da: f64 = rng.sample(StandardNormal);
        let dh: f64 = rng.sample(StandardNormal);
        speed = (speed + da * config.accel_std * dt).clamp(slo_ms, shi_ms);
        heading += dh * config.turn_rate_std * dt;
        pos.0 += speed * dt * heading.cos();
        pos.1 += speed * dt * heading.sin();
        let d = (pos.0 * pos.0 + pos.1 * pos.1).sqrt();
        let reflected = if d > dhi {
            Some(2.0 * dhi - d)
        } else if d < dlo {
            Some(2.0 * dlo - d)
        } else {
            None
        };
        if let Some(new_d) = reflected {
            let new_d = new_d.clamp(dlo, dhi);
            let scale = if d > 0.0 { new_d / d } else { 1.0 };
            pos.0 *= scale;
            pos.1 *= scale;
        }
    }
    (angles, dists)
}

/// Generates one (angle window, delay window) pair from an explicit seed.
///
/// Draw order per user: initial distance, bearing, speed, heading, then the
/// per-step perturbations of [`simulate_user`], then one observation noise
/// draw per step.
pub fn gen_angle_window(
    config: &TrajectoryConfig,
    seed: u64,
) -> Result<(TimeSeriesWindow, TimeSeriesWindow)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = config.history_len + config.horizon;
    let k = config.num_users;
    let mut angle_all = Array2::zeros((k, steps));
    let mut delay_all = Array2::zeros((k, steps));
    let (dlo, dhi) = config.distance_range_m;
    let (slo, shi) = config.speed_range_kmh;
    for u in 0..k {
        let d0 = rng.gen_range(dlo..=dhi);
        let bearing = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let speed_ms = rng.gen_range(slo..=shi) / 3.6;
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let init = UserState {
            position: (d0 * bearing.cos(), d0 * bearing.sin()),
            heading_rad: heading,
            speed_ms,
        };
        let (wrapped, dists) = simulate_user(&init, config, steps, &mut rng);
        let mut unwrapped = unwrap_angles(&wrapped);
        for a in &mut unwrapped {
            let noise: f64 = rng.sample(StandardNormal);
            *a += noise * config.angle_noise_std_rad;
        }
        for t in 0..steps {
            angle_all[[u, t]] = unwrapped[t];
            delay_all[[u, t]] = 2.0 * dists[t] / SPEED_OF_LIGHT;
        }
    }
    let split = |all: &Array2<f64>, tag| {
        let values = all.slice(ndarray::s![.., ..config.history_len]).to_owned();
        let future = all.slice(ndarray::s![.., config.history_len..]).to_owned();
        TimeSeriesWindow::new(values, Some(future), config.delta_t_seconds, tag)
    };
    Ok((split(&angle_all, TaskTag::Angle)?, split(&delay_all, TaskTag::Delay)?))
}

/// Generates one window pair from the config's own seed.
pub fn gen_angle_series(config: &TrajectoryConfig) -> Result<(TimeSeriesWindow, TimeSeriesWindow)> {
    gen_angle_window(config, config.seed)
}

/// Generates `count` window pairs with per-window derived seeds; returns the
/// angle dataset and the parallel delay dataset.
pub fn gen_angle_dataset(config: &TrajectoryConfig, count: usize) -> Result<(Dataset, Dataset)> {
    let mut angles = Vec::with_capacity(count);
    let mut delays = Vec::with_capacity(count);
    for i in 0..count {
        let (a, d) = gen_angle_window(config, derive_seed(config.seed, i as u64))?;
        angles.push(a);
        delays.push(d);
    }
    let dataset = |task, windows| Dataset {
        task,
        windows,
        transform: Transform::Identity,
        delta_t_seconds: config.delta_t_seconds,
        config_hash: String::new(),
        seed: config.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok((dataset(TaskTag::Angle, angles), dataset(TaskTag::Delay, delays)))
}
