//! Sum-of-paths wireless channel generator.
//!
//! Replaces ray-tracing channel tooling with a statistically controlled
//! multipath model: each window draws a user speed and a set of propagation
//! paths (angles, delay, Doppler, complex gain), and the per-subcarrier
//! channel is the coherent sum of path contributions. The properties the
//! forecaster must learn survive: temporal coherence shrinks as speed grows,
//! and nearby subcarriers stay correlated through shared path delays.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::series::{TaskTag, TimeSeriesWindow, Transform};

/// Propagation speed used for Doppler shifts, meters per second.
const SPEED_OF_LIGHT_MS: f64 = 2.998e8;

/// Scenario preset for the channel generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelScenarioConfig {
    /// Horizontal elements of the uniform planar array.
    pub num_antennas_h: usize,
    /// Vertical elements of the uniform planar array.
    pub num_antennas_v: usize,
    pub num_subcarriers: usize,
    pub carrier_freq_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub num_paths: usize,
    /// User speed drawn uniformly from this range, km/h.
    pub speed_range_kmh: (f64, f64),
    pub delta_t_seconds: f64,
    /// Line-of-sight: the first path carries a fixed power fraction.
    pub los: bool,
    /// Linear power ratio of the direct path to the scattered paths.
    pub los_k_factor: f64,
    pub history_len: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for ChannelScenarioConfig {
    /// Desk-scale default: 2x2 array, 4 subcarriers, slot-level sampling.
    fn default() -> Self {
        Self {
            num_antennas_h: 2,
            num_antennas_v: 2,
            num_subcarriers: 4,
            carrier_freq_hz: 2.5e9,
            subcarrier_spacing_hz: 3750.0,
            num_paths: 8,
            speed_range_kmh: (0.0, 60.0),
            delta_t_seconds: 5e-4,
            los: false,
            los_k_factor: 10.0,
            history_len: 64,
            horizon: 4,
            seed: 0,
        }
    }
}

impl ChannelScenarioConfig {
    pub fn num_antennas(&self) -> usize {
        self.num_antennas_h * self.num_antennas_v
    }

    /// Real-valued variables per window: interleaved (real, imag) per
    /// antenna-subcarrier pair.
    pub fn num_variables(&self) -> usize {
        2 * self.num_antennas() * self.num_subcarriers
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_antennas() == 0 {
            return Err(Error::InvalidArgument("antenna grid must be nonempty".into()));
        }
        if self.num_subcarriers == 0 {
            return Err(Error::InvalidArgument("need at least one subcarrier".into()));
        }
        if self.num_paths == 0 {
            return Err(Error::InvalidArgument("need at least one path".into()));
        }
        let (lo, hi) = self.speed_range_kmh;
        if !(0.0 <= lo && lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "speed range must be ordered and nonnegative, got ({lo}, {hi})"
            )));
        }
        if !(self.delta_t_seconds > 0.0) {
            return Err(Error::InvalidArgument("delta_t_seconds must be positive".into()));
        }
        if !(self.carrier_freq_hz > 0.0) || !(self.subcarrier_spacing_hz > 0.0) {
            return Err(Error::InvalidArgument("frequencies must be positive".into()));
        }
        if self.history_len == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument("history and horizon must be positive".into()));
        }
        if self.los && !(self.los_k_factor > 0.0) {
            return Err(Error::InvalidArgument("los_k_factor must be positive".into()));
        }
        Ok(())
    }

    /// Named scenario presets: urban micro/macro and rural, each with and
    /// without a line of sight. Denser scatter uses more paths; the rural
    /// preset allows highway speeds.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let cfg = match name {
            "umi_los" => Self { num_paths: 6, los: true, los_k_factor: 10.0, speed_range_kmh: (0.0, 30.0), ..base },
            "umi_nlos" => Self { num_paths: 12, los: false, speed_range_kmh: (0.0, 30.0), ..base },
            "uma_los" => Self { num_paths: 8, los: true, los_k_factor: 6.0, speed_range_kmh: (0.0, 60.0), ..base },
            "uma_nlos" => Self { num_paths: 16, los: false, speed_range_kmh: (0.0, 60.0), ..base },
            "rma_los" => Self { num_paths: 4, los: true, los_k_factor: 12.0, speed_range_kmh: (30.0, 120.0), ..base },
            "rma_nlos" => Self { num_paths: 10, los: false, speed_range_kmh: (30.0, 120.0), ..base },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown channel preset `{other}` (expected umi_los, umi_nlos, uma_los, uma_nlos, rma_los, rma_nlos)"
                )))
            }
        };
        Ok(cfg)
    }
}

/// Uniform linear array steering vector:
/// `(1/sqrt(N)) * [1, e^{-j pi cos(phi)}, ..., e^{-j pi (N-1) cos(phi)}]`.
pub fn steering_vector(angle_rad: f64, num_antennas: usize) -> Result<Vec<Complex64>> {
    if num_antennas == 0 {
        return Err(Error::InvalidArgument("steering vector needs at least one antenna".into()));
    }
    let scale = 1.0 / (num_antennas as f64).sqrt();
    Ok((0..num_antennas)
        .map(|n| {
            let phase = -std::f64::consts::PI * n as f64 * angle_rad.cos();
            Complex64::from_polar(scale, phase)
        })
        .collect())
}

/// UPA response for one path; element (ih, iv) is indexed iv * N_h + ih.
fn upa_response(azimuth: f64, elevation: f64, n_h: usize, n_v: usize) -> Vec<Complex64> {
    let n_t = n_h * n_v;
    let scale = 1.0 / (n_t as f64).sqrt();
    let mut out = Vec::with_capacity(n_t);
    for iv in 0..n_v {
        for ih in 0..n_h {
            let phase = -std::f64::consts::PI
                * (ih as f64 * azimuth.cos() * elevation.sin() + iv as f64 * elevation.cos());
            out.push(Complex64::from_polar(scale, phase));
        }
    }
    out
}

struct Path {
    gain: Complex64,
    response: Vec<Complex64>,
    doppler_hz: f64,
    delay_s: f64,
}

/// Generates one window from an explicit seed.
///
/// Draw order per window: speed, then per path (azimuth, elevation, arrival
/// angle, delay, gain). Realized path powers are normalized so the window's
/// total path power is exactly one, and the finished window is rescaled so
/// its time-frequency mean power is exactly one, which keeps mean channel
/// power stable across seeds.
pub fn gen_channel_window(config: &ChannelScenarioConfig, seed: u64) -> Result<TimeSeriesWindow> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = config.speed_range_kmh;
    let speed_ms = rng.gen_range(lo..=hi) / 3.6;
    let n_t = config.num_antennas();
    let c_sub = config.num_subcarriers;
    // Delays spread phases across the band by at most a couple of cycles so
    // adjacent subcarriers stay correlated.
    let delay_spread = 2.0 / (c_sub as f64 * config.subcarrier_spacing_hz);

    let mut paths = Vec::with_capacity(config.num_paths);
    for p in 0..config.num_paths {
        let azimuth = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let elevation = rng.gen_range(0.0..std::f64::consts::PI);
        let arrival = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let delay_s = rng.gen_range(0.0..delay_spread);
        let gain = if config.los && p == 0 {
            let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            Complex64::from_polar((config.los_k_factor).sqrt(), phase)
        } else {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
        };
        let doppler_hz = speed_ms * config.carrier_freq_hz / SPEED_OF_LIGHT_MS * arrival.cos();
        paths.push(Path {
            gain,
            response: upa_response(azimuth, elevation, config.num_antennas_h, config.num_antennas_v),
            doppler_hz,
            delay_s,
        });
    }
    let total_power: f64 = paths.iter().map(|p| p.gain.norm_sqr()).sum();
    let norm = 1.0 / total_power.sqrt();
    for p in &mut paths {
        p.gain *= norm;
    }

    let steps = config.history_len + config.horizon;
    let m = config.num_variables();
    let mut all = Array2::zeros((m, steps));
    for t in 0..steps {
        let time_s = t as f64 * config.delta_t_seconds;
        for n in 0..n_t {
            for c in 0..c_sub {
                let f_offset = c as f64 * config.subcarrier_spacing_hz;
                let mut h = Complex64::new(0.0, 0.0);
                for path in &paths {
                    let phase = 2.0 * std::f64::consts::PI
                        * (path.doppler_hz * time_s - path.delay_s * f_offset);
                    h += path.gain * path.response[n] * Complex64::from_polar(1.0, phase);
                }
                let row = 2 * (n * c_sub + c);
                all[[row, t]] = h.re;
                all[[row + 1, t]] = h.im;
            }
        }
    }
    // Rescale so the realized mean power (summed over antennas, averaged over
    // subcarriers and time) is exactly one. Path interference makes the raw
    // mean fluctuate across seeds; this stands in for transmit power control
    // and is a pure scale, so the dynamics are untouched.
    let mean_power = all.iter().map(|v| v * v).sum::<f64>() / (steps * c_sub) as f64;
    if mean_power > 0.0 {
        all.mapv_inplace(|v| v / mean_power.sqrt());
    }
    let values = all.slice(ndarray::s![.., ..config.history_len]).to_owned();
    let future = all.slice(ndarray::s![.., config.history_len..]).to_owned();
    TimeSeriesWindow::new(values, Some(future), config.delta_t_seconds, TaskTag::Channel)
}

/// Generates one window from the config's own seed.
pub fn gen_channel_series(config: &ChannelScenarioConfig) -> Result<TimeSeriesWindow> {
    gen_channel_window(config, config.seed)
}

/// Generates `count` windows with per-window derived seeds.
pub fn gen_channel_dataset(config: &ChannelScenarioConfig, count: usize) -> Result<Dataset> {
    let windows = (0..count)
        .map(|i| gen_channel_window(config, derive_seed(config.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        task: TaskTag::Channel,
        windows,
        transform: Transform::Identity,
        delta_t_seconds: config.delta_t_seconds,
        config_hash: String::new(),
        seed: config.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steering_vector_flat_at_broadside_and_unit_norm() {
        let a = steering_vector(std::f64::consts::FRAC_PI_2, 4).unwrap();
        for v in &a {
            assert!((v - Complex64::new(0.5, 0.0)).norm() < 1e-12, "cos(pi/2)=0 flattens phases");
        }
        for &phi in &[0.1, 1.0, 2.5, -0.7] {
            let a = steering_vector(phi, 7).unwrap();
            let norm: f64 = a.iter().map(|v| v.norm_sqr()).sum();
            assert!((norm - 1.0).abs() < 1e-12, "steering vectors have unit norm");
        }
        assert!(steering_vector(0.0, 0).is_err());
    }

    #[test]
    fn steering_vectors_orthogonal_at_quarter_cycle_spacing() {
        // cos(pi/3) - cos(pi/2) = 1/2, so the inner product is a geometric
        // series over e^{-j pi n / 2}, which sums to zero for N = 4.
        let a = steering_vector(std::f64::consts::FRAC_PI_2, 4).unwrap();
        let b = steering_vector(std::f64::consts::FRAC_PI_3, 4).unwrap();
        let dot: Complex64 = a.iter().zip(&b).map(|(x, y)| x.conj() * y).sum();
        assert!(dot.norm() < 1e-12, "quarter-cycle spaced beams are orthogonal, got {dot}");
    }

    #[test]
    fn single_static_path_is_time_constant() {
        let config = ChannelScenarioConfig {
            num_paths: 1,
            speed_range_kmh: (0.0, 0.0),
            history_len: 8,
            horizon: 2,
            los: false,
            ..ChannelScenarioConfig::default()
        };
        let w = gen_channel_series(&config).unwrap();
        for row in w.values.rows() {
            for v in row.iter() {
                assert_eq!(*v, row[0], "zero Doppler must freeze the series");
            }
        }
    }

    #[test]
    fn full_array_geometry_yields_1536_variables() {
        let config = ChannelScenarioConfig {
            num_antennas_h: 4,
            num_antennas_v: 4,
            num_subcarriers: 48,
            history_len: 4,
            horizon: 2,
            ..ChannelScenarioConfig::default()
        };
        assert_eq!(config.num_variables(), 1536);
        let w = gen_channel_series(&config).unwrap();
        assert_eq!(w.num_variables(), 1536);
    }

    #[test]
    fn lag_one_autocorrelation_decays_with_speed() {
        let lag1 = |speed: f64, seed: u64| {
            let config = ChannelScenarioConfig {
                num_antennas_h: 1,
                num_antennas_v: 1,
                num_subcarriers: 1,
                speed_range_kmh: (speed, speed),
                history_len: 64,
                horizon: 1,
                seed,
                ..ChannelScenarioConfig::default()
            };
            let w = gen_channel_series(&config).unwrap();
            let x: Vec<f64> = w.values.row(0).to_vec();
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let var: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
            let cov: f64 = x.windows(2).map(|p| (p[0] - mean) * (p[1] - mean)).sum();
            if var == 0.0 {
                1.0
            } else {
                cov / var
            }
        };
        let mean_over_seeds = |speed: f64| {
            (0..100).map(|s| lag1(speed, s)).sum::<f64>() / 100.0
        };
        let slow = mean_over_seeds(10.0);
        let fast = mean_over_seeds(100.0);
        assert!(
            slow > fast,
            "coherence must shrink with speed: lag-1 at 10 km/h {slow}, at 100 km/h {fast}"
        );
    }

    #[test]
    fn mean_power_is_stable_across_seeds() {
        let mut powers = Vec::new();
        for seed in 0..10 {
            let config = ChannelScenarioConfig { seed, history_len: 32, horizon: 2, ..ChannelScenarioConfig::default() };
            let w = gen_channel_series(&config).unwrap();
            // Sum of squares over the interleaved (re, im) rows recovers
            // total complex power; average over time and subcarriers.
            let p: f64 = w.values.iter().map(|v| v * v).sum::<f64>()
                / (w.values.ncols() as f64 * config.num_subcarriers as f64);
            powers.push(p);
            assert!(w.values.iter().all(|v| v.is_finite()));
        }
        let mean = powers.iter().sum::<f64>() / powers.len() as f64;
        for p in powers {
            assert!(
                (p - mean).abs() / mean < 0.2,
                "per-seed mean power {p} strays more than 20% from {mean}"
            );
        }
    }

    #[test]
    fn generation_is_deterministic_and_presets_resolve() {
        let config = ChannelScenarioConfig::preset("uma_nlos").unwrap();
        let a = gen_channel_window(&config, 5).unwrap();
        let b = gen_channel_window(&config, 5).unwrap();
        assert_eq!(a.values, b.values, "equal seeds give equal windows");
        assert_ne!(
            gen_channel_window(&config, 6).unwrap().values,
            a.values,
            "different seeds give different windows"
        );
        for name in ["umi_los", "umi_nlos", "uma_los", "uma_nlos", "rma_los", "rma_nlos"] {
            ChannelScenarioConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ChannelScenarioConfig::preset("bogus").is_err());
    }
}
