//! Forecast quality metrics, downstream link-level rates, reference
//! baselines, and the evaluation protocol harnesses.
//!
//! All rate arithmetic is done in linear units; decibel quantities are
//! converted on entry through the helpers here (`x_dB = 10 log10(x)`,
//! `x_dBm = 10 log10(x / 1 mW)`, so dBm converts to milliwatts).

mod protocols;
mod report;

pub use protocols::{evaluate_dataset, run_protocol, EvalSummary, Protocol, ProtocolRunSpec};
pub use report::{published_reference_values, write_reports_jsonl, write_reports_tsv, MetricsReport};

use ndarray::{Array2, Array3};
use num_complex::Complex64;

use crate::datagen::steering_vector;
use crate::error::{Error, Result};
use crate::series::TimeSeriesWindow;

/// Converts a ratio in dB to linear scale.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Converts a linear ratio to dB.
pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// Converts a power in dBm to milliwatts.
pub fn dbm_to_milliwatts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

/// Downlink configuration for the channel-prediction downstream rate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownlinkConfig {
    /// Noise power, linear.
    pub noise_power: f64,
    /// The SNR the noise power was derived from (bookkeeping only).
    pub snr_db: f64,
}

impl Default for DownlinkConfig {
    /// 10 dB link SNR against unit-power channels.
    fn default() -> Self {
        Self::from_snr_db(10.0)
    }
}

impl DownlinkConfig {
    /// Noise power for a given link SNR assuming unit channel power.
    pub fn from_snr_db(snr_db: f64) -> Self {
        Self { noise_power: db_to_linear(-snr_db), snr_db }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_power > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise_power must be positive, got {}",
                self.noise_power
            )));
        }
        Ok(())
    }
}

/// Configuration of the beamforming downstream task.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IsacDownlinkConfig {
    pub num_users: usize,
    pub num_tx_antennas: usize,
    /// Reference path loss at `ref_distance_m`, dB (a negative ratio).
    pub pathloss_ref_db: f64,
    pub ref_distance_m: f64,
    pub pathloss_exp: f64,
    /// Per-user noise power, dBm.
    pub noise_dbm: f64,
    /// Total transmit power shared equally by the users, dBm.
    pub total_power_dbm: f64,
}

impl Default for IsacDownlinkConfig {
    /// K=8 users, 4096 antennas, -65 dB at 1 m with exponent 3, -80 dBm
    /// noise, 20 dBm total power.
    fn default() -> Self {
        Self {
            num_users: 8,
            num_tx_antennas: 4096,
            pathloss_ref_db: -65.0,
            ref_distance_m: 1.0,
            pathloss_exp: 3.0,
            noise_dbm: -80.0,
            total_power_dbm: 20.0,
        }
    }
}

impl IsacDownlinkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_tx_antennas == 0 {
            return Err(Error::InvalidArgument("users and antennas must be positive".into()));
        }
        if !(self.ref_distance_m > 0.0) {
            return Err(Error::InvalidArgument("ref_distance_m must be positive".into()));
        }
        Ok(())
    }

    /// Per-user transmit power, milliwatts: total power split equally.
    pub fn per_user_power_mw(&self) -> f64 {
        dbm_to_milliwatts(self.total_power_dbm) / self.num_users as f64
    }

    /// Noise power, milliwatts.
    pub fn noise_mw(&self) -> f64 {
        dbm_to_milliwatts(self.noise_dbm)
    }

    /// Linear path loss at a distance: `alpha_0 * (d / d_0)^(-zeta)`.
    pub fn pathloss_linear(&self, distance_m: f64) -> f64 {
        db_to_linear(self.pathloss_ref_db) * (distance_m / self.ref_distance_m).powf(-self.pathloss_exp)
    }
}

/// Pooled normalized mean squared error over the whole horizon:
/// `sum (pred - truth)^2 / sum truth^2` with all entries flattened.
pub fn nmse(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::InvalidArgument(format!(
            "nmse shapes differ: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let denom: f64 = truth.iter().map(|t| t * t).sum();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("nmse denominator: truth has zero norm".into()));
    }
    let num: f64 = pred.iter().zip(truth.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(num / denom)
}

/// Per-horizon-step NMSE: column `h` is normalized by that column's own
/// squared norm.
pub fn nmse_per_step(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<Vec<f64>> {
    if pred.dim() != truth.dim() {
        return Err(Error::InvalidArgument(format!(
            "nmse shapes differ: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let mut out = Vec::with_capacity(pred.ncols());
    for h in 0..pred.ncols() {
        let tc = truth.column(h);
        let pc = pred.column(h);
        let denom: f64 = tc.iter().map(|t| t * t).sum();
        if denom == 0.0 {
            return Err(Error::UndefinedMetric(format!(
                "nmse denominator: truth column {h} has zero norm"
            )));
        }
        let num: f64 = pc.iter().zip(tc.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
        out.push(num / denom);
    }
    Ok(out)
}

/// Reassembles complex CSI from a window's interleaved real layout.
///
/// Rows are ordered `2 (n C + c)` for the real part and `2 (n C + c) + 1`
/// for the imaginary part (antenna n, subcarrier c). The result is indexed
/// `(subcarrier, step, antenna)`.
pub fn csi_from_interleaved(values: &Array2<f64>, num_subcarriers: usize) -> Result<Array3<Complex64>> {
    let m = values.nrows();
    if num_subcarriers == 0 || m % (2 * num_subcarriers) != 0 {
        return Err(Error::InvalidArgument(format!(
            "{m} rows cannot split into complex pairs over {num_subcarriers} subcarriers"
        )));
    }
    let n_t = m / (2 * num_subcarriers);
    let steps = values.ncols();
    let mut out = Array3::zeros((num_subcarriers, steps, n_t));
    for n in 0..n_t {
        for c in 0..num_subcarriers {
            let row = 2 * (n * num_subcarriers + c);
            for t in 0..steps {
                out[[c, t, n]] = Complex64::new(values[[row, t]], values[[row + 1, t]]);
            }
        }
    }
    Ok(out)
}

/// Matched-filter downlink spectrum efficiency.
///
/// Per (subcarrier, slot), the beam is the predicted channel normalized to
/// unit norm, and the rate term is `log2(1 + |h^H w|^2 / noise)`. Returns
/// the average over all (subcarrier, slot) cells plus the count of cells
/// where the predicted channel was exactly zero (those use w = 0 and
/// contribute zero rate).
pub fn spectrum_efficiency_cp(
    pred_csi: &Array3<Complex64>,
    true_csi: &Array3<Complex64>,
    config: &DownlinkConfig,
) -> Result<(f64, usize)> {
    config.validate()?;
    if pred_csi.dim() != true_csi.dim() {
        return Err(Error::InvalidArgument(format!(
            "csi shapes differ: {:?} vs {:?}",
            pred_csi.dim(),
            true_csi.dim()
        )));
    }
    let (c_sub, steps, _n_t) = true_csi.dim();
    if c_sub == 0 || steps == 0 {
        return Err(Error::InvalidArgument("csi must be nonempty".into()));
    }
    let mut total = 0.0;
    let mut zero_beams = 0usize;
    for c in 0..c_sub {
        for t in 0..steps {
            let pred = pred_csi.slice(ndarray::s![c, t, ..]);
            let truth = true_csi.slice(ndarray::s![c, t, ..]);
            let norm = pred.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            if norm == 0.0 {
                zero_beams += 1;
                continue;
            }
            let dot: Complex64 =
                truth.iter().zip(pred.iter()).map(|(h, w)| h.conj() * w).sum();
            let gain = (dot / norm).norm_sqr();
            total += (1.0 + gain / config.noise_power).log2();
        }
    }
    Ok((total / (c_sub * steps) as f64, zero_beams))
}

/// Beamforming SNR for one user and slot (interference-free reduction):
/// `p * N_t * alpha(d) * |a^H(true) a(pred)|^2 / noise`.
pub fn isac_snr(
    pred_angle_rad: f64,
    true_angle_rad: f64,
    distance_m: f64,
    config: &IsacDownlinkConfig,
) -> Result<f64> {
    config.validate()?;
    if !(distance_m > 0.0) {
        return Err(Error::InvalidArgument(format!("distance must be positive, got {distance_m}")));
    }
    let n_t = config.num_tx_antennas;
    let a_true = steering_vector(true_angle_rad, n_t)?;
    let a_pred = steering_vector(pred_angle_rad, n_t)?;
    let dot: Complex64 = a_true.iter().zip(&a_pred).map(|(x, y)| x.conj() * y).sum();
    let alpha = config.pathloss_linear(distance_m);
    Ok(config.per_user_power_mw() * n_t as f64 * alpha * dot.norm_sqr() / config.noise_mw())
}

/// Unit-power beams toward predicted angles, scaled by the per-user power:
/// row k holds `sqrt(p) * a(pred_k)`.
pub fn beams_from_angles(
    pred_angles_rad: &[f64],
    config: &IsacDownlinkConfig,
) -> Result<Array2<Complex64>> {
    config.validate()?;
    let n_t = config.num_tx_antennas;
    let p_sqrt = config.per_user_power_mw().sqrt();
    let mut beams = Array2::zeros((pred_angles_rad.len(), n_t));
    for (k, &phi) in pred_angles_rad.iter().enumerate() {
        for (n, v) in steering_vector(phi, n_t)?.into_iter().enumerate() {
            beams[[k, n]] = v * p_sqrt;
        }
    }
    Ok(beams)
}

/// Exact interference-aware SINR per user.
///
/// With antenna gain squared `N_t` and path loss `alpha_k` at the user's
/// distance, user k receives
/// `N_t alpha_k |a^H(phi_k) w_k|^2 / (sum_{j != k} N_t alpha_k |a^H(phi_k) w_j|^2 + noise)`.
/// `beams` holds one beam per row, matching [`beams_from_angles`].
pub fn isac_sinr(
    true_angles_rad: &[f64],
    beams: &Array2<Complex64>,
    distances_m: &[f64],
    config: &IsacDownlinkConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let k_users = true_angles_rad.len();
    if beams.nrows() != k_users || distances_m.len() != k_users {
        return Err(Error::InvalidArgument(format!(
            "got {} angles, {} beams, {} distances; counts must match",
            k_users,
            beams.nrows(),
            distances_m.len()
        )));
    }
    if beams.ncols() != config.num_tx_antennas {
        return Err(Error::InvalidArgument(format!(
            "beams have {} antennas, config says {}",
            beams.ncols(),
            config.num_tx_antennas
        )));
    }
    let n_t = config.num_tx_antennas;
    let noise = config.noise_mw();
    let mut out = Vec::with_capacity(k_users);
    for k in 0..k_users {
        if !(distances_m[k] > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "distance for user {k} must be positive, got {}",
                distances_m[k]
            )));
        }
        let a_k = steering_vector(true_angles_rad[k], n_t)?;
        let alpha = config.pathloss_linear(distances_m[k]);
        let mut signal = 0.0;
        let mut interference = 0.0;
        for j in 0..k_users {
            let dot: Complex64 =
                a_k.iter().zip(beams.row(j).iter()).map(|(a, w)| a.conj() * w).sum();
            let power = n_t as f64 * alpha * dot.norm_sqr();
            if j == k {
                signal = power;
            } else {
                interference += power;
            }
        }
        out.push(signal / (interference + noise));
    }
    Ok(out)
}

/// Downlink sum spectrum efficiency under interference-free beamforming:
/// `(1/H) * sum_k sum_t log2(1 + SNR_{k,t})`. The division is by the slot
/// count only; users are summed, not averaged.
pub fn sum_rate_ap(
    pred_angles_rad: &Array2<f64>,
    true_angles_rad: &Array2<f64>,
    distances_m: &Array2<f64>,
    config: &IsacDownlinkConfig,
) -> Result<f64> {
    if pred_angles_rad.dim() != true_angles_rad.dim()
        || pred_angles_rad.dim() != distances_m.dim()
    {
        return Err(Error::InvalidArgument(format!(
            "angle and distance shapes differ: {:?}, {:?}, {:?}",
            pred_angles_rad.dim(),
            true_angles_rad.dim(),
            distances_m.dim()
        )));
    }
    let (k_users, steps) = pred_angles_rad.dim();
    if steps == 0 {
        return Err(Error::InvalidArgument("need at least one slot".into()));
    }
    let mut total = 0.0;
    for k in 0..k_users {
        for t in 0..steps {
            let snr = isac_snr(
                pred_angles_rad[[k, t]],
                true_angles_rad[[k, t]],
                distances_m[[k, t]],
                config,
            )?;
            total += (1.0 + snr).log2();
        }
    }
    Ok(total / steps as f64)
}

/// Repeats the last observed column over the horizon.
pub fn persistence_baseline(window: &TimeSeriesWindow, horizon: usize) -> Array2<f64> {
    let last = window.values.column(window.history_len() - 1);
    let mut out = Array2::zeros((window.num_variables(), horizon));
    for h in 0..horizon {
        out.column_mut(h).assign(&last);
    }
    out
}

/// Extrapolates the slope of the last two observed columns; falls back to
/// persistence when only one column exists.
pub fn linear_baseline(window: &TimeSeriesWindow, horizon: usize) -> Array2<f64> {
    let l = window.history_len();
    if l < 2 {
        return persistence_baseline(window, horizon);
    }
    let last = window.values.column(l - 1);
    let prev = window.values.column(l - 2);
    let mut out = Array2::zeros((window.num_variables(), horizon));
    for h in 0..horizon {
        for m in 0..window.num_variables() {
            out[[m, h]] = last[m] + (h as f64 + 1.0) * (last[m] - prev[m]);
        }
    }
    out
}
