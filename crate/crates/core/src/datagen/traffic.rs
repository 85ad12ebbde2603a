//! Hourly network traffic: a synthetic grid generator and CSV ingestion.
//!
//! The generator gives every grid cell a diurnal sinusoid with a random
//! phase, an optional weekly modulation, and multiplicative lognormal noise,
//! clamped to stay nonnegative. Ingestion aggregates raw rows onto an hourly
//! lattice per cell and cuts fixed-size windows.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::series::{TaskTag, TimeSeriesWindow, Transform};

/// History length of ingested traffic windows.
pub const INGEST_HISTORY_LEN: usize = 64;
/// Horizon of ingested traffic windows; also the window stride.
pub const INGEST_HORIZON: usize = 4;

/// Synthetic traffic generator configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    /// Grid dimensions; the window carries one variable per cell.
    pub grid_dims: (usize, usize),
    /// Steps per diurnal cycle (24 at one-hour sampling).
    pub daily_period_steps: usize,
    /// Amplitude of the weekly sinusoid relative to the base load.
    pub weekly_modulation: f64,
    /// Lognormal noise scale (sigma of the underlying normal).
    pub noise_std: f64,
    pub base_load: f64,
    pub delta_t_seconds: f64,
    pub history_len: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            grid_dims: (2, 2),
            daily_period_steps: 24,
            weekly_modulation: 0.2,
            noise_std: 0.1,
            base_load: 100.0,
            delta_t_seconds: 3600.0,
            history_len: 64,
            horizon: 4,
            seed: 0,
        }
    }
}

impl TrafficConfig {
    pub fn num_cells(&self) -> usize {
        self.grid_dims.0 * self.grid_dims.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_cells() == 0 {
            return Err(Error::InvalidArgument("grid must hold at least one cell".into()));
        }
        if self.daily_period_steps == 0 {
            return Err(Error::InvalidArgument("daily_period_steps must be positive".into()));
        }
        if !(self.base_load > 0.0) {
            return Err(Error::InvalidArgument("base_load must be positive".into()));
        }
        if self.weekly_modulation < 0.0 || self.noise_std < 0.0 {
            return Err(Error::InvalidArgument("modulation and noise must be nonnegative".into()));
        }
        if !(self.delta_t_seconds > 0.0) {
            return Err(Error::InvalidArgument("delta_t_seconds must be positive".into()));
        }
        if self.history_len == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument("history and horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Generates one window from an explicit seed.
///
/// Per cell (row-major over the grid), a derived rng draws the diurnal and
/// weekly phases, then one noise word per step. The periodic terms take
/// their argument from `t mod period`, so noise-free series repeat exactly.
/// Values are clamped at zero.
pub fn gen_traffic_window(config: &TrafficConfig, seed: u64) -> Result<TimeSeriesWindow> {
    config.validate()?;
    let steps = config.history_len + config.horizon;
    let cells = config.num_cells();
    let mut all = Array2::zeros((cells, steps));
    let daily = config.daily_period_steps;
    let weekly = daily * 7;
    for cell in 0..cells {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, cell as u64));
        let phase_d = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let phase_w = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        for t in 0..steps {
            let arg_d = 2.0 * std::f64::consts::PI * ((t % daily) as f64) / daily as f64;
            let arg_w = 2.0 * std::f64::consts::PI * ((t % weekly) as f64) / weekly as f64;
            let z: f64 = rng.sample(StandardNormal);
            let deterministic = config.base_load
                * (1.0
                    + 0.5 * (arg_d + phase_d).sin()
                    + config.weekly_modulation * (arg_w + phase_w).sin());
            let noise = config.base_load * ((config.noise_std * z).exp() - 1.0);
            all[[cell, t]] = (deterministic + noise).max(0.0);
        }
    }
    let values = all.slice(ndarray::s![.., ..config.history_len]).to_owned();
    let future = all.slice(ndarray::s![.., config.history_len..]).to_owned();
    TimeSeriesWindow::new(values, Some(future), config.delta_t_seconds, TaskTag::Traffic)
}

/// Generates one window from the config's own seed.
pub fn gen_traffic_series(config: &TrafficConfig) -> Result<TimeSeriesWindow> {
    gen_traffic_window(config, config.seed)
}

/// Generates `count` windows with per-window derived seeds.
pub fn gen_traffic_dataset(config: &TrafficConfig, count: usize) -> Result<Dataset> {
    let windows = (0..count)
        .map(|i| gen_traffic_window(config, derive_seed(config.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        task: TaskTag::Traffic,
        windows,
        transform: Transform::Identity,
        delta_t_seconds: config.delta_t_seconds,
        config_hash: String::new(),
        seed: config.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

/// Column layout of a delimited traffic file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvColumnMap {
    pub cell_id: usize,
    pub timestamp: usize,
    pub volume: usize,
    pub delimiter: char,
}

impl Default for CsvColumnMap {
    fn default() -> Self {
        Self { cell_id: 0, timestamp: 1, volume: 2, delimiter: '\t' }
    }
}

/// Outcome of CSV ingestion.
#[derive(Debug, Clone)]
pub struct IngestSummary {
    pub windows: Vec<TimeSeriesWindow>,
    /// Rows that failed to parse and were skipped.
    pub skipped_rows: usize,
    /// Candidate windows dropped for exceeding 10% missing hours.
    pub dropped_windows: usize,
    /// Distinct cells that contributed windows.
    pub cells: usize,
}

/// Timestamps may be epoch milliseconds, epoch seconds, or plain hour
/// indices; magnitude decides (>= 1e12 is ms, >= 1e9 is s).
fn hour_index(ts: i64) -> i64 {
    if ts.abs() >= 1_000_000_000_000 {
        ts.div_euclid(3_600_000)
    } else if ts.abs() >= 1_000_000_000 {
        ts.div_euclid(3600)
    } else {
        ts
    }
}

/// Ingests a delimited traffic file into fixed-size windows.
///
/// Rows are summed per (cell, hour). Each cell's hours form a contiguous
/// lattice from its first to its last hour; missing hours are forward-filled
/// (the leading gap takes the first observed value) but counted, and any
/// candidate window with more than 10% filled hours is dropped. Windows use
/// history 64 and horizon 4 with stride 4, one variable per cell, and at
/// most `grid_dims.0 * grid_dims.1` cells (in sorted cell-id order)
/// contribute. Unparseable rows are skipped and counted; an empty file
/// yields an empty result.
pub fn ingest_traffic_csv(
    path: &Path,
    columns: &CsvColumnMap,
    grid_dims: (usize, usize),
) -> Result<IngestSummary> {
    let max_cells = grid_dims.0 * grid_dims.1;
    if max_cells == 0 {
        return Err(Error::InvalidArgument("grid must hold at least one cell".into()));
    }
    let text = std::fs::read_to_string(path)?;
    let needed = columns.cell_id.max(columns.timestamp).max(columns.volume);
    let mut skipped = 0usize;
    let mut agg: BTreeMap<String, BTreeMap<i64, f64>> = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(columns.delimiter).collect();
        if fields.len() <= needed {
            skipped += 1;
            continue;
        }
        let cell = fields[columns.cell_id].trim();
        let ts = fields[columns.timestamp].trim().parse::<i64>();
        let vol = fields[columns.volume].trim().parse::<f64>();
        match (ts, vol) {
            (Ok(ts), Ok(vol)) if vol.is_finite() && !cell.is_empty() => {
                *agg.entry(cell.to_string()).or_default().entry(hour_index(ts)).or_insert(0.0) +=
                    vol;
            }
            _ => skipped += 1,
        }
    }
    let total = INGEST_HISTORY_LEN + INGEST_HORIZON;
    let max_missing = total / 10; // strictly more than 10% drops the window
    let mut windows = Vec::new();
    let mut dropped = 0usize;
    let mut cells_used = 0usize;
    for (_cell, hours) in agg.iter().take(max_cells) {
        let first = *hours.keys().next().expect("nonempty per-cell map");
        let last = *hours.keys().next_back().expect("nonempty per-cell map");
        let len = (last - first + 1) as usize;
        let mut series = Vec::with_capacity(len);
        let mut missing = Vec::with_capacity(len);
        let mut prev = *hours.values().next().expect("nonempty per-cell map");
        for h in first..=last {
            match hours.get(&h) {
                Some(&v) => {
                    prev = v;
                    series.push(v);
                    missing.push(false);
                }
                None => {
                    series.push(prev);
                    missing.push(true);
                }
            }
        }
        let mut contributed = false;
        let mut start = 0usize;
        while start + total <= len {
            let miss = missing[start..start + total].iter().filter(|&&m| m).count();
            if miss > max_missing {
                dropped += 1;
            } else {
                let hist = Array2::from_shape_vec(
                    (1, INGEST_HISTORY_LEN),
                    series[start..start + INGEST_HISTORY_LEN].to_vec(),
                )
                .expect("shape matches slice length");
                let fut = Array2::from_shape_vec(
                    (1, INGEST_HORIZON),
                    series[start + INGEST_HISTORY_LEN..start + total].to_vec(),
                )
                .expect("shape matches slice length");
                windows.push(TimeSeriesWindow::new(hist, Some(fut), 3600.0, TaskTag::Traffic)?);
                contributed = true;
            }
            start += INGEST_HORIZON;
        }
        if contributed {
            cells_used += 1;
        }
    }
    Ok(IngestSummary { windows, skipped_rows: skipped, dropped_windows: dropped, cells: cells_used })
}
