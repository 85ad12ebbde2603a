//! Synthetic data generation for the four forecasting tasks, plus CSV
//! ingestion of real hourly traffic and a binary dataset file format.
//!
//! Every generator is a pure function of (config, seed). Multi-window
//! datasets derive one seed per window as `base XOR splitmix64(index)`, so
//! windows are independent and any subset can be regenerated in isolation.

mod channel;
mod io;
mod mobility;
mod traffic;

pub use channel::{gen_channel_dataset, gen_channel_series, gen_channel_window, steering_vector, ChannelScenarioConfig};
pub use io::{export_dataset, import_dataset};
pub use mobility::{
    gen_angle_dataset, gen_angle_series, gen_angle_window, simulate_user, unwrap_angles,
    wrap_to_pi, MobilityMode, TrajectoryConfig, UserState, SPEED_OF_LIGHT,
};
pub use traffic::{
    gen_traffic_dataset, gen_traffic_series, gen_traffic_window, ingest_traffic_csv,
    CsvColumnMap, IngestSummary, TrafficConfig, INGEST_HISTORY_LEN, INGEST_HORIZON,
};

use crate::series::{TaskTag, TimeSeriesWindow, Transform};

/// A homogeneous collection of windows from one task, with the provenance
/// fields the file format persists.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskTag,
    pub windows: Vec<TimeSeriesWindow>,
    /// Value transform the windows are stored under (applied before export).
    pub transform: Transform,
    pub delta_t_seconds: f64,
    /// Hash of the generating configuration (hex, empty when unknown).
    pub config_hash: String,
    /// Base seed the per-window seeds derive from.
    pub seed: u64,
    /// Version of the code that produced the data (empty when unknown).
    pub code_version: String,
}

impl Dataset {
    /// Applies `transform` elementwise to every window (history and future)
    /// and records it, so NMSE can be computed in the original domain later.
    pub fn with_transform(mut self, transform: Transform) -> Self {
        for w in &mut self.windows {
            w.values.mapv_inplace(|v| transform.apply_scalar(v));
            if let Some(f) = &mut w.future {
                f.mapv_inplace(|v| transform.apply_scalar(v));
            }
        }
        self.transform = transform;
        self
    }
}

/// SplitMix64 finalizer; spreads window indices into independent seed words.
pub(crate) fn splitmix64(index: u64) -> u64 {
    let mut z = index.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for window `index` of a dataset with base seed `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    base ^ splitmix64(index)
}
