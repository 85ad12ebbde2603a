//! Metrics report records and their two serialized forms: one JSON object
//! per line for machine consumption, and a delimited table with columns
//! (protocol, task, setting, step, value) for plotting.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};

/// One evaluation cell: a protocol setting applied to one task's data.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub task: String,
    /// Protocol-specific setting label (toggle name, context length, task
    /// subset, or layer count).
    pub setting: String,
    /// Pooled NMSE over the horizon.
    pub nmse: f64,
    /// NMSE per horizon step, each step normalized separately.
    pub nmse_per_step: Vec<f64>,
    /// Matched-filter downlink rate, bps/Hz, when computed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rate_cp: Option<f64>,
    /// Beamforming sum rate, bps/Hz, when computed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rate_ap: Option<f64>,
    /// Persistence-forecast NMSE on the same data, for reference.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline_nmse: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint_id: String,
    /// Published reference magnitudes; informational only, never asserted.
    #[serde(default)]
    pub reference_values: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn new(protocol: &str, task: &str, setting: &str, nmse: f64, per_step: Vec<f64>) -> Self {
        Self {
            protocol: protocol.to_string(),
            task: task.to_string(),
            setting: setting.to_string(),
            nmse,
            nmse_per_step: per_step,
            rate_cp: None,
            rate_ap: None,
            baseline_nmse: None,
            config_hash: String::new(),
            seed: 0,
            checkpoint_id: String::new(),
            reference_values: BTreeMap::new(),
        }
    }
}

/// Published magnitudes from the source experiments, keyed descriptively.
/// They come from different data at a different scale and exist only as
/// context in reports.
pub fn published_reference_values() -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("published_ablation_base_nmse".to_string(), 0.00823),
        ("published_channel_se_bps_hz".to_string(), 6.8701),
        ("published_isac_sum_rate_bps_hz".to_string(), 33.88),
        ("published_isac_sum_rate_max_bps_hz".to_string(), 54.67),
    ])
}

/// Writes one JSON object per line.
pub fn write_reports_jsonl(reports: &[MetricsReport], w: &mut dyn Write) -> Result<()> {
    for r in reports {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::InvalidArgument(format!("report serialization failed: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Writes the plot table: tab-separated columns (protocol, task, setting,
/// step, value). Step 0 carries the pooled NMSE; steps 1..=H carry the
/// per-step NMSE. Downstream rates, when present, appear as extra rows with
/// ":rate_cp" / ":rate_ap" appended to the setting, and the persistence
/// reference as ":baseline".
pub fn write_reports_tsv(reports: &[MetricsReport], w: &mut dyn Write) -> Result<()> {
    writeln!(w, "protocol\ttask\tsetting\tstep\tvalue")?;
    for r in reports {
        writeln!(w, "{}\t{}\t{}\t0\t{}", r.protocol, r.task, r.setting, r.nmse)?;
        for (h, v) in r.nmse_per_step.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}\t{}", r.protocol, r.task, r.setting, h + 1, v)?;
        }
        if let Some(rate) = r.rate_cp {
            writeln!(w, "{}\t{}\t{}:rate_cp\t0\t{rate}", r.protocol, r.task, r.setting)?;
        }
        if let Some(rate) = r.rate_ap {
            writeln!(w, "{}\t{}\t{}:rate_ap\t0\t{rate}", r.protocol, r.task, r.setting)?;
        }
        if let Some(b) = r.baseline_nmse {
            writeln!(w, "{}\t{}\t{}:baseline\t0\t{b}", r.protocol, r.task, r.setting)?;
        }
    }
    Ok(())
}
