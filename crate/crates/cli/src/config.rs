//! Run configuration: one TOML file per run plus dotted-key command-line
//! overrides, hashed so every output can name the exact configuration that
//! produced it.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wavecast::datagen::{ChannelScenarioConfig, CsvColumnMap, TrafficConfig, TrajectoryConfig};
use wavecast::eval::{DownlinkConfig, IsacDownlinkConfig};
use wavecast::model::ModelConfig;
use wavecast::series::Transform;
use wavecast::training::TrainConfig;

/// Everything a run can configure. Unknown keys are rejected so a typo in a
/// sweep script fails loudly instead of silently using a default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

/// Generator scenarios and ingestion layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub channel: ChannelScenarioConfig,
    pub trajectory: TrajectoryConfig,
    pub traffic: TrafficConfig,
    /// Value transform applied to generated datasets before export.
    pub transform: Transform,
    /// Column layout used when ingesting a delimited traffic file.
    pub csv_columns: CsvColumnMap,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            channel: ChannelScenarioConfig::default(),
            trajectory: TrajectoryConfig::default(),
            traffic: TrafficConfig::default(),
            transform: Transform::Identity,
            csv_columns: CsvColumnMap::default(),
        }
    }
}

/// Evaluation selection and downstream-rate parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// One of plain, ablation, context_sweep, zero_shot, layer_sweep.
    pub protocol: String,
    /// History truncation applied during plain evaluation.
    pub context_len: Option<usize>,
    /// Compute the matched-filter downlink rate on channel datasets.
    pub compute_rates: bool,
    pub downlink: DownlinkConfig,
    pub isac: IsacDownlinkConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: "plain".to_string(),
            context_len: None,
            compute_rates: false,
            downlink: DownlinkConfig::default(),
            isac: IsacDownlinkConfig::default(),
        }
    }
}

/// Fallback output paths used when the matching flags are absent.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    /// Step-metrics path for `train`.
    pub metrics_out: Option<String>,
    /// Optimizer-state path for `train`.
    pub resume_out: Option<String>,
}

/// Loads the config file (or starts from defaults), applies dotted-key
/// overrides, and returns the resolved config with its hash.
pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<(RunConfig, String)> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<toml::Table>()
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .context("resolving configuration")?;
    let hash = config_hash(&config)?;
    Ok((config, hash))
}

/// Inserts one `section.key=value` override, creating intermediate tables.
/// The value is parsed as a TOML literal and falls back to a string, so
/// `train.steps=10`, `model.use_positional_encoding=false`, and
/// `eval.protocol=ablation` all read naturally.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override `{spec}` must look like section.key=value");
    };
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        bail!("override key `{key}` has an empty path segment");
    }
    let mut current = table;
    for segment in &segments[..segments.len() - 1] {
        let entry = current
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = match entry.as_table_mut() {
            Some(t) => t,
            None => bail!("override `{key}` descends into a non-table value at `{segment}`"),
        };
    }
    current.insert(segments[segments.len() - 1].to_string(), parse_override_value(raw));
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    if let Ok(t) = doc.parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

/// Hex SHA-256 of the resolved config's canonical JSON serialization. Field
/// order is fixed by the struct definitions, so equal configs hash equally.
pub fn config_hash(config: &RunConfig) -> Result<String> {
    let text = serde_json::to_string(config).context("serializing resolved config")?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}
