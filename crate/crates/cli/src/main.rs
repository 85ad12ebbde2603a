//! Batch command-line entry points: dataset generation, training,
//! evaluation, and report merging.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 io error,
//! 4 numeric failure (non-finite loss or undefined metric).

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use wavecast::checkpoint::{load_checkpoint, save_checkpoint};
use wavecast::datagen::{
    export_dataset, gen_angle_dataset, gen_channel_dataset, gen_traffic_dataset,
    import_dataset, ingest_traffic_csv, Dataset,
};
use wavecast::eval::{
    csi_from_interleaved, evaluate_dataset, published_reference_values, run_protocol,
    spectrum_efficiency_cp, write_reports_jsonl, write_reports_tsv, MetricsReport, Protocol,
    ProtocolRunSpec,
};
use wavecast::model::{forward, ModelConfig};
use wavecast::series::{TaskTag, Transform};
use wavecast::training::{
    append_step_record, load_resume, run_training, save_resume, StepRecord, TrainState,
};

use crate::config::{load_run_config, RunConfig};

#[derive(Parser)]
#[command(
    name = "wavecast",
    version,
    about = "Multi-task wireless time-series forecasting: generate data, train, evaluate, report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (or ingest a traffic file) and write it
    /// as a dataset file.
    Generate(GenerateArgs),
    /// Train a model on dataset files; writes a checkpoint, an optimizer
    /// resume file, and optional step metrics.
    Train(TrainArgs),
    /// Score a checkpoint on datasets, or run a full experiment protocol;
    /// writes metrics reports.
    Eval(EvalArgs),
    /// Merge metrics files into one plot-ready table plus a side-by-side
    /// summary.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GenTask {
    Channel,
    Angle,
    Delay,
    Traffic,
}

impl GenTask {
    fn name(self) -> &'static str {
        match self {
            GenTask::Channel => "channel",
            GenTask::Angle => "angle",
            GenTask::Delay => "delay",
            GenTask::Traffic => "traffic",
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Which series family to produce.
    #[arg(long, value_enum)]
    task: GenTask,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Run configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. --set data.channel.num_paths=4 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Number of windows to generate (ignored with --csv).
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Overrides the scenario's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Traffic only: ingest this delimited file instead of synthesizing.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-key override (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Training dataset file (repeatable).
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Where the final model checkpoint is written.
    #[arg(long)]
    checkpoint_out: PathBuf,
    /// Optimizer state from a previous run; training continues exactly
    /// where it stopped.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Where the optimizer state is written (default: <checkpoint-out>.resume).
    #[arg(long)]
    resume_out: Option<PathBuf>,
    /// Step metrics stream, one JSON record per step.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint; required for plain evaluation and the context sweep.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluation dataset file (repeatable).
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// plain (default), ablation, context-sweep, zero-shot, or layer-sweep.
    #[arg(long)]
    protocol: Option<String>,
    /// Training corpus for the retraining protocols (repeatable).
    #[arg(long = "train-data")]
    train_data: Vec<PathBuf>,
    /// Run configuration file; holds model/train settings for protocols.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Metrics output, one JSON record per report row.
    #[arg(long)]
    metrics_out: PathBuf,
    /// Optional plot-ready table (protocol, task, setting, step, value).
    #[arg(long)]
    tsv_out: Option<PathBuf>,
    /// Truncate each window's history to this length before scoring.
    #[arg(long)]
    context_len: Option<usize>,
    /// Also compute the matched-filter downlink rate on channel datasets.
    #[arg(long)]
    rates: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics file produced by eval or train (repeatable, at least one).
    #[arg(long = "metrics", required = true)]
    metrics: Vec<PathBuf>,
    /// Merged plot-ready table with a leading source column.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}

/// 2 usage/config, 3 io, 4 numeric; anything unclassified reads as config.
fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(e) = err.downcast_ref::<wavecast::Error>() {
        return match e {
            wavecast::Error::Io(_) => 3,
            wavecast::Error::NonFinite { .. } | wavecast::Error::UndefinedMetric(_) => 4,
            wavecast::Error::InvalidArgument(_) | wavecast::Error::Format { .. } => 2,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    2
}

fn code_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let (cfg, hash) = load_run_config(args.config.as_deref(), &args.set)?;
    let mut extra = serde_json::Map::new();
    let mut dataset = match args.task {
        GenTask::Channel => {
            let mut scenario = cfg.data.channel.clone();
            if let Some(seed) = args.seed {
                scenario.seed = seed;
            }
            gen_channel_dataset(&scenario, args.count)?
        }
        GenTask::Angle | GenTask::Delay => {
            let mut scenario = cfg.data.trajectory.clone();
            if let Some(seed) = args.seed {
                scenario.seed = seed;
            }
            let (angle, delay) = gen_angle_dataset(&scenario, args.count)?;
            if args.task == GenTask::Angle {
                angle
            } else {
                delay
            }
        }
        GenTask::Traffic => match &args.csv {
            Some(csv) => {
                let summary =
                    ingest_traffic_csv(csv, &cfg.data.csv_columns, cfg.data.traffic.grid_dims)?;
                extra.insert("skipped_rows".into(), summary.skipped_rows.into());
                extra.insert("dropped_windows".into(), summary.dropped_windows.into());
                extra.insert("cells".into(), summary.cells.into());
                Dataset {
                    task: TaskTag::Traffic,
                    windows: summary.windows,
                    transform: Transform::Identity,
                    delta_t_seconds: 3600.0,
                    config_hash: String::new(),
                    seed: cfg.data.traffic.seed,
                    code_version: code_version().to_string(),
                }
            }
            None => {
                let mut scenario = cfg.data.traffic.clone();
                if let Some(seed) = args.seed {
                    scenario.seed = seed;
                }
                gen_traffic_dataset(&scenario, args.count)?
            }
        },
    };
    dataset.config_hash = hash;
    if dataset.transform == Transform::Identity && cfg.data.transform != Transform::Identity {
        dataset = dataset.with_transform(cfg.data.transform);
    }
    export_dataset(&dataset, &args.out)?;

    let (m, l, h) = dataset_shape(&dataset, &cfg, args.task);
    let mut summary = serde_json::json!({
        "command": "generate",
        "task": args.task.name(),
        "path": args.out,
        "count": dataset.windows.len(),
        "num_variables": m,
        "history_len": l,
        "horizon": h,
        "delta_t_seconds": dataset.delta_t_seconds,
        "config_hash": dataset.config_hash,
        "seed": dataset.seed,
        "code_version": dataset.code_version,
    });
    summary.as_object_mut().expect("summary is an object").extend(extra);
    println!("{summary}");
    Ok(())
}

/// Window geometry from the data itself, falling back to the scenario
/// configuration when no windows were produced.
fn dataset_shape(dataset: &Dataset, cfg: &RunConfig, task: GenTask) -> (usize, usize, usize) {
    if let Some(w) = dataset.windows.first() {
        let h = w.future.as_ref().map_or(0, |f| f.ncols());
        return (w.num_variables(), w.history_len(), h);
    }
    match task {
        GenTask::Channel => {
            let c = &cfg.data.channel;
            (c.num_variables(), c.history_len, c.horizon)
        }
        GenTask::Angle | GenTask::Delay => {
            let t = &cfg.data.trajectory;
            (t.num_users, t.history_len, t.horizon)
        }
        GenTask::Traffic => {
            let t = &cfg.data.traffic;
            (t.num_cells(), t.history_len, t.horizon)
        }
    }
}

fn import_all(paths: &[PathBuf]) -> Result<Vec<Dataset>> {
    paths
        .iter()
        .map(|p| {
            import_dataset(p).with_context(|| format!("loading dataset {}", p.display()))
        })
        .collect()
}

/// Rejects datasets whose window geometry cannot feed the model, naming the
/// offending dimension.
fn check_train_shapes(paths: &[PathBuf], datasets: &[Dataset], model: &ModelConfig) -> Result<()> {
    for (path, ds) in paths.iter().zip(datasets) {
        let Some(w) = ds.windows.first() else {
            bail!(wavecast::Error::InvalidArgument(format!(
                "dataset {} holds no windows",
                path.display()
            )));
        };
        let h = w.future.as_ref().map_or(0, |f| f.ncols());
        if h != model.horizon {
            bail!(wavecast::Error::InvalidArgument(format!(
                "dataset {} horizon {h} does not match model horizon {}",
                path.display(),
                model.horizon
            )));
        }
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (cfg, hash) = load_run_config(Some(&args.config), &args.set)?;
    let datasets = import_all(&args.data)?;
    check_train_shapes(&args.data, &datasets, &cfg.model)?;

    let mut state = match &args.resume {
        Some(path) => {
            let (saved_model, state) = load_resume(path)?;
            if saved_model != cfg.model {
                bail!(wavecast::Error::InvalidArgument(format!(
                    "resume file was written for a different model: {}",
                    first_model_diff(&saved_model, &cfg.model)
                )));
            }
            state
        }
        None => TrainState::new(&cfg.model, &cfg.train)?,
    };

    let metrics_path = args
        .metrics_out
        .clone()
        .or_else(|| cfg.io.metrics_out.as_ref().map(PathBuf::from));
    let mut metrics_writer = match &metrics_path {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };

    let interval = cfg.train.checkpoint_interval;
    let model_for_cb = cfg.model.clone();
    let checkpoint_out = args.checkpoint_out.clone();
    let mut last: Option<StepRecord> = None;
    let mut on_step = |record: &StepRecord, state: &TrainState| -> wavecast::Result<()> {
        if let Some(w) = metrics_writer.as_mut() {
            append_step_record(w, record)?;
        }
        if let Some(k) = interval {
            if k > 0 && record.step % k == 0 {
                let path = numbered_checkpoint(&checkpoint_out, record.step);
                save_checkpoint(&path, &model_for_cb, &state.params)?;
            }
        }
        last = Some(record.clone());
        Ok(())
    };
    run_training(
        &mut state,
        &datasets,
        &cfg.train,
        &cfg.model,
        cfg.train.steps,
        &mut on_step,
    )?;
    if let Some(w) = metrics_writer.as_mut() {
        w.flush()?;
    }

    save_checkpoint(&args.checkpoint_out, &cfg.model, &state.params)?;
    let resume_out = args
        .resume_out
        .clone()
        .or_else(|| cfg.io.resume_out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| default_resume_path(&args.checkpoint_out));
    save_resume(&resume_out, &cfg.model, &state)?;

    let summary = serde_json::json!({
        "command": "train",
        "steps_run": cfg.train.steps,
        "total_steps": state.step,
        "final_loss": last.as_ref().map(|r| r.loss),
        "checkpoint": args.checkpoint_out,
        "resume": resume_out,
        "metrics": metrics_path,
        "config_hash": hash,
        "seed": cfg.train.seed,
        "code_version": code_version(),
    });
    println!("{summary}");
    Ok(())
}

fn numbered_checkpoint(base: &Path, step: u64) -> PathBuf {
    PathBuf::from(format!("{}.step{step}", base.display()))
}

fn default_resume_path(checkpoint: &Path) -> PathBuf {
    PathBuf::from(format!("{}.resume", checkpoint.display()))
}

/// Names the first field where two model configurations disagree.
fn first_model_diff(a: &ModelConfig, b: &ModelConfig) -> String {
    macro_rules! diff {
        ($($field:ident),+) => {
            $(if a.$field != b.$field {
                return format!("{} {:?} vs {:?}", stringify!($field), a.$field, b.$field);
            })+
        };
    }
    diff!(
        patch_len,
        latent_dim,
        num_layers,
        num_heads,
        head_key_dim,
        head_value_dim,
        ffn_hidden_dim,
        horizon,
        max_patches,
        embed_resnet_blocks,
        output_resnet_blocks,
        use_positional_encoding,
        use_granularity_encoding
    );
    "configurations are equal".to_string()
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (cfg, hash) = load_run_config(args.config.as_deref(), &args.set)?;
    let eval_datasets = import_all(&args.data)?;
    let protocol_name = args
        .protocol
        .clone()
        .unwrap_or_else(|| cfg.eval.protocol.clone())
        .replace('-', "_");

    let reports = if protocol_name == "plain" {
        let checkpoint = args.checkpoint.as_ref().ok_or_else(|| {
            anyhow!(wavecast::Error::InvalidArgument(
                "--checkpoint is required for plain evaluation".into()
            ))
        })?;
        let (model, params) = load_checkpoint(checkpoint)?;
        let checkpoint_id = file_stem(checkpoint);
        let context_len = args.context_len.or(cfg.eval.context_len);
        let mut reports = Vec::new();
        for ds in &eval_datasets {
            let summary = evaluate_dataset(&params, &model, ds, context_len)?;
            let mut report = MetricsReport::new(
                "eval",
                ds.task.as_str(),
                "model",
                summary.nmse,
                summary.nmse_per_step,
            );
            report.baseline_nmse = Some(summary.baseline_nmse);
            report.config_hash = hash.clone();
            report.seed = ds.seed;
            report.checkpoint_id = checkpoint_id.clone();
            report.reference_values = published_reference_values();
            if (args.rates || cfg.eval.compute_rates) && ds.task == TaskTag::Channel {
                let rate = downlink_rate(
                    &params,
                    &model,
                    ds,
                    cfg.data.channel.num_subcarriers,
                    &cfg.eval.downlink,
                )?;
                report.rate_cp = Some(rate);
            }
            reports.push(report);
        }
        reports
    } else {
        let protocol = Protocol::from_str(&protocol_name)?;
        let (params, checkpoint_id) = match &args.checkpoint {
            Some(path) => {
                let (model, params) = load_checkpoint(path)?;
                if model != cfg.model {
                    bail!(wavecast::Error::InvalidArgument(format!(
                        "checkpoint model differs from the run config: {}",
                        first_model_diff(&model, &cfg.model)
                    )));
                }
                (Some(params), file_stem(path))
            }
            None => (None, String::new()),
        };
        let spec = ProtocolRunSpec {
            protocol,
            model: cfg.model.clone(),
            train: cfg.train.clone(),
            train_datasets: import_all(&args.train_data)?,
            eval_datasets,
            params,
            config_hash: hash.clone(),
            checkpoint_id,
        };
        run_protocol(&spec)?
    };

    let mut jsonl = BufWriter::new(
        File::create(&args.metrics_out)
            .with_context(|| format!("creating {}", args.metrics_out.display()))?,
    );
    write_reports_jsonl(&reports, &mut jsonl)?;
    jsonl.flush()?;
    if let Some(tsv_path) = &args.tsv_out {
        let mut tsv = BufWriter::new(
            File::create(tsv_path).with_context(|| format!("creating {}", tsv_path.display()))?,
        );
        write_reports_tsv(&reports, &mut tsv)?;
        tsv.flush()?;
    }

    let summary = serde_json::json!({
        "command": "eval",
        "protocol": protocol_name,
        "reports": reports.len(),
        "metrics": args.metrics_out,
        "tsv": args.tsv_out,
        "config_hash": hash,
        "code_version": code_version(),
    });
    println!("{summary}");
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Matched-filter downlink rate of the model's forecasts against the true
/// future channel, averaged over windows.
fn downlink_rate(
    params: &wavecast::model::ModelParams,
    model: &ModelConfig,
    dataset: &Dataset,
    num_subcarriers: usize,
    downlink: &wavecast::eval::DownlinkConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for window in &dataset.windows {
        let Some(future) = window.future.as_ref() else {
            continue;
        };
        let prediction = forward(window, params, model, None)?;
        let pred_original = dataset.transform.invert(&prediction);
        let true_original = dataset.transform.invert(&future.to_owned());
        let pred_csi = csi_from_interleaved(&pred_original, num_subcarriers)?;
        let true_csi = csi_from_interleaved(&true_original, num_subcarriers)?;
        let (rate, _zero_beams) = spectrum_efficiency_cp(&pred_csi, &true_csi, downlink)?;
        total += rate;
        counted += 1;
    }
    if counted == 0 {
        bail!(wavecast::Error::InvalidArgument(
            "no windows with future targets to rate".into()
        ));
    }
    Ok(total / counted as f64)
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut entries: Vec<(String, MetricsReport)> = Vec::new();
    for path in &args.metrics {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let source = file_stem(path);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let report: MetricsReport = serde_json::from_str(line).map_err(|e| {
                anyhow!(wavecast::Error::Format {
                    message: format!("{} line {}: {e}", path.display(), i + 1),
                    offset: None,
                })
            })?;
            entries.push((source.clone(), report));
        }
    }
    if entries.is_empty() {
        bail!(wavecast::Error::InvalidArgument(
            "metrics files hold no records".into()
        ));
    }

    let hashes: BTreeSet<&str> = entries
        .iter()
        .map(|(_, r)| r.config_hash.as_str())
        .filter(|h| !h.is_empty())
        .collect();
    if hashes.len() > 1 {
        eprintln!(
            "warning: config hashes differ across inputs: {}",
            hashes.into_iter().collect::<Vec<_>>().join(", ")
        );
    }

    // Plot-ready table with a leading source column, deterministically
    // ordered. Step 0 is the pooled NMSE, steps 1..=H the per-step values;
    // rates and the persistence baseline become suffixed settings.
    let mut rows: Vec<(String, String, String, String, usize, f64)> = Vec::new();
    for (source, r) in &entries {
        rows.push((r.protocol.clone(), r.task.clone(), r.setting.clone(), source.clone(), 0, r.nmse));
        for (h, v) in r.nmse_per_step.iter().enumerate() {
            rows.push((r.protocol.clone(), r.task.clone(), r.setting.clone(), source.clone(), h + 1, *v));
        }
        if let Some(rate) = r.rate_cp {
            rows.push((r.protocol.clone(), r.task.clone(), format!("{}:rate_cp", r.setting), source.clone(), 0, rate));
        }
        if let Some(rate) = r.rate_ap {
            rows.push((r.protocol.clone(), r.task.clone(), format!("{}:rate_ap", r.setting), source.clone(), 0, rate));
        }
        if let Some(b) = r.baseline_nmse {
            rows.push((r.protocol.clone(), r.task.clone(), format!("{}:baseline", r.setting), source.clone(), 0, b));
        }
    }
    rows.sort_by(|a, b| {
        (&a.0, &a.1, &a.2, a.4, &a.3).cmp(&(&b.0, &b.1, &b.2, b.4, &b.3))
    });
    let mut out = BufWriter::new(
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?,
    );
    writeln!(out, "source\tprotocol\ttask\tsetting\tstep\tvalue")?;
    for (protocol, task, setting, source, step, value) in &rows {
        writeln!(out, "{source}\t{protocol}\t{task}\t{setting}\t{step}\t{value}")?;
    }
    out.flush()?;

    // Side-by-side pooled NMSE: one row per (protocol, task, setting), one
    // column per source.
    let sources: Vec<String> = {
        let set: BTreeSet<&String> = entries.iter().map(|(s, _)| s).collect();
        set.into_iter().cloned().collect()
    };
    let mut cells: BTreeMap<(String, String, String), BTreeMap<String, f64>> = BTreeMap::new();
    for (source, r) in &entries {
        cells
            .entry((r.protocol.clone(), r.task.clone(), r.setting.clone()))
            .or_default()
            .insert(source.clone(), r.nmse);
    }
    println!("{:<14} {:<10} {:<28} {}", "protocol", "task", "setting", sources.join("  "));
    for ((protocol, task, setting), by_source) in &cells {
        let values: Vec<String> = sources
            .iter()
            .map(|s| by_source.get(s).map_or("-".to_string(), |v| format!("{v:.6}")))
            .collect();
        println!("{protocol:<14} {task:<10} {setting:<28} {}", values.join("  "));
    }
    println!(
        "{}",
        serde_json::json!({
            "command": "report",
            "records": entries.len(),
            "summary_rows": cells.len(),
            "out": args.out,
        })
    );
    Ok(())
}
