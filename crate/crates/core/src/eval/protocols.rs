//! Evaluation protocol harnesses: component ablation, context-length sweep,
//! zero-shot task transfer, and depth sweep.
//!
//! Retraining protocols (ablation, zero-shot, layer sweep) train fresh
//! parameters per setting from the supplied training config, so settings
//! differ only in the toggled component. The context sweep evaluates one
//! already-trained parameter set at every admissible history length.

use ndarray::Array2;

use super::report::{published_reference_values, MetricsReport};
use super::{nmse, nmse_per_step, persistence_baseline};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelParams};
use crate::series::TaskTag;
use crate::training::{run_training, TrainConfig, TrainState};

/// Protocol selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Ablation,
    ContextSweep,
    ZeroShot,
    LayerSweep,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Ablation => "ablation",
            Protocol::ContextSweep => "context_sweep",
            Protocol::ZeroShot => "zero_shot",
            Protocol::LayerSweep => "layer_sweep",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablation" => Ok(Protocol::Ablation),
            "context_sweep" => Ok(Protocol::ContextSweep),
            "zero_shot" => Ok(Protocol::ZeroShot),
            "layer_sweep" => Ok(Protocol::LayerSweep),
            other => Err(Error::InvalidArgument(format!(
                "unknown protocol `{other}` (expected ablation, context_sweep, zero_shot, layer_sweep)"
            ))),
        }
    }
}

/// Everything a protocol run needs.
#[derive(Debug, Clone)]
pub struct ProtocolRunSpec {
    pub protocol: Protocol,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training corpora (unused by the context sweep).
    pub train_datasets: Vec<Dataset>,
    /// Evaluation corpora; one report row per (setting, dataset).
    pub eval_datasets: Vec<Dataset>,
    /// Trained parameters; required by the context sweep, ignored by the
    /// retraining protocols.
    pub params: Option<ModelParams>,
    pub config_hash: String,
    pub checkpoint_id: String,
}

/// Model quality on one dataset, averaged over windows.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    /// Mean over windows of each window's pooled NMSE.
    pub nmse: f64,
    /// Mean over windows of each window's per-step NMSE.
    pub nmse_per_step: Vec<f64>,
    /// Persistence forecast scored the same way.
    pub baseline_nmse: f64,
    pub windows: usize,
}

/// Scores a parameter set on a dataset in the original value domain.
///
/// Histories are truncated to `context_len` when given (windows shorter than
/// that stay whole). Predictions and targets pass through the inverse of the
/// dataset's stored transform before NMSE, and the reported value is the
/// mean of per-window NMSE ratios, which weights every window equally
/// regardless of its magnitude.
pub fn evaluate_dataset(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &Dataset,
    context_len: Option<usize>,
) -> Result<EvalSummary> {
    if dataset.windows.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset holds no windows".into()));
    }
    let mut pooled = 0.0;
    let mut per_step = vec![0.0; config.horizon];
    let mut baseline = 0.0;
    for window in &dataset.windows {
        let w = match context_len {
            Some(l) => window.truncate_history(l.min(window.history_len()))?,
            None => window.clone(),
        };
        let truth_stored = w.future.as_ref().ok_or_else(|| {
            Error::InvalidArgument("evaluation window lacks future targets".into())
        })?;
        if truth_stored.ncols() != config.horizon {
            return Err(Error::InvalidArgument(format!(
                "window horizon {} does not match configured {}",
                truth_stored.ncols(),
                config.horizon
            )));
        }
        let invert = |a: &Array2<f64>| a.mapv(|v| dataset.transform.invert_scalar(v));
        let truth = invert(truth_stored);
        let pred = invert(&forward(&w, params, config, None)?);
        pooled += nmse(&pred, &truth)?;
        for (i, v) in nmse_per_step(&pred, &truth)?.into_iter().enumerate() {
            per_step[i] += v;
        }
        baseline += nmse(&invert(&persistence_baseline(&w, config.horizon)), &truth)?;
    }
    let n = dataset.windows.len() as f64;
    for v in &mut per_step {
        *v /= n;
    }
    Ok(EvalSummary {
        nmse: pooled / n,
        nmse_per_step: per_step,
        baseline_nmse: baseline / n,
        windows: dataset.windows.len(),
    })
}

fn require_nonempty(datasets: &[Dataset], what: &str) -> Result<()> {
    if datasets.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} datasets are required")));
    }
    Ok(())
}

fn train_fresh(model: &ModelConfig, train: &TrainConfig, datasets: &[Dataset]) -> Result<ModelParams> {
    let mut state = TrainState::new(model, train)?;
    run_training(&mut state, datasets, train, model, train.steps, &mut |_, _| Ok(()))?;
    Ok(state.params)
}

fn report_row(
    spec: &ProtocolRunSpec,
    setting: &str,
    dataset: &Dataset,
    summary: &EvalSummary,
) -> MetricsReport {
    let mut r = MetricsReport::new(
        spec.protocol.as_str(),
        dataset.task.as_str(),
        setting,
        summary.nmse,
        summary.nmse_per_step.clone(),
    );
    r.baseline_nmse = Some(summary.baseline_nmse);
    r.config_hash = spec.config_hash.clone();
    r.seed = spec.train.seed;
    r.checkpoint_id = spec.checkpoint_id.clone();
    r.reference_values = published_reference_values();
    r
}

/// The ablation's four settings: the base model and one component removed
/// at a time. Removing patching sets patch length 1 and scales the patch
/// budget so the maximum history length is unchanged.
fn ablation_settings(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut no_pe = base.clone();
    no_pe.use_positional_encoding = false;
    let mut no_ge = base.clone();
    no_ge.use_granularity_encoding = false;
    let mut no_patch = base.clone();
    no_patch.max_patches = base.max_patches * base.patch_len;
    no_patch.patch_len = 1;
    vec![
        ("base".to_string(), base.clone()),
        ("no_positional_encoding".to_string(), no_pe),
        ("no_granularity_encoding".to_string(), no_ge),
        ("patch_len_1".to_string(), no_patch),
    ]
}

fn run_retraining_settings(
    spec: &ProtocolRunSpec,
    settings: &[(String, ModelConfig)],
) -> Result<Vec<MetricsReport>> {
    let mut reports = Vec::new();
    for (name, model) in settings {
        let params = train_fresh(model, &spec.train, &spec.train_datasets)?;
        for dataset in &spec.eval_datasets {
            let summary = evaluate_dataset(&params, model, dataset, None)?;
            reports.push(report_row(spec, name, dataset, &summary));
        }
    }
    Ok(reports)
}

fn run_ablation(spec: &ProtocolRunSpec) -> Result<Vec<MetricsReport>> {
    require_nonempty(&spec.train_datasets, "training")?;
    require_nonempty(&spec.eval_datasets, "evaluation")?;
    run_retraining_settings(spec, &ablation_settings(&spec.model))
}

fn run_layer_sweep(spec: &ProtocolRunSpec) -> Result<Vec<MetricsReport>> {
    require_nonempty(&spec.train_datasets, "training")?;
    require_nonempty(&spec.eval_datasets, "evaluation")?;
    let settings: Vec<(String, ModelConfig)> = [1usize, 2, 4, 8]
        .iter()
        .map(|&layers| {
            let mut m = spec.model.clone();
            m.num_layers = layers;
            (format!("layers={layers}"), m)
        })
        .collect();
    run_retraining_settings(spec, &settings)
}

fn run_zero_shot(spec: &ProtocolRunSpec) -> Result<Vec<MetricsReport>> {
    require_nonempty(&spec.eval_datasets, "evaluation")?;
    if !spec.eval_datasets.iter().all(|d| d.task == TaskTag::Delay) {
        return Err(Error::InvalidArgument(
            "zero-shot transfer evaluates on held-out delay datasets only".into(),
        ));
    }
    let subsets: [&[TaskTag]; 3] = [
        &[TaskTag::Channel],
        &[TaskTag::Channel, TaskTag::Angle],
        &[TaskTag::Channel, TaskTag::Angle, TaskTag::Traffic],
    ];
    // Fail before any compute if a subset cannot be assembled.
    for subset in &subsets {
        for tag in *subset {
            if !spec.train_datasets.iter().any(|d| d.task == *tag) {
                return Err(Error::InvalidArgument(format!(
                    "zero-shot transfer needs a {} training dataset",
                    tag.as_str()
                )));
            }
        }
    }
    let mut reports = Vec::new();
    for (i, subset) in subsets.iter().enumerate() {
        let train_data: Vec<Dataset> = spec
            .train_datasets
            .iter()
            .filter(|d| subset.contains(&d.task))
            .cloned()
            .collect();
        let params = train_fresh(&spec.model, &spec.train, &train_data)?;
        let setting = format!("{}-task", i + 1);
        for dataset in &spec.eval_datasets {
            let summary = evaluate_dataset(&params, &spec.model, dataset, None)?;
            reports.push(report_row(spec, &setting, dataset, &summary));
        }
    }
    Ok(reports)
}

fn run_context_sweep(spec: &ProtocolRunSpec) -> Result<Vec<MetricsReport>> {
    require_nonempty(&spec.eval_datasets, "evaluation")?;
    let params = spec.params.as_ref().ok_or_else(|| {
        Error::InvalidArgument("context sweep needs trained parameters (a checkpoint)".into())
    })?;
    let mut reports = Vec::new();
    for l in 1..=spec.model.max_history() {
        for dataset in &spec.eval_datasets {
            let summary = evaluate_dataset(params, &spec.model, dataset, Some(l))?;
            reports.push(report_row(spec, &format!("L={l}"), dataset, &summary));
        }
    }
    Ok(reports)
}

/// Runs a protocol and returns one report row per (setting, eval dataset).
pub fn run_protocol(spec: &ProtocolRunSpec) -> Result<Vec<MetricsReport>> {
    spec.model.validate()?;
    spec.train.validate()?;
    match spec.protocol {
        Protocol::Ablation => run_ablation(spec),
        Protocol::ContextSweep => run_context_sweep(spec),
        Protocol::ZeroShot => run_zero_shot(spec),
        Protocol::LayerSweep => run_layer_sweep(spec),
    }
}
