//! Gradient-based optimization: loss, reverse-mode gradients, Adam updates,
//! batch construction over mixed task corpora, and resumable run state.
//!
//! Losses are computed in normalized space: each variable's future targets
//! are scaled with the statistics of its own (masked) history, which puts
//! every task on the same footing inside mixed batches. Gradients flow
//! through the same tape graph that training uses, so finite-difference
//! checks verify exactly the optimized function.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_chunk_graph, insert_params, ModelConfig, ModelParams};
use crate::series::{
    classify_granularity, mask_prefix_len, num_patches, prepare_variable, sample_training_mask,
    PatchGrid, TimeSeriesWindow, NORM_EPSILON,
};
use crate::tape::Tape;

/// Variables processed per tape graph; variables of one window are stacked in
/// groups of this many rows with a block-diagonal attention mask.
pub const TRAIN_CHUNK_VARS: usize = 8;

/// Optimizer selector (Adam is the only implemented choice).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

/// One entry of the task sampling mix.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMixEntry {
    /// Task tag of the datasets this entry draws from.
    pub task: String,
    pub weight: f64,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Sampling weights over task tags; empty means "uniform over the tags
    /// present in the supplied datasets".
    pub task_mix: Vec<TaskMixEntry>,
    pub optimizer: OptimizerKind,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub grad_clip_norm: Option<f64>,
    /// Steps between periodic checkpoints (none if absent).
    pub checkpoint_interval: Option<u64>,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: batch 64, learning rate 1e-4, Adam (0.9, 0.999).
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            steps: 1000,
            seed: 0,
            task_mix: Vec::new(),
            optimizer: OptimizerKind::Adam,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            grad_clip_norm: None,
            checkpoint_interval: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::InvalidArgument(format!(
                "adam betas must lie in [0, 1), got ({b1}, {b2})"
            )));
        }
        if !self.task_mix.is_empty() {
            let total: f64 = self.task_mix.iter().map(|e| e.weight).sum();
            if !(total > 0.0) || self.task_mix.iter().any(|e| e.weight < 0.0) {
                return Err(Error::InvalidArgument(
                    "task mix weights must be nonnegative with a positive sum".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Adam moment estimates; shapes mirror the parameters exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: BTreeMap<String, Array2<f64>>,
    pub second_moment: BTreeMap<String, Array2<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |src: &BTreeMap<String, Array2<f64>>| {
            src.iter().map(|(k, v)| (k.clone(), Array2::zeros(v.dim()))).collect()
        };
        Self {
            first_moment: zeros(params.arrays()),
            second_moment: zeros(params.arrays()),
            step: 0,
        }
    }
}

/// Mean squared error over all entries: `(1 / (M * H)) * sum (pred - target)^2`.
pub fn mse_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::InvalidArgument(format!(
            "mse shapes differ: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Prepares one window for training: per-variable patch grids (masked with
/// prefix `mask_prefix`) and the matching normalized targets.
///
/// A variable whose visible history is degenerate (standard deviation at the
/// clamp, e.g. a single visible sample) carries no scale information, so its
/// normalized target is set to zero: the model is pulled toward predicting
/// the visible mean, which denormalization turns into a persistence-style
/// forecast.
pub fn prepare_window(
    window: &TimeSeriesWindow,
    config: &ModelConfig,
    mask_prefix: usize,
) -> Result<(Vec<PatchGrid>, Array2<f64>)> {
    let future = window.future.as_ref().ok_or_else(|| {
        Error::InvalidArgument("training window lacks future targets".into())
    })?;
    if future.ncols() != config.horizon {
        return Err(Error::InvalidArgument(format!(
            "window horizon {} does not match configured {}",
            future.ncols(),
            config.horizon
        )));
    }
    if window.history_len() > config.max_history() {
        return Err(Error::InvalidArgument(format!(
            "history length {} exceeds the configured maximum {}",
            window.history_len(),
            config.max_history()
        )));
    }
    let granularity = classify_granularity(window.delta_t_seconds)?;
    let m = window.num_variables();
    let mut grids = Vec::with_capacity(m);
    let mut targets = Array2::zeros((m, config.horizon));
    for (idx, row) in window.values.rows().into_iter().enumerate() {
        let grid = prepare_variable(row, config.patch_len, mask_prefix, granularity)?;
        if grid.stats.std > NORM_EPSILON {
            for (j, t) in future.row(idx).iter().enumerate() {
                targets[[idx, j]] = (t - grid.stats.mean) / grid.stats.std;
            }
        }
        grids.push(grid);
    }
    Ok((grids, targets))
}

fn window_loss_impl(
    window: &TimeSeriesWindow,
    params: &ModelParams,
    config: &ModelConfig,
    mask_prefix: usize,
    want_grads: bool,
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    let (grids, targets) = prepare_window(window, config, mask_prefix)?;
    let m = grids.len();
    let norm = 1.0 / (m * config.horizon) as f64;
    let mut loss = 0.0;
    let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for (chunk_idx, chunk) in grids.chunks(TRAIN_CHUNK_VARS).enumerate() {
        let row0 = chunk_idx * TRAIN_CHUNK_VARS;
        let mut tape = Tape::new();
        let tp = insert_params(&mut tape, params);
        let pred = build_chunk_graph(&mut tape, &tp, chunk, config)?;
        let tgt = targets.slice(ndarray::s![row0..row0 + chunk.len(), ..]).to_owned();
        let sse = tape.sse_against(pred, tgt);
        loss += tape.value(sse)[[0, 0]] * norm;
        if want_grads {
            for (name, g) in tape.backward(sse, norm)? {
                match grads.entry(name) {
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                    std::collections::btree_map::Entry::Occupied(mut e) => {
                        *e.get_mut() += &g;
                    }
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite { parameter: "loss".into() });
    }
    Ok((loss, grads))
}

/// Normalized-space MSE of one window under the given training mask; the
/// exact scalar that [`backward`] differentiates.
pub fn window_loss(
    window: &TimeSeriesWindow,
    params: &ModelParams,
    config: &ModelConfig,
    mask_prefix: usize,
) -> Result<f64> {
    window_loss_impl(window, params, config, mask_prefix, false).map(|(l, _)| l)
}

/// Reverse-mode gradients of `mse_loss(forward(window))` with respect to
/// every parameter, plus the loss value.
pub fn backward(
    window: &TimeSeriesWindow,
    params: &ModelParams,
    config: &ModelConfig,
    mask_prefix: usize,
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    window_loss_impl(window, params, config, mask_prefix, true)
}

/// Scales gradients in place so their global 2-norm is at most `clip`;
/// returns the pre-clip norm.
pub fn clip_gradients(grads: &mut BTreeMap<String, Array2<f64>>, clip: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// One Adam update with bias correction, applied in canonical name order.
pub fn adam_update(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Array2<f64>>,
    opt: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    let (b1, b2) = config.adam_betas;
    opt.step += 1;
    let t = opt.step as i32;
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let names: Vec<String> = params.arrays().keys().cloned().collect();
    for name in names {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient missing for `{name}`")))?;
        let m = opt
            .first_moment
            .get_mut(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("optimizer state missing `{name}`")))?;
        let v = opt
            .second_moment
            .get_mut(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("optimizer state missing `{name}`")))?;
        ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
        ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        let arr = params.get_mut(&name)?;
        ndarray::Zip::from(arr).and(&*m).and(&*v).for_each(|p, &m, &v| {
            let mhat = m / bias1;
            let vhat = v / bias2;
            *p -= config.learning_rate * mhat / (vhat.sqrt() + config.adam_eps);
        });
    }
    Ok(())
}

/// One optimization step over a batch of windows.
///
/// Per sample, a fresh training mask is drawn from `rng` (uniform prefix
/// length over `0..patch_len`), gradients of the per-window normalized MSE
/// are averaged, optionally clipped, and applied with Adam. Returns the batch
/// loss of the pre-step parameters. Deterministic given the rng state.
pub fn train_step(
    batch: &[TimeSeriesWindow],
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    config: &TrainConfig,
    model_config: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must be nonempty".into()));
    }
    let mut total_loss = 0.0;
    let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for window in batch {
        let n_p = num_patches(window.history_len(), model_config.patch_len);
        let mask = sample_training_mask(n_p, model_config.patch_len, rng);
        let r = mask_prefix_len(&mask);
        let (loss, g) = backward(window, params, model_config, r)?;
        total_loss += loss;
        for (name, delta) in g {
            match grads.entry(name) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(delta);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    *e.get_mut() += &delta;
                }
            }
        }
    }
    let b = batch.len() as f64;
    total_loss /= b;
    for g in grads.values_mut() {
        g.mapv_inplace(|v| v / b);
    }
    if let Some(clip) = config.grad_clip_norm {
        clip_gradients(&mut grads, clip);
    }
    for (name, g) in &grads {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { parameter: name.clone() });
        }
    }
    adam_update(params, &grads, opt, config)?;
    Ok(total_loss)
}

/// Samples a training batch from mixed task datasets.
///
/// Tasks are drawn per `task_mix` weights (normalized); within a task, a
/// dataset and then a window are drawn uniformly. Each sample draws a patch
/// count uniformly over `patch_range` (clamped to what the window supports)
/// and truncates the history to that many patches, so every admissible input
/// length is exercised during training.
pub fn build_batch(
    datasets: &[Dataset],
    task_mix: &[TaskMixEntry],
    patch_range: (usize, usize),
    patch_len: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TimeSeriesWindow>> {
    if datasets.is_empty() {
        return Err(Error::InvalidArgument("no datasets supplied".into()));
    }
    if datasets.iter().any(|d| d.windows.is_empty()) {
        return Err(Error::InvalidArgument("a supplied dataset holds no windows".into()));
    }
    // Resolve the mix: explicit entries, or uniform over the present tags.
    let mix: Vec<(String, f64)> = if task_mix.is_empty() {
        let mut tags: Vec<String> = datasets.iter().map(|d| d.task.to_string()).collect();
        tags.sort();
        tags.dedup();
        let w = 1.0 / tags.len() as f64;
        tags.into_iter().map(|t| (t, w)).collect()
    } else {
        let total: f64 = task_mix.iter().map(|e| e.weight).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument("task mix weights sum to zero".into()));
        }
        task_mix.iter().map(|e| (e.task.clone(), e.weight / total)).collect()
    };
    // Index datasets per tag, in supplied order.
    let mut per_tag: BTreeMap<&str, Vec<&Dataset>> = BTreeMap::new();
    for d in datasets {
        per_tag.entry(d.task.as_str()).or_default().push(d);
    }
    for (tag, _) in &mix {
        if !per_tag.contains_key(tag.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "task mix references `{tag}` but no dataset carries that tag"
            )));
        }
    }

    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = mix.last().expect("mix nonempty").0.as_str();
        for (tag, w) in &mix {
            acc += w;
            if u < acc {
                chosen = tag.as_str();
                break;
            }
        }
        let group = &per_tag[chosen];
        let ds = if group.len() == 1 { group[0] } else { group[rng.gen_range(0..group.len())] };
        let window = &ds.windows[rng.gen_range(0..ds.windows.len())];
        let max_np = num_patches(window.history_len(), patch_len);
        let lo = patch_range.0.clamp(1, max_np);
        let hi = patch_range.1.clamp(lo, max_np);
        let n_p = rng.gen_range(lo..=hi);
        let len = (n_p * patch_len).min(window.history_len());
        batch.push(window.truncate_history(len)?);
    }
    Ok(batch)
}

/// One record of the training metrics stream (JSON, one object per line).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub learning_rate: f64,
    pub wall_ms: f64,
}

/// Appends a step record to a metrics stream.
pub fn append_step_record(w: &mut dyn Write, record: &StepRecord) -> Result<()> {
    let line = serde_json::to_string(record)
        .map_err(|e| Error::InvalidArgument(format!("metrics serialization failed: {e}")))?;
    writeln!(w, "{line}")?;
    Ok(())
}

/// Everything a training run needs to continue: parameters, optimizer
/// moments, the batch rng, and the completed step count.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl TrainState {
    /// Fresh state: parameters initialized from the training seed, zero
    /// moments, and the batch rng seeded with the same value.
    pub fn new(model_config: &ModelConfig, train_config: &TrainConfig) -> Result<Self> {
        train_config.validate()?;
        let params = ModelParams::init(model_config, train_config.seed)?;
        let opt = OptimizerState::new(&params);
        let rng = ChaCha8Rng::seed_from_u64(train_config.seed);
        Ok(Self { params, opt, rng, step: 0 })
    }
}

/// Runs `steps` optimization steps, invoking `on_step` after each.
pub fn run_training(
    state: &mut TrainState,
    datasets: &[Dataset],
    train_config: &TrainConfig,
    model_config: &ModelConfig,
    steps: u64,
    on_step: &mut dyn FnMut(&StepRecord, &TrainState) -> Result<()>,
) -> Result<()> {
    for _ in 0..steps {
        let started = std::time::Instant::now();
        let batch = build_batch(
            datasets,
            &train_config.task_mix,
            (1, model_config.max_patches),
            model_config.patch_len,
            train_config.batch_size,
            &mut state.rng,
        )?;
        let loss = train_step(
            &batch,
            &mut state.params,
            &mut state.opt,
            train_config,
            model_config,
            &mut state.rng,
        )?;
        state.step += 1;
        let record = StepRecord {
            step: state.step,
            loss,
            learning_rate: train_config.learning_rate,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&record, state)?;
    }
    Ok(())
}

const RESUME_MAGIC: &[u8; 8] = b"WAVRESUM";
const RESUME_VERSION: u32 = 1;

fn write_f64_arrays(w: &mut dyn Write, arrays: &BTreeMap<String, Array2<f64>>) -> Result<()> {
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, arr) in arrays {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(arr.nrows() as u64).to_le_bytes())?;
        w.write_all(&(arr.ncols() as u64).to_le_bytes())?;
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_f64_arrays(r: &mut dyn Read) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut out = BTreeMap::new();
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(resume_eof)?;
    let count = u32::from_le_bytes(b4);
    for _ in 0..count {
        r.read_exact(&mut b4).map_err(resume_eof)?;
        let name_len = u32::from_le_bytes(b4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(resume_eof)?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            message: "resume array name is not UTF-8".into(),
            offset: None,
        })?;
        r.read_exact(&mut b8).map_err(resume_eof)?;
        let rows = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(resume_eof)?;
        let cols = u64::from_le_bytes(b8) as usize;
        let mut arr = Array2::zeros((rows, cols));
        for v in arr.iter_mut() {
            r.read_exact(&mut b8).map_err(resume_eof)?;
            *v = f64::from_le_bytes(b8);
        }
        out.insert(name, arr);
    }
    Ok(out)
}

fn resume_eof(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format { message: "resume file truncated".into(), offset: None }
    } else {
        Error::Io(e)
    }
}

/// Saves the full training state (64-bit precision) so a resumed run
/// continues bitwise-identically to an uninterrupted one.
pub fn save_resume(path: &Path, config: &ModelConfig, state: &TrainState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RESUME_MAGIC)?;
    w.write_all(&RESUME_VERSION.to_le_bytes())?;
    let config_json = serde_json::to_vec(config)
        .map_err(|e| Error::InvalidArgument(format!("config serialization failed: {e}")))?;
    w.write_all(&(config_json.len() as u32).to_le_bytes())?;
    w.write_all(&config_json)?;
    w.write_all(&state.step.to_le_bytes())?;
    w.write_all(&state.opt.step.to_le_bytes())?;
    w.write_all(&state.rng.get_seed())?;
    w.write_all(&state.rng.get_word_pos().to_le_bytes())?;
    write_f64_arrays(&mut w, state.params.arrays())?;
    write_f64_arrays(&mut w, &state.opt.first_moment)?;
    write_f64_arrays(&mut w, &state.opt.second_moment)?;
    w.flush()?;
    Ok(())
}

/// Loads a training state saved by [`save_resume`].
pub fn load_resume(path: &Path) -> Result<(ModelConfig, TrainState)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(resume_eof)?;
    if &magic != RESUME_MAGIC {
        return Err(Error::Format { message: "bad magic; not a resume file".into(), offset: Some(0) });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(resume_eof)?;
    let version = u32::from_le_bytes(b4);
    if version != RESUME_VERSION {
        return Err(Error::Format {
            message: format!("unsupported resume version {version}"),
            offset: Some(8),
        });
    }
    r.read_exact(&mut b4).map_err(resume_eof)?;
    let config_len = u32::from_le_bytes(b4) as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes).map_err(resume_eof)?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes).map_err(|e| Error::Format {
        message: format!("resume config invalid: {e}"),
        offset: None,
    })?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(resume_eof)?;
    let step = u64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(resume_eof)?;
    let opt_step = u64::from_le_bytes(b8);
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed).map_err(resume_eof)?;
    let mut b16 = [0u8; 16];
    r.read_exact(&mut b16).map_err(resume_eof)?;
    let word_pos = u128::from_le_bytes(b16);
    let params = ModelParams::from_arrays(read_f64_arrays(&mut r)?);
    params.check_shapes(&config)?;
    let first = read_f64_arrays(&mut r)?;
    let second = read_f64_arrays(&mut r)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    Ok((
        config,
        TrainState {
            params,
            opt: OptimizerState { first_moment: first, second_moment: second, step: opt_step },
            rng,
            step,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::TaskTag;
    use ndarray::array;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            patch_len: 2,
            latent_dim: 4,
            num_layers: 1,
            num_heads: 2,
            head_key_dim: 2,
            head_value_dim: 2,
            ffn_hidden_dim: 8,
            horizon: 2,
            max_patches: 8,
            embed_resnet_blocks: 1,
            output_resnet_blocks: 1,
            use_positional_encoding: true,
            use_granularity_encoding: true,
        }
    }

    fn sine_window(m: usize, l: usize, h: usize, phase: f64) -> TimeSeriesWindow {
        let series = |i: usize, t: usize| ((t as f64 + phase) * 0.9 + i as f64).sin() + 0.1;
        let values = Array2::from_shape_fn((m, l), |(i, t)| series(i, t));
        let future = Array2::from_shape_fn((m, h), |(i, t)| series(i, l + t));
        TimeSeriesWindow::new(values, Some(future), 0.01, TaskTag::Custom).unwrap()
    }

    fn sine_dataset(task: TaskTag, count: usize, m: usize, l: usize, h: usize) -> Dataset {
        let windows = (0..count).map(|i| {
            let mut w = sine_window(m, l, h, i as f64 * 0.77);
            w.task_tag = task;
            w
        });
        Dataset {
            task,
            windows: windows.collect(),
            transform: crate::series::Transform::Identity,
            delta_t_seconds: 0.01,
            config_hash: String::new(),
            seed: 0,
            code_version: String::new(),
        }
    }

    #[test]
    fn mse_loss_matches_direct_arithmetic() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let pred = array![[0.0, 0.0]];
        let target = array![[1.0, 1.0]];
        assert_eq!(mse_loss(&pred, &target).unwrap(), 1.0);
        let p = array![[1.0, 2.0], [3.0, 5.0]];
        let t = array![[0.0, 0.0], [0.0, 0.0]];
        let swapped_p = array![[3.0, 5.0], [1.0, 2.0]];
        let swapped_t = t.clone();
        assert_eq!(
            mse_loss(&p, &t).unwrap(),
            mse_loss(&swapped_p, &swapped_t).unwrap(),
            "loss is invariant to variable order"
        );
        assert!(mse_loss(&p, &array![[1.0]]).is_err());
    }

    #[test]
    fn backward_zero_head_and_zero_targets_zero_granularity_gradient() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config, 4).unwrap();
        *params.get_mut("output.proj.w").unwrap() = Array2::zeros((4, 2));
        *params.get_mut("output.proj.b").unwrap() = Array2::zeros((1, 2));
        // History 1..8 has mean 4.5; a future equal to the mean normalizes to
        // a zero target.
        let values = array![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]];
        let future = array![[4.5, 4.5]];
        let w = TimeSeriesWindow::new(values, Some(future), 0.01, TaskTag::Custom).unwrap();
        let (loss, grads) = backward(&w, &params, &config, 0).unwrap();
        assert_eq!(loss, 0.0, "zero prediction, zero target");
        assert!(
            grads["granularity.table"].iter().all(|&g| g == 0.0),
            "no loss, no gradient"
        );
    }

    #[test]
    fn backward_matches_finite_differences_on_sample_entries() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 12).unwrap();
        let w = sine_window(2, 6, 2, 0.0);
        let (_, grads) = backward(&w, &params, &config, 1).unwrap();
        let h = 1e-4;
        for (name, idx) in [
            ("embed.in.w", (1, 2)),
            ("layer0.attn.head0.wq", (0, 1)),
            ("layer0.ffn.w1", (2, 3)),
            ("granularity.table", (1, 0)),
            ("output.proj.w", (3, 1)),
        ] {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap()[[idx.0, idx.1]] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap()[[idx.0, idx.1]] -= h;
            let fd = (window_loss(&w, &plus, &config, 1).unwrap()
                - window_loss(&w, &minus, &config, 1).unwrap())
                / (2.0 * h);
            let an = grads[name][[idx.0, idx.1]];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                (an - fd).abs() / denom < 1e-4,
                "{name}{idx:?}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn degenerate_visible_region_produces_finite_loss() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 3).unwrap();
        // Constant history: the visible std clamps, the normalized target is
        // zeroed, and the loss stays finite.
        let values = Array2::from_elem((1, 4), 7.0);
        let future = array![[9.0, 5.0]];
        let w = TimeSeriesWindow::new(values, Some(future), 0.01, TaskTag::Custom).unwrap();
        let (loss, grads) = backward(&w, &params, &config, 1).unwrap();
        assert!(loss.is_finite());
        assert!(grads.values().all(|g| g.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn clip_gradients_bounds_global_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), array![[3.0, 0.0]]);
        grads.insert("b".to_string(), array![[0.0, 4.0]]);
        let pre = clip_gradients(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12, "pre-clip norm is 5");
        let post = grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!(post <= 1.0 + 1e-9, "post-clip norm respects the bound");
        // Below the bound, gradients pass through untouched.
        let mut small = BTreeMap::new();
        small.insert("a".to_string(), array![[0.3]]);
        clip_gradients(&mut small, 1.0);
        assert_eq!(small["a"][[0, 0]], 0.3);
    }

    #[test]
    fn adam_single_step_matches_hand_computation() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config, 1).unwrap();
        let before = params.get("embed.in.w").unwrap()[[0, 0]];
        let mut opt = OptimizerState::new(&params);
        let mut grads: BTreeMap<String, Array2<f64>> = params
            .arrays()
            .iter()
            .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
            .collect();
        grads.get_mut("embed.in.w").unwrap()[[0, 0]] = 2.0;
        let tcfg = TrainConfig { learning_rate: 0.01, ..TrainConfig::default() };
        adam_update(&mut params, &grads, &mut opt, &tcfg).unwrap();
        // First step with g=2: mhat=g, vhat=g^2, update = lr * g / (|g| + eps).
        let expected = before - 0.01 * 2.0 / (2.0 + 1e-8);
        let after = params.get("embed.in.w").unwrap()[[0, 0]];
        assert!((after - expected).abs() < 1e-12, "got {after}, want {expected}");
        // Untouched entries move nowhere (zero gradient keeps moments zero).
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_learning_rate_is_rejected_and_tiny_rate_changes_little() {
        let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err(), "learning_rate must be positive");
    }

    #[test]
    fn train_step_is_deterministic_given_seed() {
        let config = tiny_config();
        let tcfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut state = TrainState::new(&config, &tcfg).unwrap();
            let datasets = vec![sine_dataset(TaskTag::Custom, 6, 2, 8, 2)];
            run_training(&mut state, &datasets, &tcfg, &config, 10, &mut |_, _| Ok(())).unwrap();
            state.params
        };
        let p1 = run();
        let p2 = run();
        assert_eq!(p1, p2, "equal seeds give bitwise-equal parameters after 10 steps");
    }

    #[test]
    fn training_reduces_loss_on_toy_sinusoid() {
        let config = tiny_config();
        let tcfg = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 8,
            seed: 5,
            grad_clip_norm: Some(1.0),
            ..TrainConfig::default()
        };
        let datasets = vec![sine_dataset(TaskTag::Custom, 16, 1, 8, 2)];
        let mut state = TrainState::new(&config, &tcfg).unwrap();
        let mut first = None;
        let mut last = 0.0;
        run_training(&mut state, &datasets, &tcfg, &config, 500, &mut |rec, _| {
            if first.is_none() {
                first = Some(rec.loss);
            }
            last = rec.loss;
            Ok(())
        })
        .unwrap();
        let first = first.unwrap();
        assert!(
            last <= first / 10.0,
            "500 steps must cut the loss at least 10x: start {first}, end {last}"
        );
    }

    #[test]
    fn build_batch_respects_degenerate_mix_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = sine_dataset(TaskTag::Channel, 5, 1, 8, 2);
        let b = sine_dataset(TaskTag::Traffic, 5, 1, 8, 2);
        let mix = vec![TaskMixEntry { task: "channel".into(), weight: 1.0 }];
        let batch = build_batch(&[a.clone(), b.clone()], &mix, (1, 4), 2, 32, &mut rng).unwrap();
        assert!(batch.iter().all(|w| w.task_tag == TaskTag::Channel), "weight 1 takes all");

        assert!(build_batch(&[], &mix, (1, 4), 2, 4, &mut rng).is_err());
        let missing = vec![TaskMixEntry { task: "angle".into(), weight: 1.0 }];
        assert!(build_batch(&[a], &missing, (1, 4), 2, 4, &mut rng).is_err());
    }

    #[test]
    fn build_batch_draws_patch_counts_and_tasks_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = sine_dataset(TaskTag::Channel, 4, 1, 16, 2);
        let b = sine_dataset(TaskTag::Traffic, 4, 1, 16, 2);
        let datasets = [a, b];
        let mix = vec![
            TaskMixEntry { task: "channel".into(), weight: 0.5 },
            TaskMixEntry { task: "traffic".into(), weight: 0.5 },
        ];
        let mut np_counts = BTreeMap::new();
        let mut task_counts = BTreeMap::new();
        let draws = 10_000;
        let batch = build_batch(&datasets, &mix, (1, 8), 2, draws, &mut rng).unwrap();
        for w in &batch {
            let n_p = num_patches(w.history_len(), 2);
            *np_counts.entry(n_p).or_insert(0usize) += 1;
            *task_counts.entry(w.task_tag).or_insert(0usize) += 1;
        }
        for n_p in 1..=8usize {
            let freq = np_counts.get(&n_p).copied().unwrap_or(0) as f64 / draws as f64;
            assert!(
                (freq - 0.125).abs() < 0.02,
                "patch count {n_p} frequency {freq} strays from uniform"
            );
        }
        for (tag, count) in task_counts {
            let freq = count as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.02, "task {tag:?} frequency {freq}");
        }
    }

    #[test]
    fn batch_loss_is_invariant_to_sample_order() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 8).unwrap();
        let w1 = sine_window(1, 8, 2, 0.0);
        let w2 = sine_window(1, 8, 2, 1.3);
        let w3 = sine_window(1, 8, 2, 2.6);
        let loss_of = |ws: &[&TimeSeriesWindow]| {
            ws.iter()
                .map(|w| window_loss(w, &params, &config, 0).unwrap())
                .sum::<f64>()
                / ws.len() as f64
        };
        let a = loss_of(&[&w1, &w2, &w3]);
        let b = loss_of(&[&w3, &w1, &w2]);
        assert!((a - b).abs() < 1e-12, "batch loss must not depend on sample order");
    }

    #[test]
    fn resume_round_trip_continues_bitwise() {
        let config = tiny_config();
        let tcfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            seed: 31,
            ..TrainConfig::default()
        };
        let datasets = vec![sine_dataset(TaskTag::Custom, 6, 2, 8, 2)];

        // Uninterrupted: 5 steps.
        let mut full = TrainState::new(&config, &tcfg).unwrap();
        run_training(&mut full, &datasets, &tcfg, &config, 5, &mut |_, _| Ok(())).unwrap();

        // Interrupted: 3 steps, save, load, 2 more.
        let mut first = TrainState::new(&config, &tcfg).unwrap();
        run_training(&mut first, &datasets, &tcfg, &config, 3, &mut |_, _| Ok(())).unwrap();
        let dir = std::env::temp_dir().join(format!("wavecast-resume-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.resume");
        save_resume(&path, &config, &first).unwrap();
        let (config2, mut resumed) = load_resume(&path).unwrap();
        assert_eq!(config, config2);
        run_training(&mut resumed, &datasets, &tcfg, &config, 2, &mut |_, _| Ok(())).unwrap();

        assert_eq!(full.params, resumed.params, "resume must continue bitwise");
        assert_eq!(full.opt.first_moment, resumed.opt.first_moment);
        assert_eq!(full.opt.second_moment, resumed.opt.second_moment);
        assert_eq!(full.step, resumed.step);
        std::fs::remove_dir_all(&dir).ok();
    }
}
