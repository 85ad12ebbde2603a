//! Raw-window preparation: univariate decomposition, instance normalization,
//! zero padding, patching, and patch masking.
//!
//! Every variable of a multivariate window travels through the same chain
//! before it reaches the model: split into a univariate series, normalize to
//! zero mean and unit variance, prepend zeros up to a whole number of patches,
//! reshape into `N_p x L_p` patches, and optionally zero a random prefix of
//! the first patch. The recorded [`NormStats`] invert the normalization on the
//! model output.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};

/// Standard-deviation clamp used by instance normalization.
pub const NORM_EPSILON: f64 = 1e-8;

/// Task identity carried by every window and dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Channel,
    Angle,
    Traffic,
    Delay,
    Custom,
}

impl TaskTag {
    /// Stable byte tag used by the dataset file format.
    pub fn to_byte(self) -> u8 {
        match self {
            TaskTag::Channel => 0,
            TaskTag::Angle => 1,
            TaskTag::Traffic => 2,
            TaskTag::Delay => 3,
            TaskTag::Custom => 4,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(TaskTag::Channel),
            1 => Ok(TaskTag::Angle),
            2 => Ok(TaskTag::Traffic),
            3 => Ok(TaskTag::Delay),
            4 => Ok(TaskTag::Custom),
            other => Err(Error::Format {
                message: format!("unknown task tag byte {other}"),
                offset: None,
            }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::Channel => "channel",
            TaskTag::Angle => "angle",
            TaskTag::Traffic => "traffic",
            TaskTag::Delay => "delay",
            TaskTag::Custom => "custom",
        }
    }
}

impl std::str::FromStr for TaskTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel" => Ok(TaskTag::Channel),
            "angle" => Ok(TaskTag::Angle),
            "traffic" => Ok(TaskTag::Traffic),
            "delay" => Ok(TaskTag::Delay),
            "custom" => Ok(TaskTag::Custom),
            other => Err(Error::InvalidArgument(format!("unknown task tag `{other}`"))),
        }
    }
}

impl std::fmt::Display for TaskTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One multivariate history/future pair with its sampling interval.
///
/// `values` is `M x L` (variables by history steps); `future` is `M x H` and
/// optional at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesWindow {
    pub values: Array2<f64>,
    pub future: Option<Array2<f64>>,
    pub delta_t_seconds: f64,
    pub task_tag: TaskTag,
}

impl TimeSeriesWindow {
    /// Builds a window after checking shapes, finiteness, and the sampling
    /// interval.
    pub fn new(
        values: Array2<f64>,
        future: Option<Array2<f64>>,
        delta_t_seconds: f64,
        task_tag: TaskTag,
    ) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "window values must be at least 1x1, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("window values contain non-finite entries".into()));
        }
        if let Some(fut) = &future {
            if fut.nrows() != values.nrows() || fut.ncols() == 0 {
                return Err(Error::InvalidArgument(format!(
                    "future must be {}xH with H >= 1, got {}x{}",
                    values.nrows(),
                    fut.nrows(),
                    fut.ncols()
                )));
            }
            if !fut.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument("window future contains non-finite entries".into()));
            }
        }
        if !(delta_t_seconds > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "delta_t_seconds must be positive, got {delta_t_seconds}"
            )));
        }
        Ok(Self { values, future, delta_t_seconds, task_tag })
    }

    /// Number of variables M.
    pub fn num_variables(&self) -> usize {
        self.values.nrows()
    }

    /// History length L.
    pub fn history_len(&self) -> usize {
        self.values.ncols()
    }

    /// Returns a copy truncated to the last `len` history columns. The future
    /// block is untouched, so targets stay adjacent to the kept history.
    pub fn truncate_history(&self, len: usize) -> Result<Self> {
        let l = self.history_len();
        if len == 0 || len > l {
            return Err(Error::InvalidArgument(format!(
                "truncation length {len} outside [1, {l}]"
            )));
        }
        let values = self.values.slice(ndarray::s![.., l - len..]).to_owned();
        Ok(Self {
            values,
            future: self.future.clone(),
            delta_t_seconds: self.delta_t_seconds,
            task_tag: self.task_tag,
        })
    }
}

/// Per-series normalization statistics, reapplied to the forecast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    /// Population standard deviation, clamped below by [`NORM_EPSILON`].
    pub std: f64,
}

/// Sampling-interval class that selects the granularity-encoding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    High,
    Medium,
    Low,
}

impl Granularity {
    /// Row index into the 3-row granularity lookup table.
    pub fn index(self) -> usize {
        match self {
            Granularity::High => 0,
            Granularity::Medium => 1,
            Granularity::Low => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::High => "high",
            Granularity::Medium => "medium",
            Granularity::Low => "low",
        }
    }
}

/// Normalized, padded, optionally masked patches of one variable.
///
/// `patches` and `mask` are `N_p x L_p`; mask entries are exactly 0 or 1, the
/// zeros form a prefix in row-major order, and masked positions of `patches`
/// are exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patches: Array2<f64>,
    pub mask: Array2<f64>,
    pub stats: NormStats,
    pub granularity: Granularity,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }

    pub fn patch_len(&self) -> usize {
        self.patches.ncols()
    }
}

/// Splits a multivariate window into its univariate rows, order preserved.
pub fn row_split(window: &TimeSeriesWindow) -> Vec<Array1<f64>> {
    window.values.rows().into_iter().map(|r| r.to_owned()).collect()
}

/// Scales a series to zero mean and unit population variance, recording the
/// statistics for later inversion.
///
/// A constant series (raw standard deviation below [`NORM_EPSILON`]) is
/// degenerate, not an error: the output is all zeros and the recorded standard
/// deviation is the clamp value.
pub fn instance_normalize(series: ArrayView1<f64>) -> Result<(Array1<f64>, NormStats)> {
    let l = series.len();
    if l == 0 {
        return Err(Error::InvalidArgument("cannot normalize an empty series".into()));
    }
    if !series.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("series contains non-finite entries".into()));
    }
    let mean = series.sum() / l as f64;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
    let raw_std = var.sqrt();
    if raw_std < NORM_EPSILON {
        let stats = NormStats { mean, std: NORM_EPSILON };
        return Ok((Array1::zeros(l), stats));
    }
    let stats = NormStats { mean, std: raw_std };
    let normalized = series.mapv(|v| (v - mean) / raw_std);
    Ok((normalized, stats))
}

/// Inverts [`instance_normalize`] on a prediction: `pred * std + mean`.
pub fn denormalize(pred: ArrayView1<f64>, stats: NormStats) -> Array1<f64> {
    pred.mapv(|v| v * stats.std + stats.mean)
}

/// Classifies a sampling interval into the three granularity levels:
/// below 1 ms is high, from 1 ms up to (excluding) 1 h is medium, and 1 h or
/// coarser is low. Both boundaries belong to the coarser class.
pub fn classify_granularity(delta_t_seconds: f64) -> Result<Granularity> {
    if !(delta_t_seconds > 0.0) || !delta_t_seconds.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "delta_t_seconds must be positive and finite, got {delta_t_seconds}"
        )));
    }
    if delta_t_seconds < 1e-3 {
        Ok(Granularity::High)
    } else if delta_t_seconds < 3600.0 {
        Ok(Granularity::Medium)
    } else {
        Ok(Granularity::Low)
    }
}

/// Number of patches covering a series of length `len`.
pub fn num_patches(len: usize, patch_len: usize) -> usize {
    len.div_ceil(patch_len)
}

/// Prepends zeros so the series length becomes the next multiple of
/// `patch_len`; returns the padded series and the number of zeros added.
///
/// Padding is applied after normalization: the zeros are placeholders that the
/// mask marks invalid, exactly like a training patch mask.
pub fn pad_to_patch_multiple(series: ArrayView1<f64>, patch_len: usize) -> (Array1<f64>, usize) {
    let l = series.len();
    let n_p = num_patches(l.max(1), patch_len);
    let total = n_p * patch_len;
    let pad_count = total - l;
    let mut padded = Array1::zeros(total);
    padded.slice_mut(ndarray::s![pad_count..]).assign(&series);
    (padded, pad_count)
}

/// Reshapes a padded series into `N_p x L_p` patches with a prefix mask that
/// marks the first `pad_count` flattened positions invalid (and forces the
/// corresponding patch entries to zero).
pub fn patchify(
    padded: ArrayView1<f64>,
    pad_count: usize,
    patch_len: usize,
    stats: NormStats,
    granularity: Granularity,
) -> Result<PatchGrid> {
    let total = padded.len();
    if patch_len == 0 || total == 0 || total % patch_len != 0 {
        return Err(Error::InvalidArgument(format!(
            "padded length {total} is not a positive multiple of patch length {patch_len}"
        )));
    }
    if pad_count >= total {
        return Err(Error::InvalidArgument(format!(
            "pad count {pad_count} must leave at least one valid sample of {total}"
        )));
    }
    let n_p = total / patch_len;
    let mut patches = padded
        .to_owned()
        .into_shape_with_order((n_p, patch_len))
        .expect("length checked divisible");
    let mut mask = Array2::ones((n_p, patch_len));
    for flat in 0..pad_count {
        let (i, j) = (flat / patch_len, flat % patch_len);
        mask[[i, j]] = 0.0;
        patches[[i, j]] = 0.0;
    }
    Ok(PatchGrid { patches, mask, stats, granularity })
}

/// Draws the training mask: a random prefix of length `r` (uniform over
/// `0..patch_len`) of the first patch is zeroed; every later patch stays
/// fully visible.
pub fn sample_training_mask(
    n_patches: usize,
    patch_len: usize,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let r = rng.gen_range(0..patch_len);
    let mut mask = Array2::ones((n_patches, patch_len));
    for j in 0..r {
        mask[[0, j]] = 0.0;
    }
    mask
}

/// Length of the zero prefix of a prefix mask in row-major order.
pub fn mask_prefix_len(mask: &Array2<f64>) -> usize {
    mask.iter().take_while(|&&v| v == 0.0).count()
}

/// Applies a grid's mask to its patches (elementwise product); idempotent.
pub fn apply_patch_mask(grid: &PatchGrid) -> PatchGrid {
    PatchGrid {
        patches: &grid.patches * &grid.mask,
        mask: grid.mask.clone(),
        stats: grid.stats,
        granularity: grid.granularity,
    }
}

/// Full per-variable preparation: normalize, pad, patchify, and mask in one
/// step, with the normalization statistics taken over the samples that stay
/// visible.
///
/// `mask_prefix` is the training mask length `r` in `0..patch_len` (use 0 at
/// plain inference). Padding zeros and the masked prefix overlap at the start
/// of the padded series, so the combined invalid prefix has length
/// `max(pad_count, mask_prefix)`; statistics are computed over the remaining
/// samples only. This makes masking a sample exactly equivalent to truncating
/// its history: the surviving samples are normalized identically either way,
/// which is what lets one checkpoint serve every history length.
pub fn prepare_variable(
    series: ArrayView1<f64>,
    patch_len: usize,
    mask_prefix: usize,
    granularity: Granularity,
) -> Result<PatchGrid> {
    let l = series.len();
    if l == 0 {
        return Err(Error::InvalidArgument("cannot prepare an empty series".into()));
    }
    if patch_len == 0 {
        return Err(Error::InvalidArgument("patch length must be at least 1".into()));
    }
    if mask_prefix >= patch_len {
        return Err(Error::InvalidArgument(format!(
            "mask prefix {mask_prefix} must be below patch length {patch_len}"
        )));
    }
    let n_p = num_patches(l, patch_len);
    let total = n_p * patch_len;
    let pad_count = total - l;
    let prefix = pad_count.max(mask_prefix);
    // The first `prefix` padded positions are zeroed; the surviving samples
    // start at raw index `prefix - pad_count`.
    let valid = series.slice(ndarray::s![prefix - pad_count..]);
    let (normalized, stats) = instance_normalize(valid)?;
    let mut padded = Array1::zeros(total);
    padded.slice_mut(ndarray::s![prefix..]).assign(&normalized);
    patchify(padded.view(), prefix, patch_len, stats, granularity)
}

/// Optional pointwise transform applied to a task's raw values before
/// windowing (and inverted before computing metrics).
///
/// `SignedLog` is sign(x) * log10(1 + |x| * scale): odd, strictly monotone,
/// and exactly invertible, so it is defined on negative real and imaginary
/// channel parts where a plain log10 is not.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    SignedLog { scale: f64 },
}

impl Transform {
    pub fn apply_scalar(&self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::SignedLog { scale } => x.signum() * (1.0 + x.abs() * scale).log10(),
        }
    }

    pub fn invert_scalar(&self, y: f64) -> f64 {
        match self {
            Transform::Identity => y,
            Transform::SignedLog { scale } => y.signum() * (10f64.powf(y.abs()) - 1.0) / scale,
        }
    }

    pub fn apply(&self, values: &Array2<f64>) -> Array2<f64> {
        values.mapv(|v| self.apply_scalar(v))
    }

    pub fn invert(&self, values: &Array2<f64>) -> Array2<f64> {
        values.mapv(|v| self.invert_scalar(v))
    }

    /// Byte tag for the dataset file header.
    pub fn to_tag(&self) -> (u8, f64) {
        match self {
            Transform::Identity => (0, 0.0),
            Transform::SignedLog { scale } => (1, *scale),
        }
    }

    pub fn from_tag(tag: u8, scale: f64) -> Result<Self> {
        match tag {
            0 => Ok(Transform::Identity),
            1 => Ok(Transform::SignedLog { scale }),
            other => Err(Error::Format {
                message: format!("unknown transform tag {other}"),
                offset: None,
            }),
        }
    }
}
