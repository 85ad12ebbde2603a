//! Finite-difference verification of reverse-mode gradients.
//!
//! Central differences of the training loss are compared against the tape
//! gradients entry by entry. The loss evaluated here is [`training::window_loss`],
//! the identical scalar whose gradient [`training::backward`] returns, so a
//! pass certifies the optimized function itself.

use crate::error::Result;
use crate::model::{ModelConfig, ModelParams};
use crate::series::TimeSeriesWindow;
use crate::training::{backward, window_loss};

pub use crate::training;

/// One gradient entry that failed its tolerance.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub name: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Entries compared.
    pub checked: usize,
    /// Largest relative error observed.
    pub worst: f64,
    /// Entries exceeding the tolerance (empty on success).
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Relative error with a floor so that near-zero pairs compare absolutely:
/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite difference of the window loss along one parameter entry.
pub fn fd_gradient_entry(
    window: &TimeSeriesWindow,
    params: &ModelParams,
    config: &ModelConfig,
    mask_prefix: usize,
    name: &str,
    index: (usize, usize),
    step: f64,
) -> Result<f64> {
    let mut plus = params.clone();
    plus.get_mut(name)?[[index.0, index.1]] += step;
    let mut minus = params.clone();
    minus.get_mut(name)?[[index.0, index.1]] -= step;
    let lp = window_loss(window, &plus, config, mask_prefix)?;
    let lm = window_loss(window, &minus, config, mask_prefix)?;
    Ok((lp - lm) / (2.0 * step))
}

/// Sweeps every parameter entry (or a strided subset) and compares the
/// analytic gradient against central differences.
///
/// `stride` of 1 checks all entries; larger strides check every `stride`-th
/// entry of each array (always including the first). `step` is the central
/// difference step, `rel_tol` the acceptance threshold on [`relative_error`]
/// with floor 1e-6; pairs whose absolute difference is below 1e-10 pass
/// outright, which keeps roundoff on exactly-zero gradients from registering
/// as failures.
pub fn check_gradients(
    window: &TimeSeriesWindow,
    params: &ModelParams,
    config: &ModelConfig,
    mask_prefix: usize,
    step: f64,
    rel_tol: f64,
    stride: usize,
) -> Result<GradCheckReport> {
    let stride = stride.max(1);
    let (_, grads) = backward(window, params, config, mask_prefix)?;
    let mut report = GradCheckReport { checked: 0, worst: 0.0, mismatches: Vec::new() };
    let names: Vec<String> = params.arrays().keys().cloned().collect();
    for name in names {
        let analytic = &grads[&name];
        let (rows, cols) = analytic.dim();
        let mut flat = 0usize;
        for r in 0..rows {
            for c in 0..cols {
                if flat % stride != 0 {
                    flat += 1;
                    continue;
                }
                flat += 1;
                let an = analytic[[r, c]];
                let num = fd_gradient_entry(window, params, config, mask_prefix, &name, (r, c), step)?;
                report.checked += 1;
                if (an - num).abs() < 1e-10 {
                    continue;
                }
                let rel = relative_error(an, num, 1e-6);
                if rel > report.worst {
                    report.worst = rel;
                }
                if rel > rel_tol {
                    report.mismatches.push(GradMismatch {
                        name: name.clone(),
                        index: (r, c),
                        analytic: an,
                        numeric: num,
                        relative_error: rel,
                    });
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::TaskTag;
    use ndarray::Array2;

    #[test]
    fn relative_error_floors_near_zero_pairs() {
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert!(relative_error(1e-9, 0.0, 1e-6) < 1e-2, "floor absorbs tiny magnitudes");
        assert_eq!(relative_error(3.0, 3.0, 1e-6), 0.0);
    }

    #[test]
    fn strided_sweep_passes_on_a_tiny_model() {
        let config = ModelConfig {
            patch_len: 2,
            latent_dim: 4,
            num_layers: 1,
            num_heads: 2,
            head_key_dim: 2,
            head_value_dim: 2,
            ffn_hidden_dim: 8,
            horizon: 2,
            max_patches: 4,
            embed_resnet_blocks: 1,
            output_resnet_blocks: 1,
            use_positional_encoding: true,
            use_granularity_encoding: true,
        };
        let params = ModelParams::init(&config, 77).unwrap();
        let values =
            Array2::from_shape_fn((2, 6), |(i, t)| ((t + 1) as f64 * 0.8 + i as f64).cos());
        let future = Array2::from_shape_fn((2, 2), |(i, t)| ((t + 7) as f64 * 0.8 + i as f64).cos());
        let window =
            TimeSeriesWindow::new(values, Some(future), 0.01, TaskTag::Custom).unwrap();
        let report = check_gradients(&window, &params, &config, 1, 1e-4, 1e-4, 3).unwrap();
        assert!(report.checked > 50, "sweep must cover a meaningful sample");
        assert!(
            report.passed(),
            "worst {} with {} mismatches, first: {:?}",
            report.worst,
            report.mismatches.len(),
            report.mismatches.first()
        );
    }
}
