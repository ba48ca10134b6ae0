//! Diagnostics on trained models: which noises a filter is learning
//! (sign-partitioned noise sets and NoiseAlign), the SAM feature
//! amplification factor, and Monte Carlo mini-batch gradient variance with
//! its replication inflation bound.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::{self, CnnModel};
use crate::linalg::dot;
use crate::optim::{draw_batch_indices, Sampling};
use crate::rng::substream;
use crate::synthdata::Dataset;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Plus,
    Minus,
}

/// Point indices split by whether `sgn(<w_j, xi_i>)` matches the label.
/// Multiset semantics: every point is listed, so replicas of one noise
/// appear once per occurrence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSetPartition {
    pub filter: usize,
    pub plus_set: Vec<usize>,
    pub minus_set: Vec<usize>,
    /// Whether the signs were taken at perturbed weights.
    pub perturbed: bool,
    /// Exact-zero alignments; they sit in `minus_set` (inert).
    pub ties: usize,
}

/// Signs taken at `perturbed_weights` when given (the SAM point W + eps),
/// at `model` otherwise.
pub fn partition_noise_sets(
    model: &CnnModel,
    dataset: &Dataset,
    j: usize,
    perturbed_weights: Option<&CnnModel>,
) -> Result<NoiseSetPartition> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if j >= model.filters() {
        return Err(Error::IndexError {
            index: j,
            len: model.filters(),
        });
    }
    let at = perturbed_weights.unwrap_or(model);
    if at.dim() != dataset.dim() {
        return Err(Error::ShapeError {
            expected: dataset.dim(),
            got: at.dim(),
        });
    }
    let w = at.filter(j);
    let mut plus_set = Vec::new();
    let mut minus_set = Vec::new();
    let mut ties = 0;
    for (i, p) in dataset.points.iter().enumerate() {
        let s = dot(w, p.noise_patch());
        if s * p.y() > 0.0 {
            plus_set.push(i);
        } else {
            if s == 0.0 {
                ties += 1;
            }
            minus_set.push(i);
        }
    }
    Ok(NoiseSetPartition {
        filter: j,
        plus_set,
        minus_set,
        perturbed: perturbed_weights.is_some(),
        ties,
    })
}

/// Mean `|<grad_j, xi_i>|` over one side of a partition, via the
/// closed-form noise gradient. The gradient model may be a perturbed
/// checkpoint while the partition came from the unperturbed one.
pub fn noise_align(
    model_for_grad: &CnnModel,
    dataset: &Dataset,
    partition: &NoiseSetPartition,
    side: Side,
) -> Result<f64> {
    let indices = match side {
        Side::Plus => &partition.plus_set,
        Side::Minus => &partition.minus_set,
    };
    if indices.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut sum = 0.0;
    for &i in indices {
        sum += cnn::noise_gradient(model_for_grad, dataset, partition.filter, i)?.abs();
    }
    Ok(sum / indices.len() as f64)
}

/// SAM's slow-over-fast feature amplification factor,
/// `((1 - rho_t beta_d^3 align_d) / (1 - rho_t beta_e^3 align_e))^(2/3)`.
pub fn sam_factor(
    align_d: f64,
    align_e: f64,
    rho_t: f64,
    beta_d: f64,
    beta_e: f64,
) -> Result<f64> {
    let num = 1.0 - rho_t * beta_d.powi(3) * align_d;
    let den = 1.0 - rho_t * beta_e.powi(3) * align_e;
    if den == 0.0 {
        return Err(Error::OutOfRegime(
            "amplification denominator is zero".into(),
        ));
    }
    if num <= 0.0 || den <= 0.0 {
        return Err(Error::OutOfRegime(format!(
            "amplification base not positive: numerator {num}, denominator {den}"
        )));
    }
    Ok((num / den).powf(2.0 / 3.0))
}

/// Per-filter [`sam_factor`] with alignments read off the model.
pub fn sam_factor_per_filter(
    model: &CnnModel,
    dataset: &Dataset,
    rho_t: f64,
) -> Result<Vec<f64>> {
    (0..model.filters())
        .map(|j| {
            let a_d = dot(model.filter(j), &dataset.basis.v_d);
            let a_e = dot(model.filter(j), &dataset.basis.v_e);
            sam_factor(a_d, a_e, rho_t, dataset.params.beta_d, dataset.params.beta_e)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    /// Monte Carlo mean of `||g_batch - g_full||_F^2`.
    pub mean_sq_dev: f64,
    pub trials: usize,
    pub std_error: f64,
    /// Mean `||g_i - g_full||_F^2` over single examples.
    pub per_example_variance: f64,
}

fn mean_columns(per_example: &[Vec<f64>], indices: &[usize], out: &mut [f64]) {
    out.fill(0.0);
    for &i in indices {
        for (o, g) in out.iter_mut().zip(&per_example[i]) {
            *o += g;
        }
    }
    let inv = 1.0 / indices.len() as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Monte Carlo estimate of the mini-batch gradient variance
/// `E ||g_batch - g_full||_F^2` under the given sampling scheme.
///
/// Stratified stratum sizes are rounded to the nearest split when the exact
/// proportions are non-integral, so sweeps over k stay comparable; the
/// strict integrality check lives in `optim::sgd_step`.
pub fn estimate_minibatch_variance(
    model: &CnnModel,
    dataset: &Dataset,
    batch: usize,
    sampling: Sampling,
    trials: usize,
    seed: u64,
) -> Result<VarianceEstimate> {
    if trials < 100 {
        return Err(Error::InvalidConfig(format!(
            "variance estimation needs at least 100 trials, got {trials}"
        )));
    }
    if batch == 0 || batch > dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "batch must be in 1..={}, got {batch}",
            dataset.len()
        )));
    }
    if dataset.dim() != model.dim() {
        return Err(Error::ShapeError {
            expected: model.dim(),
            got: dataset.dim(),
        });
    }
    let entries = model.dim() * model.filters();
    let per_example: Vec<Vec<f64>> = dataset
        .points
        .iter()
        .map(|p| {
            let mut g = vec![0.0; entries];
            cnn::example_gradient(model, p, &mut g);
            g
        })
        .collect();
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut full = vec![0.0; entries];
    mean_columns(&per_example, &all, &mut full);

    let devs: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(seed, "variance-trial", t as u64);
            let indices = draw_batch_indices(&mut rng, dataset, batch, sampling, false)
                .expect("batch size validated");
            let mut g = vec![0.0; entries];
            mean_columns(&per_example, &indices, &mut g);
            g.iter()
                .zip(&full)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .collect();

    let mean_sq_dev = devs.iter().sum::<f64>() / trials as f64;
    let var = devs
        .iter()
        .map(|d| (d - mean_sq_dev) * (d - mean_sq_dev))
        .sum::<f64>()
        / (trials as f64 - 1.0);
    let std_error = (var / trials as f64).sqrt();
    let per_example_variance = per_example
        .iter()
        .map(|g| {
            g.iter()
                .zip(&full)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / dataset.len() as f64;
    Ok(VarianceEstimate {
        mean_sq_dev,
        trials,
        std_error,
        per_example_variance,
    })
}

/// Mean `||g_i - g_full||_F^2` over single examples, without the Monte
/// Carlo machinery.
pub fn per_example_variance(model: &CnnModel, dataset: &Dataset) -> Result<f64> {
    cnn::check_dims(model, dataset)?;
    let entries = model.dim() * model.filters();
    let per_example: Vec<Vec<f64>> = dataset
        .points
        .iter()
        .map(|p| {
            let mut g = vec![0.0; entries];
            cnn::example_gradient(model, p, &mut g);
            g
        })
        .collect();
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut full = vec![0.0; entries];
    mean_columns(&per_example, &all, &mut full);
    Ok(per_example
        .iter()
        .map(|g| {
            g.iter()
                .zip(&full)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / dataset.len() as f64)
}

/// Replication inflation factor on the stratified mini-batch variance
/// bound: `1 + k(k-1)(1-alpha) / (alpha + k(1-alpha))^2 * B/N`.
pub fn variance_bound_factor(k: u32, alpha: f64, batch: usize, n: usize) -> f64 {
    let k = f64::from(k);
    let mix = alpha + k * (1.0 - alpha);
    1.0 + k * (k - 1.0) * (1.0 - alpha) / (mix * mix) * (batch as f64 / n as f64)
}
