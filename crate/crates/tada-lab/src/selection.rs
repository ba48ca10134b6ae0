//! Picks out the slow-learnable points from an early training checkpoint.
//!
//! The main strategy clusters the scalar model outputs per class with 1-D
//! 2-means and keeps the cluster with the higher mean loss; loss-quantile,
//! misclassification, and ground-truth oracle selectors serve as baselines.
//! A selection can then be fed back into targeted upsampling or generation.

use serde::{Deserialize, Serialize};

use crate::cnn::{check_dims, forward, softplus, CnnModel};
use crate::synthdata::{
    augment_selected, AugmentMode, Dataset, DatasetKind, FeatureKind, GenerationNoiseParams,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SelectionStrategy {
    Cluster2,
    /// Top quantile by per-example loss; the value must lie in (0, 1).
    HighLoss(f64),
    Misclassified,
    /// Ground-truth slow points, for evaluation only.
    Oracle,
}

/// What scalar the clusters are built on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterInput {
    #[default]
    Output,
    Loss,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub strategy: SelectionStrategy,
    /// Training steps the caller runs before selecting.
    pub early_steps: usize,
    pub per_class: bool,
    pub cluster_input: ClusterInput,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            strategy: SelectionStrategy::Cluster2,
            early_steps: 30,
            per_class: true,
            cluster_input: ClusterInput::Output,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    /// Class label, or None when clustering was pooled over classes.
    pub label: Option<i8>,
    pub centers: [f64; 2],
    pub mean_loss: [f64; 2],
    pub sizes: [usize; 2],
    /// Which cluster was selected.
    pub selected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Sorted, unique point indices.
    pub indices: Vec<usize>,
    pub fraction: f64,
    pub per_class_cluster_stats: Vec<ClusterStats>,
    pub strategy: SelectionConfig,
    pub flags: Vec<String>,
}

/// Lloyd's algorithm with k = 2 on scalars, centers initialized at the min
/// and max. Returns per-value cluster assignments (0 = lower center) and
/// the two centers. The seed is unused; the procedure is deterministic.
pub fn kmeans2_scalar(
    values: &[f64],
    _seed: u64,
    max_iter: usize,
) -> Result<(Vec<usize>, [f64; 2])> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(Error::DegenerateClustering);
    }
    let mut centers = [lo, hi];
    let mut assign = vec![0usize; values.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (a, &v) in assign.iter_mut().zip(values) {
            let c = usize::from((v - centers[0]).abs() > (v - centers[1]).abs());
            if c != *a {
                *a = c;
                changed = true;
            }
        }
        let mut sum = [0.0f64; 2];
        let mut count = [0usize; 2];
        for (&a, &v) in assign.iter().zip(values) {
            sum[a] += v;
            count[a] += 1;
        }
        for c in 0..2 {
            if count[c] > 0 {
                centers[c] = sum[c] / count[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    Ok((assign, centers))
}

fn high_loss_indices(losses: &[f64], quantile: f64) -> Result<Vec<usize>> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "HighLoss quantile must lie in (0, 1), got {quantile}"
        )));
    }
    let take = ((quantile * losses.len() as f64).ceil() as usize).min(losses.len());
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order[..take].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn cluster_group(
    group: &[usize],
    label: Option<i8>,
    outputs: &[f64],
    losses: &[f64],
    input: ClusterInput,
) -> Result<(Vec<usize>, ClusterStats, bool)> {
    let values: Vec<f64> = group
        .iter()
        .map(|&i| match input {
            ClusterInput::Output => outputs[i],
            ClusterInput::Loss => losses[i],
        })
        .collect();
    let (assign, centers) = kmeans2_scalar(&values, 0, 100)?;
    let mut loss_sum = [0.0f64; 2];
    let mut sizes = [0usize; 2];
    for (&a, &i) in assign.iter().zip(group) {
        loss_sum[a] += losses[i];
        sizes[a] += 1;
    }
    let mean_loss = [
        loss_sum[0] / sizes[0].max(1) as f64,
        loss_sum[1] / sizes[1].max(1) as f64,
    ];
    let mut tie = false;
    let pick = match mean_loss[0].total_cmp(&mean_loss[1]) {
        std::cmp::Ordering::Greater => 0,
        std::cmp::Ordering::Less => 1,
        std::cmp::Ordering::Equal => {
            tie = true;
            // The rarer points are the augmentation target.
            if sizes[0] <= sizes[1] {
                0
            } else {
                1
            }
        }
    };
    let chosen: Vec<usize> = assign
        .iter()
        .zip(group)
        .filter(|&(&a, _)| a == pick)
        .map(|(_, &i)| i)
        .collect();
    let stats = ClusterStats {
        label,
        centers,
        mean_loss,
        sizes,
        selected: pick,
    };
    Ok((chosen, stats, tie))
}

/// Selects slow-learnable points from an early checkpoint. For `Cluster2`
/// the scalar outputs are 2-means-clustered (per class when `per_class`)
/// and the higher-mean-loss cluster wins; degenerate clusterings fall back
/// to `HighLoss(0.5)` with a flag.
pub fn identify_slow(
    model: &CnnModel,
    dataset: &Dataset,
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    check_dims(model, dataset)?;
    let outputs: Vec<f64> = dataset.points.iter().map(|p| forward(model, p)).collect();
    let losses: Vec<f64> = outputs
        .iter()
        .zip(&dataset.points)
        .map(|(&f, p)| softplus(-p.y() * f))
        .collect();

    let mut flags = Vec::new();
    let mut stats = Vec::new();
    let mut indices = match config.strategy {
        SelectionStrategy::Oracle => dataset
            .points
            .iter()
            .enumerate()
            .filter(|(_, p)| p.feature_kind == FeatureKind::Slow)
            .map(|(i, _)| i)
            .collect(),
        SelectionStrategy::Misclassified => {
            if outputs.contains(&0.0) {
                flags.push("zero_output_counted_misclassified".into());
            }
            if outputs.iter().all(|&f| f == 0.0) {
                flags.push("degenerate_zero_outputs".into());
            }
            outputs
                .iter()
                .zip(&dataset.points)
                .enumerate()
                .filter(|(_, (&f, p))| f * p.y() <= 0.0)
                .map(|(i, _)| i)
                .collect()
        }
        SelectionStrategy::HighLoss(q) => high_loss_indices(&losses, q)?,
        SelectionStrategy::Cluster2 => {
            let groups: Vec<(Option<i8>, Vec<usize>)> = if config.per_class {
                [1i8, -1]
                    .iter()
                    .map(|&lab| {
                        (
                            Some(lab),
                            (0..dataset.len())
                                .filter(|&i| dataset.points[i].label == lab)
                                .collect(),
                        )
                    })
                    .filter(|(_, g): &(_, Vec<usize>)| !g.is_empty())
                    .collect()
            } else {
                vec![(None, (0..dataset.len()).collect())]
            };
            let mut selected = Vec::new();
            let mut degenerate = false;
            for (label, group) in &groups {
                match cluster_group(group, *label, &outputs, &losses, config.cluster_input) {
                    Ok((chosen, cluster_stats, tie)) => {
                        selected.extend(chosen);
                        stats.push(cluster_stats);
                        if tie {
                            flags.push("equal_mean_loss_tie".into());
                        }
                    }
                    Err(Error::DegenerateClustering) => {
                        degenerate = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if degenerate {
                flags.push("cluster_fallback_high_loss".into());
                stats.clear();
                high_loss_indices(&losses, 0.5)?
            } else {
                selected
            }
        }
    };
    indices.sort_unstable();
    let fraction = indices.len() as f64 / dataset.len() as f64;
    Ok(SelectionResult {
        indices,
        fraction,
        per_class_cluster_stats: stats,
        strategy: *config,
        flags,
    })
}

/// Gives each selected point `k - 1` extra copies: replicas for
/// `Upsample`, fresh-noise points for `Generate`. An empty selection
/// returns the base unchanged. With an oracle selection this reduces to
/// the dataset-level upsample/generate.
pub fn build_augmented_from_selection(
    base: &Dataset,
    selection: &SelectionResult,
    k: u32,
    mode: AugmentMode,
    gen: &GenerationNoiseParams,
    seed: u64,
) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::InvalidFactor);
    }
    if selection.indices.is_empty() {
        return Ok(base.clone());
    }
    let (kind, gen_params) = match mode {
        AugmentMode::Upsample => (DatasetKind::Upsampled { k }, None),
        AugmentMode::Generate => (DatasetKind::Generated { k }, Some(gen)),
    };
    augment_selected(base, &selection.indices, k, mode, gen_params, seed, kind)
}
