//! Optimizers for the cubic CNN: full-batch GD, SAM with a
//! Frobenius-normalized ascent step, and mini-batch SGD with uniform or
//! stratified sampling. [`train`] runs any of them and records loss,
//! feature alignments, and optionally noise alignments and test error at
//! every step.

use std::io::Write;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::{self, CnnModel, GradientMatrix};
use crate::fmt::sig17;
use crate::linalg::dot;
use crate::rng::{derive_seed, substream};
use crate::synthdata::{Dataset, FeatureBasis, FeatureKind};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Gd,
    Sam,
    Sgd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampling {
    #[default]
    WithoutReplacement,
    WithReplacement,
    Stratified,
}

/// Multiply eta by `factor` every `every` steps. Off by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub method: Method,
    pub eta: f64,
    /// SAM radius; ignored unless `method == Sam`.
    #[serde(default)]
    pub rho: f64,
    /// Batch size; SGD only.
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default)]
    pub sampling: Sampling,
    pub steps: usize,
    #[serde(default)]
    pub decay: Option<StepDecay>,
}

impl OptimizerConfig {
    pub fn gd(eta: f64, steps: usize) -> Self {
        OptimizerConfig {
            method: Method::Gd,
            eta,
            rho: 0.0,
            batch: None,
            sampling: Sampling::WithoutReplacement,
            steps,
            decay: None,
        }
    }

    pub fn sam(eta: f64, rho: f64, steps: usize) -> Self {
        OptimizerConfig {
            method: Method::Sam,
            rho,
            ..OptimizerConfig::gd(eta, steps)
        }
    }

    pub fn sgd(eta: f64, batch: usize, sampling: Sampling, steps: usize) -> Self {
        OptimizerConfig {
            method: Method::Sgd,
            batch: Some(batch),
            sampling,
            ..OptimizerConfig::gd(eta, steps)
        }
    }

    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "eta must be finite and positive, got {}",
                self.eta
            )));
        }
        match self.method {
            Method::Sam if !(self.rho.is_finite() && self.rho > 0.0) => {
                Err(Error::InvalidConfig(format!(
                    "SAM requires rho > 0, got {}",
                    self.rho
                )))
            }
            Method::Sgd => {
                let b = self.batch.ok_or_else(|| {
                    Error::InvalidConfig("SGD requires a batch size".into())
                })?;
                if b == 0 || b > dataset_size {
                    return Err(Error::InvalidConfig(format!(
                        "batch must be in 1..={dataset_size}, got {b}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Snapshot of one SAM step's inner state.
#[derive(Clone, Debug)]
pub struct SamStepTrace {
    /// `rho_t = rho / ||grad||_F`.
    pub rho_t: f64,
    pub perturbed_weights: CnnModel,
    pub perturbed_grad: GradientMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub loss: f64,
    /// `<w_j, v_e>` per filter.
    pub align_ve: Vec<f64>,
    /// `<w_j, v_d>` per filter.
    pub align_vd: Vec<f64>,
    /// Per-filter mean `|<w_j, xi_i>|` over distinct noises, if requested.
    pub noise_align: Option<Vec<f64>>,
    /// 0-1 error on the eval set, if one was given.
    pub test_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub steps: Vec<StepRecord>,
    pub seed: u64,
    /// Set when the run stopped early (e.g. SAM hit a zero gradient).
    pub flag: Option<String>,
}

impl TrainRecord {
    /// CSV with fixed columns: t, loss, test_error, then align_ve_j for
    /// every filter, then align_vd_j. Floats carry 17 significant digits;
    /// test_error is empty when no eval set was used.
    pub fn to_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let filters = self.steps.first().map_or(0, |s| s.align_ve.len());
        let mut header = vec!["t".to_string(), "loss".into(), "test_error".into()];
        for j in 0..filters {
            header.push(format!("align_ve_{j}"));
        }
        for j in 0..filters {
            header.push(format!("align_vd_{j}"));
        }
        w.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![
                s.t.to_string(),
                sig17(s.loss),
                s.test_error.map(sig17).unwrap_or_default(),
            ];
            row.extend(s.align_ve.iter().map(|&a| sig17(a)));
            row.extend(s.align_vd.iter().map(|&a| sig17(a)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.to_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

fn updated(model: &CnnModel, grad: &GradientMatrix, scale: f64) -> CnnModel {
    let mut next = model.clone();
    for (w, g) in next.weights_mut().iter_mut().zip(grad.entries()) {
        *w += scale * g;
    }
    next
}

pub fn gd_step(model: &CnnModel, dataset: &Dataset, eta: f64) -> Result<CnnModel> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidConfig(format!("eta must be positive, got {eta}")));
    }
    let g = cnn::grad_full(model, dataset)?;
    Ok(updated(model, &g, -eta))
}

/// One SAM step: ascend by `rho_t * grad` with `rho_t = rho / ||grad||_F`
/// (all filters jointly), then descend along the gradient taken at the
/// perturbed weights.
pub fn sam_step(
    model: &CnnModel,
    dataset: &Dataset,
    eta: f64,
    rho: f64,
) -> Result<(CnnModel, SamStepTrace)> {
    if !(eta.is_finite() && eta > 0.0) || !(rho.is_finite() && rho > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "SAM needs eta > 0 and rho > 0, got eta = {eta}, rho = {rho}"
        )));
    }
    let g = cnn::grad_full(model, dataset)?;
    if g.frobenius_norm == 0.0 {
        return Err(Error::ZeroGradient);
    }
    let rho_t = rho / g.frobenius_norm;
    let perturbed = updated(model, &g, rho_t);
    let perturbed_grad = cnn::grad_full(&perturbed, dataset)?;
    let next = updated(model, &perturbed_grad, -eta);
    Ok((
        next,
        SamStepTrace {
            rho_t,
            perturbed_weights: perturbed,
            perturbed_grad,
        },
    ))
}

/// Draws a batch's sorted index list. `strict_strata` enforces the exact
/// integrality the stratified analysis assumes; with it off, stratum sizes
/// are rounded (nearest fast-block size, remainder to the other block),
/// which callers use for sweeps where exact proportions are unattainable.
pub(crate) fn draw_batch_indices(
    rng: &mut ChaCha8Rng,
    dataset: &Dataset,
    batch: usize,
    sampling: Sampling,
    strict_strata: bool,
) -> Result<Vec<usize>> {
    let size = dataset.len();
    let mut indices = match sampling {
        Sampling::WithoutReplacement => {
            if batch == size {
                (0..size).collect()
            } else {
                sample(rng, size, batch).into_vec()
            }
        }
        Sampling::WithReplacement => (0..batch).map(|_| rng.random_range(0..size)).collect(),
        Sampling::Stratified => {
            let fast: Vec<usize> = (0..size)
                .filter(|&i| dataset.points[i].feature_kind == FeatureKind::Fast)
                .collect();
            let slow: Vec<usize> = (0..size)
                .filter(|&i| dataset.points[i].feature_kind == FeatureKind::Slow)
                .collect();
            let exact = batch as f64 * fast.len() as f64 / size as f64;
            let b1 = if strict_strata {
                if !(batch * fast.len()).is_multiple_of(size)
                    || !(batch * slow.len()).is_multiple_of(size)
                {
                    return Err(Error::InvalidStrata {
                        batch,
                        block: fast.len(),
                        size,
                        exact,
                    });
                }
                batch * fast.len() / size
            } else {
                (exact.round() as usize).min(batch)
            };
            let b2 = batch - b1;
            if b1 > fast.len() || b2 > slow.len() {
                return Err(Error::InvalidStrata {
                    batch,
                    block: fast.len(),
                    size,
                    exact,
                });
            }
            let mut picked: Vec<usize> =
                sample(rng, fast.len(), b1).into_iter().map(|i| fast[i]).collect();
            picked.extend(sample(rng, slow.len(), b2).into_iter().map(|i| slow[i]));
            picked
        }
    };
    indices.sort_unstable();
    Ok(indices)
}

/// Mini-batch view of a dataset: shares patch storage with the source.
pub(crate) fn batch_view(dataset: &Dataset, indices: &[usize]) -> Dataset {
    Dataset {
        points: indices.iter().map(|&i| dataset.points[i].clone()).collect(),
        params: dataset.params.clone(),
        basis: dataset.basis.clone(),
        seed: dataset.seed,
        kind: dataset.kind,
    }
}

/// One SGD step. Returns the updated model and the sorted batch indices.
/// A full WithoutReplacement batch reproduces [`gd_step`] bitwise.
pub fn sgd_step(
    model: &CnnModel,
    dataset: &Dataset,
    eta: f64,
    batch: usize,
    sampling: Sampling,
    seed: u64,
) -> Result<(CnnModel, Vec<usize>)> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidConfig(format!("eta must be positive, got {eta}")));
    }
    if batch == 0 || batch > dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "batch must be in 1..={}, got {batch}",
            dataset.len()
        )));
    }
    let mut rng = substream(seed, "sgd", 0);
    let indices = draw_batch_indices(&mut rng, dataset, batch, sampling, true)?;
    let view = batch_view(dataset, &indices);
    let g = cnn::grad_full(model, &view)?;
    Ok((updated(model, &g, -eta), indices))
}

/// 0-1 error of `sign(f)` against labels; `f = 0` counts as an error.
pub fn zero_one_error(model: &CnnModel, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let wrong = dataset
        .points
        .iter()
        .filter(|p| {
            let f = cnn::forward(model, p);
            let pred = if f > 0.0 {
                1.0
            } else if f < 0.0 {
                -1.0
            } else {
                0.0
            };
            pred != p.y()
        })
        .count();
    Ok(wrong as f64 / dataset.len() as f64)
}

fn snapshot(
    t: usize,
    model: &CnnModel,
    dataset: &Dataset,
    basis: &FeatureBasis,
    record_noise: bool,
    eval_set: Option<&Dataset>,
) -> Result<StepRecord> {
    let align_ve: Vec<f64> = (0..model.filters())
        .map(|j| dot(model.filter(j), &basis.v_e))
        .collect();
    let align_vd: Vec<f64> = (0..model.filters())
        .map(|j| dot(model.filter(j), &basis.v_d))
        .collect();
    let noise_align = if record_noise {
        let reps = dataset.distinct_noise_representatives();
        Some(
            (0..model.filters())
                .map(|j| {
                    reps.iter()
                        .map(|&i| dot(model.filter(j), dataset.points[i].noise_patch()).abs())
                        .sum::<f64>()
                        / reps.len() as f64
                })
                .collect(),
        )
    } else {
        None
    };
    let test_error = eval_set.map(|e| zero_one_error(model, e)).transpose()?;
    Ok(StepRecord {
        t,
        loss: cnn::loss(model, dataset)?,
        align_ve,
        align_vd,
        noise_align,
        test_error,
    })
}

/// Runs `config.steps` optimizer steps, recording state at t = 0 and after
/// every step (`steps + 1` records). SGD derives one batch seed per step
/// from `seed`; a SAM zero gradient stops the run early with a flag on the
/// record instead of an error.
pub fn train(
    model: &CnnModel,
    dataset: &Dataset,
    config: &OptimizerConfig,
    basis: &FeatureBasis,
    record_noise: bool,
    eval_set: Option<&Dataset>,
    seed: u64,
) -> Result<(CnnModel, TrainRecord)> {
    config.validate(dataset.len())?;
    let mut model = model.clone();
    let mut record = TrainRecord {
        steps: Vec::with_capacity(config.steps + 1),
        seed,
        flag: None,
    };
    record
        .steps
        .push(snapshot(0, &model, dataset, basis, record_noise, eval_set)?);
    let mut eta = config.eta;
    for t in 1..=config.steps {
        if let Some(decay) = config.decay {
            if decay.every > 0 && t % decay.every == 0 {
                eta *= decay.factor;
            }
        }
        match config.method {
            Method::Gd => model = gd_step(&model, dataset, eta)?,
            Method::Sam => match sam_step(&model, dataset, eta, config.rho) {
                Ok((next, _)) => model = next,
                Err(Error::ZeroGradient) => {
                    record.flag = Some(format!("zero gradient at step {t}; SAM stopped"));
                    break;
                }
                Err(e) => return Err(e),
            },
            Method::Sgd => {
                let step_seed = derive_seed(seed, "sgd-step", t as u64);
                let batch = config.batch.expect("validated above");
                let (next, _) =
                    sgd_step(&model, dataset, eta, batch, config.sampling, step_seed)?;
                model = next;
            }
        }
        record
            .steps
            .push(snapshot(t, &model, dataset, basis, record_noise, eval_set)?);
    }
    Ok((model, record))
}
