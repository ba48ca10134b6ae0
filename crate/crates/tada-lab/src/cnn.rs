//! Two-layer CNN with cubic activation on patch inputs.
//!
//! `f(x; W) = sum_j sum_p <w_j, x^(p)>^3`, trained with the empirical
//! logistic loss. Besides the exact analytic gradient this module carries a
//! finite-difference oracle and the closed-form feature/noise gradient
//! projections used by the analysis layer.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{axpy, dot, norm_sq};
use crate::rng::substream;
use crate::synthdata::{DataPoint, Dataset, FeatureKind};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub sigma_0: f64,
    pub seed: u64,
}

/// Weight matrix, one column of length `dim` per filter.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    dim: usize,
    filters: usize,
    weights: Vec<f64>,
    pub init: Option<InitConfig>,
}

impl CnnModel {
    pub fn from_weights(dim: usize, filters: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != dim * filters {
            return Err(Error::ShapeError {
                expected: dim * filters,
                got: weights.len(),
            });
        }
        Ok(CnnModel {
            dim,
            filters,
            weights,
            init: None,
        })
    }

    pub fn zero(dim: usize, filters: usize) -> Self {
        CnnModel {
            dim,
            filters,
            weights: vec![0.0; dim * filters],
            init: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn filter(&self, j: usize) -> &[f64] {
        &self.weights[j * self.dim..(j + 1) * self.dim]
    }

    pub fn filter_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.weights[j * self.dim..(j + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }
}

pub fn init_model(dim: usize, filters: usize, init: InitConfig) -> Result<CnnModel> {
    if dim == 0 || filters == 0 {
        return Err(Error::InvalidConfig(
            "model needs dim >= 1 and filters >= 1".into(),
        ));
    }
    if !(init.sigma_0.is_finite() && init.sigma_0 >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "sigma_0 must be finite and nonnegative, got {}",
            init.sigma_0
        )));
    }
    let mut weights = Vec::with_capacity(dim * filters);
    for j in 0..filters {
        let mut rng: ChaCha8Rng = substream(init.seed, "init", j as u64);
        for _ in 0..dim {
            let g: f64 = rng.sample(StandardNormal);
            weights.push(g * init.sigma_0);
        }
    }
    Ok(CnnModel {
        dim,
        filters,
        weights,
        init: Some(init),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientMatrix {
    dim: usize,
    filters: usize,
    entries: Vec<f64>,
    pub frobenius_norm: f64,
}

impl GradientMatrix {
    pub(crate) fn new(dim: usize, filters: usize, entries: Vec<f64>) -> Self {
        debug_assert_eq!(entries.len(), dim * filters);
        let frobenius_norm = norm_sq(&entries).sqrt();
        GradientMatrix {
            dim,
            filters,
            entries,
            frobenius_norm,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.entries[j * self.dim..(j + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Per-point network output; fills `scores[p * filters + j] = <w_j, x^(p)>`.
fn point_scores(model: &CnnModel, point: &DataPoint, scores: &mut Vec<f64>) -> f64 {
    scores.clear();
    let mut f = 0.0;
    for patch in &point.patches {
        debug_assert_eq!(patch.len(), model.dim);
        for j in 0..model.filters {
            let s = dot(model.filter(j), patch);
            scores.push(s);
            f += s * s * s;
        }
    }
    f
}

pub fn forward(model: &CnnModel, point: &DataPoint) -> f64 {
    let mut scores = Vec::with_capacity(point.patches.len() * model.filters);
    point_scores(model, point, &mut scores)
}

/// `l = sigmoid(-y f(x; W))`, overflow-safe.
pub fn logit(model: &CnnModel, point: &DataPoint) -> f64 {
    sigmoid(-point.y() * forward(model, point))
}

pub(crate) fn check_dims(model: &CnnModel, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.dim() != model.dim {
        return Err(Error::ShapeError {
            expected: model.dim,
            got: dataset.dim(),
        });
    }
    Ok(())
}

/// Mean logistic loss `(1/M) sum_i log(1 + exp(-y_i f_i))`.
///
/// Per-point terms are reduced in value order, so the result depends only
/// on the multiset of terms: permuting the dataset cannot change it.
pub fn loss(model: &CnnModel, dataset: &Dataset) -> Result<f64> {
    check_dims(model, dataset)?;
    let mut scores = Vec::new();
    let mut terms: Vec<f64> = dataset
        .points
        .iter()
        .map(|p| softplus(-p.y() * point_scores(model, p, &mut scores)))
        .collect();
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>() / dataset.len() as f64)
}

/// Full loss gradient, one column per filter:
/// `-(1/M) sum_i l_i y_i sum_p 3 <w_j, x_i^(p)>^2 x_i^(p)`.
///
/// Accumulation order is fixed (points outermost, then patches, then
/// filters) so results are reproducible across runs.
pub fn grad_full(model: &CnnModel, dataset: &Dataset) -> Result<GradientMatrix> {
    check_dims(model, dataset)?;
    let m = dataset.len() as f64;
    let mut entries = vec![0.0; model.dim * model.filters];
    let mut scores = Vec::with_capacity(2 * model.filters);
    for point in &dataset.points {
        let y = point.y();
        let f = point_scores(model, point, &mut scores);
        let l = sigmoid(-y * f);
        let c0 = -3.0 * l * y / m;
        for (p, patch) in point.patches.iter().enumerate() {
            for j in 0..model.filters {
                let s = scores[p * model.filters + j];
                let column = &mut entries[j * model.dim..(j + 1) * model.dim];
                axpy(c0 * s * s, patch, column);
            }
        }
    }
    Ok(GradientMatrix::new(model.dim, model.filters, entries))
}

/// Gradient of a single example's (unaveraged) loss, same layout as
/// [`GradientMatrix`] entries. `grad_full` equals the mean of these over
/// the dataset.
pub(crate) fn example_gradient(model: &CnnModel, point: &DataPoint, out: &mut [f64]) {
    debug_assert_eq!(out.len(), model.dim * model.filters);
    out.fill(0.0);
    let mut scores = Vec::with_capacity(point.patches.len() * model.filters);
    let y = point.y();
    let f = point_scores(model, point, &mut scores);
    let l = sigmoid(-y * f);
    let c0 = -3.0 * l * y;
    for (p, patch) in point.patches.iter().enumerate() {
        for j in 0..model.filters {
            let s = scores[p * model.filters + j];
            let column = &mut out[j * model.dim..(j + 1) * model.dim];
            axpy(c0 * s * s, patch, column);
        }
    }
}

/// Central finite differences of [`loss`], entry by entry. Independent
/// oracle for [`grad_full`]; O(dim * filters) loss evaluations.
pub fn grad_finite_difference(
    model: &CnnModel,
    dataset: &Dataset,
    step: f64,
) -> Result<GradientMatrix> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "step must be finite and positive, got {step}"
        )));
    }
    check_dims(model, dataset)?;
    let mut probe = model.clone();
    let mut entries = vec![0.0; model.dim * model.filters];
    for (e, slot) in entries.iter_mut().enumerate() {
        let w = model.weights[e];
        probe.weights[e] = w + step;
        let up = loss(&probe, dataset)?;
        probe.weights[e] = w - step;
        let down = loss(&probe, dataset)?;
        probe.weights[e] = w;
        *slot = (up - down) / (2.0 * step);
    }
    Ok(GradientMatrix::new(model.dim, model.filters, entries))
}

/// Closed-form feature alignment of the gradient,
/// `<grad_j, v> = -(3 beta^3 / M) <w_j, v>^2 sum_{i in class} l_i`.
/// Exact in the idealized noise modes, where noise patches carry no
/// component along the feature directions.
pub fn feature_gradient(
    model: &CnnModel,
    dataset: &Dataset,
    j: usize,
    which: FeatureKind,
) -> Result<f64> {
    check_dims(model, dataset)?;
    if j >= model.filters {
        return Err(Error::IndexError {
            index: j,
            len: model.filters,
        });
    }
    let (beta, v) = match which {
        FeatureKind::Fast => (dataset.params.beta_e, &dataset.basis.v_e),
        FeatureKind::Slow => (dataset.params.beta_d, &dataset.basis.v_d),
    };
    let s = dot(model.filter(j), v);
    let mut logit_sum = 0.0;
    let mut scores = Vec::new();
    for point in &dataset.points {
        if point.feature_kind == which {
            let f = point_scores(model, point, &mut scores);
            logit_sum += sigmoid(-point.y() * f);
        }
    }
    let m = dataset.len() as f64;
    Ok(-(3.0 * beta.powi(3) / m) * s * s * logit_sum)
}

/// Closed-form noise alignment of the gradient for the noise of point `i`,
/// `<grad_j, xi_i> = -(3 m_i / M) l_i y_i <w_j, xi_i>^2 ||xi_i||^2`,
/// where `m_i` is the multiset count of that noise in the dataset (replicas
/// contribute the factor k). Exact in mutually orthogonal noise mode.
pub fn noise_gradient(model: &CnnModel, dataset: &Dataset, j: usize, i: usize) -> Result<f64> {
    check_dims(model, dataset)?;
    if j >= model.filters {
        return Err(Error::IndexError {
            index: j,
            len: model.filters,
        });
    }
    if i >= dataset.len() {
        return Err(Error::IndexError {
            index: i,
            len: dataset.len(),
        });
    }
    let point = &dataset.points[i];
    let mult = dataset
        .points
        .iter()
        .filter(|p| p.noise_id == point.noise_id)
        .count() as f64;
    let xi = point.noise_patch();
    let s = dot(model.filter(j), xi);
    let l = logit(model, point);
    let m = dataset.len() as f64;
    // Multiplicity multiplies last: a replicated noise is bitwise k times
    // its single-copy term.
    Ok(-(3.0 / m) * l * point.y() * s * s * norm_sq(xi) * mult)
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    dim: usize,
    filters: usize,
    sigma_0: Option<f64>,
    seed: Option<u64>,
}

const MODEL_MANIFEST: &str = "model.json";
const WEIGHTS_BLOB: &str = "weights.f64le";

impl CnnModel {
    /// JSON header plus a little-endian f64 blob of the weights,
    /// column-major by filter. Bit-exact round trip.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = ModelManifest {
            dim: self.dim,
            filters: self.filters,
            sigma_0: self.init.map(|i| i.sigma_0),
            seed: self.init.map(|i| i.seed),
        };
        fs::write(
            dir.join(MODEL_MANIFEST),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        let mut blob = Vec::with_capacity(self.weights.len() * 8);
        for x in &self.weights {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(dir.join(WEIGHTS_BLOB), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<CnnModel> {
        let manifest: ModelManifest =
            serde_json::from_slice(&fs::read(dir.join(MODEL_MANIFEST))?)?;
        let blob = fs::read(dir.join(WEIGHTS_BLOB))?;
        let expected = manifest.dim * manifest.filters * 8;
        if blob.len() != expected {
            return Err(Error::ShapeError {
                expected,
                got: blob.len(),
            });
        }
        let weights: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let init = match (manifest.sigma_0, manifest.seed) {
            (Some(sigma_0), Some(seed)) => Some(InitConfig { sigma_0, seed }),
            _ => None,
        };
        Ok(CnnModel {
            dim: manifest.dim,
            filters: manifest.filters,
            weights,
            init,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{
        make_feature_basis, sample_dataset, upsample, BasisMode, DistributionParams, NoiseMode,
        Provenance,
    };
    use proptest::prelude::*;
    use std::sync::Arc;

    fn point(patches: Vec<Vec<f64>>, label: i8) -> DataPoint {
        DataPoint {
            patches: patches.into_iter().map(Arc::from).collect(),
            label,
            feature_kind: FeatureKind::Fast,
            noise_id: 0,
            provenance: Provenance::Original,
        }
    }

    fn small_dataset(n: usize, dim: usize, seed: u64) -> Dataset {
        let params = DistributionParams {
            beta_e: 1.5,
            beta_d: 1.0,
            alpha: 0.5,
            sigma_p: 1.0,
            dim,
            patches: 2,
            n,
            noise_mode: NoiseMode::MutuallyOrthogonal,
        };
        let basis = make_feature_basis(dim, BasisMode::Canonical, 0).unwrap();
        sample_dataset(&params, &basis, seed, true).unwrap()
    }

    #[test]
    fn zero_model_forwards_zero_and_loss_is_log2() {
        let d = small_dataset(8, 24, 1);
        let m = CnnModel::zero(24, 3);
        for p in &d.points {
            assert_eq!(forward(&m, p), 0.0);
            assert_eq!(logit(&m, p), 0.5);
        }
        assert!((loss(&m, &d).unwrap() - std::f64::consts::LN_2).abs() <= 1e-15);
    }

    #[test]
    fn hand_forward_cubic() {
        // J=1, w = 2 v_e, feature patch v_e, noise on a disjoint axis.
        let mut w = vec![0.0; 6];
        w[0] = 2.0;
        let m = CnnModel::from_weights(6, 1, w).unwrap();
        let mut feat = vec![0.0; 6];
        feat[0] = 1.0;
        let mut noise = vec![0.0; 6];
        noise[4] = 0.7;
        let p = point(vec![feat.clone(), noise], 1);
        assert_eq!(forward(&m, &p), 8.0);
        // Negating the feature patch sign negates the output.
        let mut neg = feat;
        neg[0] = -1.0;
        let mut noise2 = vec![0.0; 6];
        noise2[4] = 0.7;
        let q = point(vec![neg, noise2], -1);
        assert_eq!(forward(&m, &q), -8.0);
    }

    #[test]
    fn logit_tail_and_oracle() {
        // f = 50 via w = e0 * 50^(1/3).
        let c = 50f64.cbrt();
        let m = CnnModel::from_weights(3, 1, vec![c, 0.0, 0.0]).unwrap();
        let p = point(vec![vec![1.0, 0.0, 0.0], vec![0.0; 3]], 1);
        let l = logit(&m, &p);
        assert!(l > 0.0 && l < 2e-22, "l = {l}");
        // f = 1 gives sigmoid(-1).
        let m1 = CnnModel::from_weights(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((logit(&m1, &p) - 0.2689414213699951).abs() <= 1e-15);
    }

    #[test]
    fn single_point_loss_oracle() {
        // y f = 3 -> log(1 + e^-3).
        let dim = 8;
        let mut w = vec![0.0; dim];
        w[0] = 3f64.cbrt();
        let m = CnnModel::from_weights(dim, 1, w).unwrap();
        let mut d = small_dataset(2, dim, 0);
        let mut feat = vec![0.0; dim];
        feat[0] = 1.0;
        d.points = vec![point(vec![feat, vec![0.0; dim]], 1)];
        assert!((loss(&m, &d).unwrap() - 0.04858735157374206).abs() <= 1e-12);
    }

    #[test]
    fn loss_is_exactly_permutation_invariant() {
        let d = small_dataset(16, 32, 7);
        let m = init_model(32, 4, InitConfig { sigma_0: 0.3, seed: 5 }).unwrap();
        let before = loss(&m, &d).unwrap();
        let mut shuffled = d.clone();
        shuffled.points.reverse();
        shuffled.points.swap(0, 7);
        let after = loss(&m, &shuffled).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut d = small_dataset(4, 16, 0);
        d.points.clear();
        let m = CnnModel::zero(16, 2);
        assert!(matches!(loss(&m, &d), Err(Error::EmptyDataset)));
        assert!(matches!(grad_full(&m, &d), Err(Error::EmptyDataset)));
    }

    #[test]
    fn zero_model_has_zero_gradient() {
        let d = small_dataset(6, 16, 3);
        let m = CnnModel::zero(16, 2);
        let g = grad_full(&m, &d).unwrap();
        assert!(g.entries().iter().all(|&x| x == 0.0));
        assert_eq!(g.frobenius_norm, 0.0);
        let fd = grad_finite_difference(&m, &d, 1e-5).unwrap();
        assert!(fd.entries().iter().all(|&x| x.abs() <= 1e-9));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3u64 {
            let d = small_dataset(10, 20, seed);
            let m = init_model(20, 3, InitConfig { sigma_0: 0.4, seed }).unwrap();
            let g = grad_full(&m, &d).unwrap();
            let fd = grad_finite_difference(&m, &d, 1e-5).unwrap();
            let diff: f64 = g
                .entries()
                .iter()
                .zip(fd.entries())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(
                diff / g.frobenius_norm.max(1.0) <= 1e-6,
                "seed {seed}: rel err {}",
                diff / g.frobenius_norm.max(1.0)
            );
        }
    }

    #[test]
    fn finite_differences_are_second_order() {
        let d = small_dataset(8, 12, 2);
        let m = init_model(12, 2, InitConfig { sigma_0: 0.5, seed: 9 }).unwrap();
        let g = grad_full(&m, &d).unwrap();
        let err = |step: f64| {
            let fd = grad_finite_difference(&m, &d, step).unwrap();
            g.entries()
                .iter()
                .zip(fd.entries())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let coarse = err(2e-3);
        let fine = err(1e-3);
        let ratio = coarse / fine;
        assert!((2.5..6.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn upsampled_gradient_equals_explicit_duplicates() {
        let base = small_dataset(8, 24, 4);
        let up = upsample(&base, 2).unwrap();
        let mut explicit = base.clone();
        for p in &base.points {
            if p.feature_kind == FeatureKind::Slow {
                let mut dup = p.clone();
                dup.patches = p
                    .patches
                    .iter()
                    .map(|a| Arc::from(a.iter().copied().collect::<Vec<f64>>()))
                    .collect();
                dup.provenance = Provenance::UpsampledCopy;
                explicit.points.push(dup);
            }
        }
        let m = init_model(24, 3, InitConfig { sigma_0: 0.2, seed: 1 }).unwrap();
        let a = grad_full(&m, &up).unwrap();
        let b = grad_full(&m, &explicit).unwrap();
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }

    #[test]
    fn feature_gradient_closed_form_matches_projection() {
        let d = small_dataset(10, 32, 6);
        let m = init_model(32, 4, InitConfig { sigma_0: 0.3, seed: 2 }).unwrap();
        let g = grad_full(&m, &d).unwrap();
        for j in 0..4 {
            for which in [FeatureKind::Fast, FeatureKind::Slow] {
                let v = match which {
                    FeatureKind::Fast => &d.basis.v_e,
                    FeatureKind::Slow => &d.basis.v_d,
                };
                let closed = feature_gradient(&m, &d, j, which).unwrap();
                let proj = dot(g.column(j), v);
                assert!(
                    (closed - proj).abs() <= 1e-10 * proj.abs().max(1e-3),
                    "j={j} {which:?}: {closed} vs {proj}"
                );
            }
        }
        let zero = CnnModel::zero(32, 4);
        assert_eq!(feature_gradient(&zero, &d, 0, FeatureKind::Fast).unwrap(), 0.0);
    }

    #[test]
    fn slow_feature_gradient_vanishes_when_beta_d_is_zero() {
        let params = DistributionParams {
            beta_e: 1.5,
            beta_d: 0.0,
            alpha: 0.5,
            sigma_p: 1.0,
            dim: 16,
            patches: 2,
            n: 8,
            noise_mode: NoiseMode::MutuallyOrthogonal,
        };
        let basis = make_feature_basis(16, BasisMode::Canonical, 0).unwrap();
        let d = sample_dataset(&params, &basis, 3, true).unwrap();
        let m = init_model(16, 2, InitConfig { sigma_0: 0.4, seed: 8 }).unwrap();
        for j in 0..2 {
            assert_eq!(feature_gradient(&m, &d, j, FeatureKind::Slow).unwrap(), 0.0);
        }
    }

    #[test]
    fn noise_gradient_hand_oracle() {
        // Two mirrored filters force f = 0, hence l = 1/2 exactly, on every
        // point. Filter 0 has <w, xi> = 2 against a noise with norm^2 = 4.
        let dim = 16;
        let mut w = vec![0.0; 2 * dim];
        w[5] = 1.0;
        w[dim + 5] = -1.0;
        let m = CnnModel::from_weights(dim, 2, w).unwrap();
        let mut d = small_dataset(10, dim, 0);
        for (i, p) in d.points.iter_mut().enumerate() {
            let mut noise = vec![0.0; dim];
            if i == 0 {
                noise[5] = 2.0;
            }
            *p = DataPoint {
                patches: vec![Arc::from(vec![0.0; dim]), Arc::from(noise)],
                label: 1,
                feature_kind: FeatureKind::Slow,
                noise_id: i as u64,
                provenance: Provenance::Original,
            };
        }
        let g = noise_gradient(&m, &d, 0, 0).unwrap();
        assert!((g.abs() - 2.4).abs() <= 1e-12, "got {g}");
        // Orthogonal filter sees zero.
        let mut w2 = vec![0.0; dim];
        w2[3] = 1.0;
        let m2 = CnnModel::from_weights(dim, 1, w2).unwrap();
        assert_eq!(noise_gradient(&m2, &d, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn replicated_noise_gradient_is_exactly_k_times_generated() {
        let base = small_dataset(6, 32, 5);
        let up = upsample(&base, 3).unwrap();
        let gen = crate::synthdata::generate(
            &base,
            3,
            &crate::synthdata::GenerationNoiseParams::matching(&base.params),
            11,
        )
        .unwrap();
        assert_eq!(up.len(), gen.len());
        let m = init_model(32, 2, InitConfig { sigma_0: 0.3, seed: 4 }).unwrap();
        for (i, p) in base.points.iter().enumerate() {
            if p.feature_kind != FeatureKind::Slow {
                continue;
            }
            for j in 0..2 {
                let u = noise_gradient(&m, &up, j, i).unwrap();
                let g = noise_gradient(&m, &gen, j, i).unwrap();
                assert_eq!(u, 3.0 * g);
            }
        }
    }

    #[test]
    fn gradient_decomposes_into_feature_and_noise_parts() {
        let d = small_dataset(8, 32, 9);
        let m = init_model(32, 4, InitConfig { sigma_0: 0.3, seed: 3 }).unwrap();
        let g = grad_full(&m, &d).unwrap();
        let reps = d.distinct_noise_representatives();
        for j in 0..4 {
            let mut rebuilt = vec![0.0; 32];
            axpy(
                feature_gradient(&m, &d, j, FeatureKind::Fast).unwrap(),
                &d.basis.v_e,
                &mut rebuilt,
            );
            axpy(
                feature_gradient(&m, &d, j, FeatureKind::Slow).unwrap(),
                &d.basis.v_d,
                &mut rebuilt,
            );
            for &i in &reps {
                let xi = d.points[i].noise_patch();
                let c = noise_gradient(&m, &d, j, i).unwrap() / norm_sq(xi);
                axpy(c, xi, &mut rebuilt);
            }
            let err: f64 = rebuilt
                .iter()
                .zip(g.column(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(err <= 1e-9 * g.frobenius_norm.max(1e-12), "j={j} err={err}");
        }
    }

    #[test]
    fn filter_index_out_of_range() {
        let d = small_dataset(4, 16, 0);
        let m = CnnModel::zero(16, 2);
        assert!(matches!(
            feature_gradient(&m, &d, 2, FeatureKind::Fast),
            Err(Error::IndexError { index: 2, len: 2 })
        ));
        assert!(matches!(
            noise_gradient(&m, &d, 0, 4),
            Err(Error::IndexError { index: 4, len: 4 })
        ));
    }

    #[test]
    fn init_statistics() {
        // Pooled over entries and resamples: 10^4 draws of a 64 x 16 model.
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for seed in 0..10_000u64 {
            let m = init_model(64, 16, InitConfig { sigma_0: 0.01, seed }).unwrap();
            for &w in m.weights() {
                sum += w;
                sum_sq += w * w;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = sum_sq / count as f64 - mean * mean;
        // sd of the pooled mean is sigma_0 / sqrt(10^4 * 1024) ~ 3e-6.
        assert!(mean.abs() < 2e-5);
        assert!((var / 1e-4 - 1.0).abs() < 0.05, "var = {var}");
        // sigma_0 = 0 gives the zero model.
        let z = init_model(8, 2, InitConfig { sigma_0: 0.0, seed: 0 }).unwrap();
        assert!(z.weights().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn no_overflow_at_extreme_margins() {
        let c = 1000f64.cbrt();
        let m = CnnModel::from_weights(3, 1, vec![c, 0.0, 0.0]).unwrap();
        for label in [1i8, -1] {
            let p = point(vec![vec![1.0, 0.0, 0.0], vec![0.0; 3]], label);
            let f = forward(&m, &p);
            assert!((f.abs() - 1000.0).abs() < 1e-9);
            // The sigmoid saturates to an endpoint here; it must do so
            // without NaN or infinity.
            let l = logit(&m, &p);
            assert!(l.is_finite() && (0.0..=1.0).contains(&l));
            assert!(softplus(-p.y() * f).is_finite());
        }
    }

    #[test]
    fn model_round_trips_bit_exactly() {
        let m = init_model(24, 5, InitConfig { sigma_0: 0.07, seed: 21 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let loaded = CnnModel::load(dir.path()).unwrap();
        assert_eq!(loaded.dim(), 24);
        assert_eq!(loaded.filters(), 5);
        assert_eq!(loaded.init, m.init);
        for (a, b) in m.weights().iter().zip(loaded.weights()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest! {
        #[test]
        fn global_sign_flip_is_an_exact_symmetry(
            seed in 0u64..1000,
            half_n in 1usize..4,
            filters in 1usize..4,
        ) {
            let dim = 16;
            let d = small_dataset(2 * half_n, dim, seed);
            let m = init_model(dim, filters, InitConfig { sigma_0: 0.3, seed }).unwrap();
            let mut flipped = d.clone();
            for p in &mut flipped.points {
                p.label = -p.label;
                p.patches = p
                    .patches
                    .iter()
                    .map(|a| Arc::from(a.iter().map(|x| -x).collect::<Vec<f64>>()))
                    .collect();
            }
            for (a, b) in d.points.iter().zip(&flipped.points) {
                prop_assert_eq!(forward(&m, b).to_bits(), (-forward(&m, a)).to_bits());
            }
            let l0 = loss(&m, &d).unwrap();
            let l1 = loss(&m, &flipped).unwrap();
            prop_assert_eq!(l0.to_bits(), l1.to_bits());
            let g0 = grad_full(&m, &d).unwrap();
            let g1 = grad_full(&m, &flipped).unwrap();
            for (a, b) in g0.entries().iter().zip(g1.entries()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
