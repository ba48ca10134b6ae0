//! Planted-feature datasets and their augmented variants.
//!
//! Every data point is `P = 2` patches of dimension `d`: one feature patch
//! `beta * y * v` (the fast direction `v_e` with strength `beta_e`, present
//! with probability `alpha`, otherwise the slow direction `v_d` with
//! strength `beta_d`) and one noise patch drawn from `N(0, (sigma_p^2/d) I)`.
//!
//! Augmentation produces two variants of a base dataset:
//! * [`upsample`]: every slow point appears `k` times total, replicas
//!   sharing the source's noise (bit-identical, shared storage);
//! * [`generate`]: every slow point gains `k - 1` fresh points with the
//!   same feature patch but independent noise.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{axpy, dot, norm, scale};
use crate::rng::substream;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    Fast,
    Slow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    UpsampledCopy,
    Generated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisMode {
    Canonical,
    RandomOrthogonal,
}

/// How noise patches relate to the feature directions and to each other.
///
/// The theory's idealized setting assumes noises orthogonal to the features
/// with negligible noise-noise cross terms. `MutuallyOrthogonal` realizes
/// that exactly and is the default; `FeatureOrthogonal` only projects out
/// the two feature directions (used for large eval sets, where mutual
/// orthogonality is impossible); `Raw` leaves the Gaussian draws untouched
/// (robustness probes).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseMode {
    Raw,
    FeatureOrthogonal,
    #[default]
    MutuallyOrthogonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    Base,
    Upsampled { k: u32 },
    Generated { k: u32 },
}

impl DatasetKind {
    pub fn k(&self) -> u32 {
        match self {
            DatasetKind::Base => 1,
            DatasetKind::Upsampled { k } | DatasetKind::Generated { k } => *k,
        }
    }

    pub fn is_base(&self) -> bool {
        matches!(self, DatasetKind::Base)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionParams {
    /// Fast-feature strength, `beta_e > beta_d`.
    pub beta_e: f64,
    /// Slow-feature strength, `>= 0`.
    pub beta_d: f64,
    /// Probability of the fast feature.
    pub alpha: f64,
    /// Noise scale; each noise patch has `E||xi||^2 = sigma_p^2`.
    pub sigma_p: f64,
    /// Ambient dimension `d >= 3`.
    pub dim: usize,
    /// Patches per point, fixed to 2 in v1.
    pub patches: usize,
    /// Dataset size `N`.
    pub n: usize,
    #[serde(default)]
    pub noise_mode: NoiseMode,
}

impl DistributionParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 3 {
            return Err(Error::InvalidDimension {
                dim: self.dim,
                needed: 3,
            });
        }
        if !(self.beta_e.is_finite() && self.beta_e > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "beta_e must be finite and positive, got {}",
                self.beta_e
            )));
        }
        if !(self.beta_d.is_finite() && (0.0..self.beta_e).contains(&self.beta_d)) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= beta_d < beta_e, got beta_d = {}, beta_e = {}",
                self.beta_d, self.beta_e
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.sigma_p.is_finite() && self.sigma_p > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma_p must be finite and positive, got {}",
                self.sigma_p
            )));
        }
        if self.patches != 2 {
            return Err(Error::InvalidConfig(format!(
                "patches is fixed to 2 in v1, got {}",
                self.patches
            )));
        }
        if self.n == 0 {
            return Err(Error::InvalidConfig("n must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of slow points under `exact_alpha`, i.e. `(1 - alpha) * n`
    /// checked for integrality.
    pub fn slow_count(&self) -> Result<usize> {
        let exact = (1.0 - self.alpha) * self.n as f64;
        let rounded = exact.round();
        if (exact - rounded).abs() > 1e-9 {
            return Err(Error::InvalidAlpha {
                alpha: self.alpha,
                n: self.n,
                exact,
            });
        }
        Ok(rounded as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBasis {
    pub v_e: Vec<f64>,
    pub v_d: Vec<f64>,
}

impl FeatureBasis {
    pub fn dim(&self) -> usize {
        self.v_e.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.v_e.len() != self.v_d.len() {
            return Err(Error::ShapeError {
                expected: self.v_e.len(),
                got: self.v_d.len(),
            });
        }
        let tol = 1e-12;
        if (norm(&self.v_e) - 1.0).abs() > tol || (norm(&self.v_d) - 1.0).abs() > tol {
            return Err(Error::InvalidConfig("basis vectors must be unit norm".into()));
        }
        if dot(&self.v_e, &self.v_d).abs() > tol {
            return Err(Error::InvalidConfig("basis vectors must be orthogonal".into()));
        }
        Ok(())
    }
}

/// Parameters of the synthetic-generation noise `gamma ~ N(0, (sigma_gamma^2/d) I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationNoiseParams {
    pub sigma_gamma: f64,
    pub orthogonalize: bool,
}

impl GenerationNoiseParams {
    /// Generation noise as strong as the data noise, orthogonalized.
    pub fn matching(params: &DistributionParams) -> Self {
        GenerationNoiseParams {
            sigma_gamma: params.sigma_p,
            orthogonalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataPoint {
    /// `patches[0]` is the feature patch, `patches[1..]` the noise patches.
    pub patches: Vec<Arc<[f64]>>,
    /// Label, +1 or -1.
    pub label: i8,
    pub feature_kind: FeatureKind,
    /// Identity of the noise realization; upsampled replicas share it.
    pub noise_id: u64,
    pub provenance: Provenance,
}

impl DataPoint {
    pub fn y(&self) -> f64 {
        f64::from(self.label)
    }

    pub fn feature_patch(&self) -> &[f64] {
        &self.patches[0]
    }

    pub fn noise_patch(&self) -> &[f64] {
        &self.patches[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points: Vec<DataPoint>,
    pub params: DistributionParams,
    pub basis: FeatureBasis,
    pub seed: u64,
    pub kind: DatasetKind,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    /// Multiset count of each noise id.
    pub fn noise_multiplicities(&self) -> HashMap<u64, usize> {
        let mut counts = HashMap::new();
        for p in &self.points {
            *counts.entry(p.noise_id).or_insert(0) += 1;
        }
        counts
    }

    /// One representative point index per distinct noise id, in id order.
    pub fn distinct_noise_representatives(&self) -> Vec<usize> {
        let mut first: HashMap<u64, usize> = HashMap::new();
        for (i, p) in self.points.iter().enumerate() {
            first.entry(p.noise_id).or_insert(i);
        }
        let mut ids: Vec<(u64, usize)> = first.into_iter().collect();
        ids.sort_unstable();
        ids.into_iter().map(|(_, i)| i).collect()
    }
}

pub fn make_feature_basis(dim: usize, mode: BasisMode, seed: u64) -> Result<FeatureBasis> {
    if dim < 3 {
        return Err(Error::InvalidDimension { dim, needed: 3 });
    }
    match mode {
        BasisMode::Canonical => {
            let mut v_e = vec![0.0; dim];
            let mut v_d = vec![0.0; dim];
            v_e[0] = 1.0;
            v_d[1] = 1.0;
            Ok(FeatureBasis { v_e, v_d })
        }
        BasisMode::RandomOrthogonal => {
            let mut rng = substream(seed, "basis", 0);
            let g1 = gaussian_vec(&mut rng, dim, 1.0);
            let mut v_e = g1;
            let n1 = norm(&v_e);
            scale(1.0 / n1, &mut v_e);
            for attempt in 0..16 {
                let mut u = gaussian_vec(&mut substream(seed, "basis", 1 + attempt), dim, 1.0);
                for _ in 0..2 {
                    let c = dot(&u, &v_e);
                    axpy(-c, &v_e, &mut u);
                }
                let nu = norm(&u);
                if nu > 1e-9 {
                    scale(1.0 / nu, &mut u);
                    return Ok(FeatureBasis { v_e, v_d: u });
                }
            }
            Err(Error::OutOfRegime(
                "could not draw a second basis direction".into(),
            ))
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, entry_std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            g * entry_std
        })
        .collect()
}

/// State for drawing noises mutually orthogonal to the features and to
/// each other.
///
/// When the basis leaves free coordinates (exact zeros in both `v_e` and
/// `v_d`, e.g. the canonical basis), each noise occupies its own free
/// coordinate with magnitude equal to a raw draw's norm and a random sign;
/// all inner products between distinct noises and with the features are
/// then exact IEEE zeros. With a dense basis this falls back to
/// Gram-Schmidt, which is orthogonal only to within a few ulps.
enum MutualState {
    Coordinate { free: Vec<usize>, next: usize },
    GramSchmidt { family: Vec<Vec<f64>> },
}

impl MutualState {
    fn for_basis(basis: &FeatureBasis, existing: &[&[f64]], planned: usize) -> Result<Self> {
        let dim = basis.dim();
        let mut free: Vec<usize> = (0..dim)
            .filter(|&e| basis.v_e[e] == 0.0 && basis.v_d[e] == 0.0)
            .collect();
        let single_support: Option<Vec<usize>> = existing
            .iter()
            .map(|v| {
                let mut support = v.iter().enumerate().filter(|(_, x)| **x != 0.0);
                match (support.next(), support.next()) {
                    (Some((e, _)), None) => Some(e),
                    _ => None,
                }
            })
            .collect();
        if let Some(used) = single_support {
            if used.iter().all(|e| free.binary_search(e).is_ok()) {
                free.retain(|e| !used.contains(e));
                if free.len() >= planned {
                    return Ok(MutualState::Coordinate { free, next: 0 });
                }
            }
        }
        if dim < 3 + existing.len() + planned {
            return Err(Error::InvalidDimension {
                dim,
                needed: 2 + existing.len() + planned,
            });
        }
        let mut family = Vec::with_capacity(2 + existing.len() + planned);
        family.push(basis.v_e.clone());
        family.push(basis.v_d.clone());
        for v in existing {
            let mut u = v.to_vec();
            scale(1.0 / norm(&u), &mut u);
            family.push(u);
        }
        Ok(MutualState::GramSchmidt { family })
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> Result<Vec<f64>> {
        let raw = gaussian_vec(rng, dim, sigma / (dim as f64).sqrt());
        let target = norm(&raw);
        match self {
            MutualState::Coordinate { free, next } => {
                let coord = free[*next];
                *next += 1;
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let mut v = vec![0.0; dim];
                v[coord] = sign * target;
                Ok(v)
            }
            MutualState::GramSchmidt { family } => {
                let mut u = raw;
                for _ in 0..2 {
                    for q in family.iter() {
                        let c = dot(&u, q);
                        axpy(-c, q, &mut u);
                    }
                }
                let nu = norm(&u);
                if nu < 1e-9 * target {
                    return Err(Error::OutOfRegime(
                        "noise projection degenerated; raise dim".into(),
                    ));
                }
                scale(target / nu, &mut u);
                let mut unit = u.clone();
                scale(1.0 / target, &mut unit);
                family.push(unit);
                Ok(u)
            }
        }
    }
}

fn feature_orthogonal_noise(rng: &mut ChaCha8Rng, basis: &FeatureBasis, sigma: f64) -> Vec<f64> {
    let dim = basis.dim();
    let raw = gaussian_vec(rng, dim, sigma / (dim as f64).sqrt());
    let target = norm(&raw);
    let mut u = raw;
    for _ in 0..2 {
        let ce = dot(&u, &basis.v_e);
        axpy(-ce, &basis.v_e, &mut u);
        let cd = dot(&u, &basis.v_d);
        axpy(-cd, &basis.v_d, &mut u);
    }
    let nu = norm(&u);
    if nu > 0.0 {
        scale(target / nu, &mut u);
    }
    u
}

/// Samples a base dataset of `params.n` points.
///
/// With `exact_alpha` the first `alpha * n` points carry the fast feature
/// and the remaining `(1 - alpha) * n` (which must be integral) the slow
/// one; otherwise each point draws its feature kind independently.
pub fn sample_dataset(
    params: &DistributionParams,
    basis: &FeatureBasis,
    seed: u64,
    exact_alpha: bool,
) -> Result<Dataset> {
    params.validate()?;
    basis.validate()?;
    if basis.dim() != params.dim {
        return Err(Error::ShapeError {
            expected: params.dim,
            got: basis.dim(),
        });
    }

    let n = params.n;
    let kinds: Vec<FeatureKind> = if exact_alpha {
        let slow = params.slow_count()?;
        let fast = n - slow;
        (0..n)
            .map(|i| if i < fast { FeatureKind::Fast } else { FeatureKind::Slow })
            .collect()
    } else {
        (0..n)
            .map(|i| {
                if substream(seed, "kind", i as u64).random_bool(params.alpha) {
                    FeatureKind::Fast
                } else {
                    FeatureKind::Slow
                }
            })
            .collect()
    };

    let mut mutual = match params.noise_mode {
        NoiseMode::MutuallyOrthogonal => Some(MutualState::for_basis(basis, &[], n)?),
        _ => None,
    };

    let mut points = Vec::with_capacity(n);
    for (i, kind) in kinds.into_iter().enumerate() {
        let label: i8 = if substream(seed, "label", i as u64).random_bool(0.5) {
            1
        } else {
            -1
        };
        let mut noise_rng = substream(seed, "noise", i as u64);
        let noise = match params.noise_mode {
            NoiseMode::Raw => gaussian_vec(
                &mut noise_rng,
                params.dim,
                params.sigma_p / (params.dim as f64).sqrt(),
            ),
            NoiseMode::FeatureOrthogonal => {
                feature_orthogonal_noise(&mut noise_rng, basis, params.sigma_p)
            }
            NoiseMode::MutuallyOrthogonal => mutual
                .as_mut()
                .expect("state built above")
                .draw(&mut noise_rng, params.dim, params.sigma_p)?,
        };
        let (beta, v) = match kind {
            FeatureKind::Fast => (params.beta_e, &basis.v_e),
            FeatureKind::Slow => (params.beta_d, &basis.v_d),
        };
        let y = f64::from(label);
        let feature: Vec<f64> = v.iter().map(|x| beta * y * x).collect();
        points.push(DataPoint {
            patches: vec![Arc::from(feature), Arc::from(noise)],
            label,
            feature_kind: kind,
            noise_id: i as u64,
            provenance: Provenance::Original,
        });
    }

    Ok(Dataset {
        points,
        params: params.clone(),
        basis: basis.clone(),
        seed,
        kind: DatasetKind::Base,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentMode {
    Upsample,
    Generate,
}

/// Upsamples the slow points of a base dataset by factor `k`: originals
/// first, then `k - 1` replicas per slow point, grouped by source. Replicas
/// share the source's noise storage.
pub fn upsample(base: &Dataset, k: u32) -> Result<Dataset> {
    let slow = slow_indices(base);
    augment_selected(
        base,
        &slow,
        k,
        AugmentMode::Upsample,
        None,
        base.seed,
        DatasetKind::Upsampled { k },
    )
}

/// Replaces upsampling's replicas with freshly generated points: same
/// feature patch, independent noise, new noise ids.
pub fn generate(
    base: &Dataset,
    k: u32,
    gen: &GenerationNoiseParams,
    seed: u64,
) -> Result<Dataset> {
    let slow = slow_indices(base);
    augment_selected(
        base,
        &slow,
        k,
        AugmentMode::Generate,
        Some(gen),
        seed,
        DatasetKind::Generated { k },
    )
}

fn slow_indices(base: &Dataset) -> Vec<usize> {
    base.points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.feature_kind == FeatureKind::Slow)
        .map(|(i, _)| i)
        .collect()
}

/// Shared augmentation path: the selected points receive `k - 1` extra
/// copies each (replicas or generated), appended after the originals and
/// grouped by source in index order. `upsample`/`generate` are the
/// all-slow special cases.
pub(crate) fn augment_selected(
    base: &Dataset,
    indices: &[usize],
    k: u32,
    mode: AugmentMode,
    gen: Option<&GenerationNoiseParams>,
    seed: u64,
    kind: DatasetKind,
) -> Result<Dataset> {
    if !base.kind.is_base() {
        return Err(Error::AlreadyAugmented {
            kind: format!("{:?}", base.kind),
        });
    }
    if k == 0 {
        return Err(Error::InvalidFactor);
    }
    for (pos, &i) in indices.iter().enumerate() {
        if i >= base.len() {
            return Err(Error::IndexError {
                index: i,
                len: base.len(),
            });
        }
        if pos > 0 && indices[pos - 1] >= i {
            return Err(Error::InvalidConfig(
                "selection indices must be strictly increasing".into(),
            ));
        }
    }

    let copies = (k - 1) as usize;
    let mut points = base.points.clone();
    points.reserve(copies * indices.len());

    match mode {
        AugmentMode::Upsample => {
            for &i in indices {
                let src = &base.points[i];
                for _ in 0..copies {
                    points.push(DataPoint {
                        provenance: Provenance::UpsampledCopy,
                        ..src.clone()
                    });
                }
            }
        }
        AugmentMode::Generate => {
            let gen = gen.ok_or_else(|| {
                Error::InvalidConfig("generation requires GenerationNoiseParams".into())
            })?;
            if !(gen.sigma_gamma.is_finite() && gen.sigma_gamma > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "sigma_gamma must be finite and positive, got {}",
                    gen.sigma_gamma
                )));
            }
            let planned = copies * indices.len();
            let mut mutual = match (gen.orthogonalize, base.params.noise_mode) {
                (true, NoiseMode::MutuallyOrthogonal) => {
                    let reps = base.distinct_noise_representatives();
                    let existing: Vec<&[f64]> = reps
                        .iter()
                        .map(|&i| base.points[i].noise_patch())
                        .collect();
                    Some(MutualState::for_basis(&base.basis, &existing, planned)?)
                }
                _ => None,
            };
            let mut next_id = base
                .points
                .iter()
                .map(|p| p.noise_id)
                .max()
                .map_or(0, |m| m + 1);
            let mut counter = 0u64;
            for &i in indices {
                let src = &base.points[i];
                for _ in 0..copies {
                    let mut rng = substream(seed, "gen-noise", counter);
                    counter += 1;
                    let noise = match (&mut mutual, gen.orthogonalize) {
                        (Some(state), _) => {
                            state.draw(&mut rng, base.params.dim, gen.sigma_gamma)?
                        }
                        (None, true) => {
                            feature_orthogonal_noise(&mut rng, &base.basis, gen.sigma_gamma)
                        }
                        (None, false) => gaussian_vec(
                            &mut rng,
                            base.params.dim,
                            gen.sigma_gamma / (base.params.dim as f64).sqrt(),
                        ),
                    };
                    points.push(DataPoint {
                        patches: vec![src.patches[0].clone(), Arc::from(noise)],
                        label: src.label,
                        feature_kind: src.feature_kind,
                        noise_id: next_id,
                        provenance: Provenance::Generated,
                    });
                    next_id += 1;
                }
            }
        }
    }

    Ok(Dataset {
        points,
        params: base.params.clone(),
        basis: base.basis.clone(),
        seed: base.seed,
        kind,
    })
}

#[derive(Serialize, Deserialize)]
struct PointMeta {
    label: i8,
    feature_kind: FeatureKind,
    noise_id: u64,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    params: DistributionParams,
    basis: FeatureBasis,
    seed: u64,
    kind: DatasetKind,
    points: Vec<PointMeta>,
}

const BLOB_NAME: &str = "patches.f64le";
const MANIFEST_NAME: &str = "dataset.json";

impl Dataset {
    /// Writes `dataset.json` (params, basis, labels, metadata) plus a
    /// little-endian f64 blob of all patches, row-major
    /// `[point][patch][dim]`. Round-trips bit-exactly via [`Dataset::load`].
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = DatasetManifest {
            params: self.params.clone(),
            basis: self.basis.clone(),
            seed: self.seed,
            kind: self.kind,
            points: self
                .points
                .iter()
                .map(|p| PointMeta {
                    label: p.label,
                    feature_kind: p.feature_kind,
                    noise_id: p.noise_id,
                    provenance: p.provenance,
                })
                .collect(),
        };
        fs::write(
            dir.join(MANIFEST_NAME),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        let mut blob =
            Vec::with_capacity(self.len() * self.params.patches * self.params.dim * 8);
        for p in &self.points {
            for patch in &p.patches {
                for x in patch.iter() {
                    blob.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        fs::write(dir.join(BLOB_NAME), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest =
            serde_json::from_slice(&fs::read(dir.join(MANIFEST_NAME))?)?;
        let blob = fs::read(dir.join(BLOB_NAME))?;
        let dim = manifest.params.dim;
        let patches = manifest.params.patches;
        let expected = manifest.points.len() * patches * dim * 8;
        if blob.len() != expected {
            return Err(Error::ShapeError {
                expected,
                got: blob.len(),
            });
        }
        let mut floats = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let mut shared_noise: HashMap<u64, Arc<[f64]>> = HashMap::new();
        let mut points = Vec::with_capacity(manifest.points.len());
        for meta in &manifest.points {
            let mut pv: Vec<Arc<[f64]>> = Vec::with_capacity(patches);
            for pi in 0..patches {
                let patch: Vec<f64> = floats.by_ref().take(dim).collect();
                if pi == 1 {
                    if let Some(existing) = shared_noise.get(&meta.noise_id) {
                        if existing.iter().zip(&patch).all(|(a, b)| a.to_bits() == b.to_bits())
                        {
                            pv.push(existing.clone());
                            continue;
                        }
                        return Err(Error::InvalidConfig(format!(
                            "blob disagrees with shared noise id {}",
                            meta.noise_id
                        )));
                    }
                    let arc: Arc<[f64]> = Arc::from(patch);
                    shared_noise.insert(meta.noise_id, arc.clone());
                    pv.push(arc);
                } else {
                    pv.push(Arc::from(patch));
                }
            }
            points.push(DataPoint {
                patches: pv,
                label: meta.label,
                feature_kind: meta.feature_kind,
                noise_id: meta.noise_id,
                provenance: meta.provenance,
            });
        }
        Ok(Dataset {
            points,
            params: manifest.params,
            basis: manifest.basis,
            seed: manifest.seed,
            kind: manifest.kind,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, alpha: f64, dim: usize) -> DistributionParams {
        DistributionParams {
            beta_e: 1.5,
            beta_d: 1.0,
            alpha,
            sigma_p: 1.0,
            dim,
            patches: 2,
            n,
            noise_mode: NoiseMode::MutuallyOrthogonal,
        }
    }

    fn base(n: usize, alpha: f64, dim: usize, seed: u64) -> Dataset {
        let p = params(n, alpha, dim);
        let b = make_feature_basis(dim, BasisMode::Canonical, 0).unwrap();
        sample_dataset(&p, &b, seed, true).unwrap()
    }

    fn bit_eq(a: &Dataset, b: &Dataset) -> bool {
        a.len() == b.len()
            && a.points.iter().zip(&b.points).all(|(x, y)| {
                x.label == y.label
                    && x.feature_kind == y.feature_kind
                    && x.noise_id == y.noise_id
                    && x.provenance == y.provenance
                    && x.patches.len() == y.patches.len()
                    && x.patches.iter().zip(&y.patches).all(|(p, q)| {
                        p.iter().zip(q.iter()).all(|(u, v)| u.to_bits() == v.to_bits())
                    })
            })
    }

    #[test]
    fn canonical_basis_is_the_first_two_axes() {
        let b = make_feature_basis(5, BasisMode::Canonical, 0).unwrap();
        assert_eq!(b.v_e, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(b.v_d, vec![0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn random_basis_is_orthonormal() {
        let b = make_feature_basis(5, BasisMode::RandomOrthogonal, 7).unwrap();
        assert!((norm(&b.v_e) - 1.0).abs() <= 1e-12);
        assert!((norm(&b.v_d) - 1.0).abs() <= 1e-12);
        assert!(dot(&b.v_e, &b.v_d).abs() <= 1e-12);
    }

    #[test]
    fn tiny_dimension_is_rejected() {
        assert!(matches!(
            make_feature_basis(2, BasisMode::Canonical, 0),
            Err(Error::InvalidDimension { dim: 2, needed: 3 })
        ));
    }

    #[test]
    fn alpha_one_gives_all_fast_points() {
        let d = base(8, 1.0, 16, 3);
        assert!(d.points.iter().all(|p| p.feature_kind == FeatureKind::Fast));
    }

    #[test]
    fn zero_beta_d_gives_zero_slow_feature_patch() {
        let mut p = params(6, 0.0, 16);
        p.beta_d = 0.0;
        let b = make_feature_basis(16, BasisMode::Canonical, 0).unwrap();
        let d = sample_dataset(&p, &b, 1, true).unwrap();
        for point in &d.points {
            assert_eq!(point.feature_kind, FeatureKind::Slow);
            assert!(point.feature_patch().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn non_integral_slow_count_is_rejected() {
        let p = params(10, 0.85, 16);
        let b = make_feature_basis(16, BasisMode::Canonical, 0).unwrap();
        assert!(matches!(
            sample_dataset(&p, &b, 0, true),
            Err(Error::InvalidAlpha { .. })
        ));
    }

    #[test]
    fn bernoulli_fast_fraction_concentrates() {
        // Binomial oracle: within 3 * sqrt(alpha (1 - alpha) / n) = 0.012.
        let mut p = params(10_000, 0.8, 16);
        p.noise_mode = NoiseMode::FeatureOrthogonal;
        let b = make_feature_basis(16, BasisMode::Canonical, 0).unwrap();
        let d = sample_dataset(&p, &b, 42, false).unwrap();
        let fast = d
            .points
            .iter()
            .filter(|q| q.feature_kind == FeatureKind::Fast)
            .count() as f64;
        assert!((fast / 10_000.0 - 0.8).abs() < 0.012);
    }

    #[test]
    fn feature_patch_is_beta_y_v() {
        let d = base(10, 0.5, 16, 9);
        for p in &d.points {
            let (beta, v) = match p.feature_kind {
                FeatureKind::Fast => (1.5, &d.basis.v_e),
                FeatureKind::Slow => (1.0, &d.basis.v_d),
            };
            for (x, ve) in p.feature_patch().iter().zip(v) {
                assert_eq!(*x, beta * p.y() * ve);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = base(12, 0.5, 20, 77);
        let b = base(12, 0.5, 20, 77);
        assert!(bit_eq(&a, &b));
        let c = base(12, 0.5, 20, 78);
        assert!(!bit_eq(&a, &c));
    }

    #[test]
    fn mutual_mode_noises_are_exactly_orthogonal() {
        let d = base(10, 0.5, 16, 5);
        for (i, p) in d.points.iter().enumerate() {
            assert_eq!(dot(p.noise_patch(), &d.basis.v_e), 0.0);
            assert_eq!(dot(p.noise_patch(), &d.basis.v_d), 0.0);
            for q in &d.points[..i] {
                assert_eq!(dot(p.noise_patch(), q.noise_patch()), 0.0);
            }
        }
    }

    #[test]
    fn mutual_mode_needs_room() {
        let p = params(30, 0.5, 16);
        let b = make_feature_basis(16, BasisMode::Canonical, 0).unwrap();
        assert!(matches!(
            sample_dataset(&p, &b, 0, true),
            Err(Error::InvalidDimension { .. })
        ));
    }

    #[test]
    fn mutual_mode_with_dense_basis_falls_back_to_gram_schmidt() {
        let p = params(6, 0.5, 32);
        let b = make_feature_basis(32, BasisMode::RandomOrthogonal, 3).unwrap();
        let d = sample_dataset(&p, &b, 11, true).unwrap();
        for (i, pt) in d.points.iter().enumerate() {
            let n = norm(pt.noise_patch());
            assert!(dot(pt.noise_patch(), &d.basis.v_e).abs() <= 1e-12 * n);
            for q in &d.points[..i] {
                let cross = dot(pt.noise_patch(), q.noise_patch()).abs();
                assert!(cross <= 1e-12 * n * norm(q.noise_patch()));
            }
        }
    }

    #[test]
    fn noise_norms_match_sigma_p() {
        // E||xi||^2 = sigma_p^2; the mean over 10^4 draws must be within 5%.
        let mut p = params(10_000, 0.5, 64);
        p.noise_mode = NoiseMode::FeatureOrthogonal;
        p.sigma_p = 1.3;
        let b = make_feature_basis(64, BasisMode::Canonical, 0).unwrap();
        let d = sample_dataset(&p, &b, 4, true).unwrap();
        let mean: f64 = d
            .points
            .iter()
            .map(|q| crate::linalg::norm_sq(q.noise_patch()))
            .sum::<f64>()
            / 10_000.0;
        assert!((mean / (1.3 * 1.3) - 1.0).abs() < 0.05);
    }

    #[test]
    fn upsample_identity_at_k1() {
        let d = base(10, 0.5, 16, 2);
        let up = upsample(&d, 1).unwrap();
        assert_eq!(up.len(), d.len());
        assert_eq!(up.kind, DatasetKind::Upsampled { k: 1 });
        for (a, b) in up.points.iter().zip(&d.points) {
            assert_eq!(a.noise_id, b.noise_id);
            assert!(Arc::ptr_eq(&a.patches[1], &b.patches[1]));
        }
    }

    #[test]
    fn upsample_size_and_multiplicities() {
        // N_new = alpha N + k (1 - alpha) N = 5 + 3 * 5 = 20.
        let d = base(10, 0.5, 32, 2);
        let up = upsample(&d, 3).unwrap();
        assert_eq!(up.len(), 20);
        let counts = up.noise_multiplicities();
        for p in &d.points {
            let expect = match p.feature_kind {
                FeatureKind::Fast => 1,
                FeatureKind::Slow => 3,
            };
            assert_eq!(counts[&p.noise_id], expect);
        }
        // Originals first, then replicas grouped by source.
        assert!(up.points[..10]
            .iter()
            .all(|p| p.provenance == Provenance::Original));
        let tail: Vec<u64> = up.points[10..].iter().map(|p| p.noise_id).collect();
        let mut expected = Vec::new();
        for p in &d.points {
            if p.feature_kind == FeatureKind::Slow {
                expected.extend([p.noise_id, p.noise_id]);
            }
        }
        assert_eq!(tail, expected);
    }

    #[test]
    fn upsample_rejects_bad_inputs() {
        let d = base(10, 0.5, 32, 2);
        assert!(matches!(upsample(&d, 0), Err(Error::InvalidFactor)));
        let up = upsample(&d, 2).unwrap();
        assert!(matches!(
            upsample(&up, 2),
            Err(Error::AlreadyAugmented { .. })
        ));
    }

    #[test]
    fn generate_fresh_noise_points() {
        let d = base(10, 0.5, 64, 2);
        let gen = GenerationNoiseParams::matching(&d.params);
        let g = generate(&d, 3, &gen, 99).unwrap();
        assert_eq!(g.len(), 20);
        assert_eq!(g.kind, DatasetKind::Generated { k: 3 });
        let generated: Vec<&DataPoint> = g
            .points
            .iter()
            .filter(|p| p.provenance == Provenance::Generated)
            .collect();
        assert_eq!(generated.len(), 10);
        let mut ids: Vec<u64> = generated.iter().map(|p| p.noise_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert!(ids.iter().all(|&id| id >= 10));
        for p in &generated {
            assert_eq!(dot(p.noise_patch(), &g.basis.v_e), 0.0);
            assert_eq!(dot(p.noise_patch(), &g.basis.v_d), 0.0);
        }
        // In D_G no two points share a noise id.
        let counts = g.noise_multiplicities();
        assert!(counts.values().all(|&c| c == 1));
    }

    #[test]
    fn generate_is_deterministic_in_its_seed() {
        let d = base(10, 0.5, 64, 2);
        let gen = GenerationNoiseParams::matching(&d.params);
        let a = generate(&d, 2, &gen, 5).unwrap();
        let b = generate(&d, 2, &gen, 5).unwrap();
        assert!(bit_eq(&a, &b));
        let c = generate(&d, 2, &gen, 6).unwrap();
        assert!(!bit_eq(&a, &c));
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let d = base(8, 0.5, 24, 13);
        let up = upsample(&d, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        up.save(dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert!(bit_eq(&up, &loaded));
        assert_eq!(loaded.kind, up.kind);
        assert_eq!(loaded.seed, up.seed);
        assert_eq!(loaded.params, up.params);
        // Replica sharing is reconstructed.
        let slow_first = loaded
            .points
            .iter()
            .position(|p| p.feature_kind == FeatureKind::Slow)
            .unwrap();
        let id = loaded.points[slow_first].noise_id;
        let replica = loaded
            .points
            .iter()
            .find(|p| p.noise_id == id && p.provenance == Provenance::UpsampledCopy)
            .unwrap();
        assert!(Arc::ptr_eq(&loaded.points[slow_first].patches[1], &replica.patches[1]));
    }
}
