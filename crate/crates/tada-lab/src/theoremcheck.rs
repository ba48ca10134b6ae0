//! Executable verification suites for the theory results. Each check runs
//! a deterministic experiment (seed trials in parallel, reduced in order)
//! and returns a structured report with measured quantities, a pass flag,
//! and a separate flag for whether the regime conditions held.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    noise_align, partition_noise_sets, per_example_variance, variance_bound_factor, Side,
};
use crate::cnn::{grad_full, init_model, logit, noise_gradient, CnnModel, InitConfig};
use crate::linalg::{dot, norm, norm_sq};
use crate::optim::{
    batch_view, draw_batch_indices, gd_step, sam_step, train, zero_one_error, OptimizerConfig,
    Sampling,
};
use crate::rng::{derive_seed, substream};
use crate::synthdata::{
    generate, make_feature_basis, sample_dataset, upsample, BasisMode, Dataset,
    DistributionParams, FeatureBasis, GenerationNoiseParams, NoiseMode,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub measured: BTreeMap<String, f64>,
    /// Whether the smallness/admissibility conditions held at runtime.
    pub regime_ok: bool,
    pub seeds: usize,
    pub notes: Vec<String>,
}

/// How the SAM radius is chosen: a literal value, or a fraction of the
/// runtime-computed conservative bound min |<w_j, xi_i>| / ||xi_i||.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RhoChoice {
    Fixed(f64),
    FractionOfBound(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub params: DistributionParams,
    pub filters: usize,
    pub sigma_0: f64,
    pub eta: f64,
    pub rho: RhoChoice,
    pub steps: usize,
    pub warmup: usize,
    pub batch: usize,
    pub trials: usize,
    pub seeds: usize,
    /// Headline augmentation factor.
    pub k: u32,
    /// Sweep values where a check ranges over k.
    pub k_values: Vec<u32>,
    pub sigma_gamma: f64,
    /// Oversized generation noise used to violate the smallness condition.
    pub probe_sigma_gamma: f64,
    pub eval_n: usize,
    pub exact_tol: f64,
}

impl CheckConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.filters == 0 {
            return Err(Error::InvalidConfig("filters must be positive".into()));
        }
        if !(self.sigma_0 > 0.0 && self.sigma_0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma_0 must be positive, got {}",
                self.sigma_0
            )));
        }
        if self.seeds == 0 {
            return Err(Error::InvalidConfig("seeds must be positive".into()));
        }
        if self.k == 0 || self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(Error::InvalidConfig(
                "augmentation factors must be positive".into(),
            ));
        }
        if !self.exact_tol.is_finite() || self.exact_tol <= 0.0 {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        Ok(())
    }

    pub fn thm1_default() -> Self {
        CheckConfig {
            params: DistributionParams {
                beta_e: 1.5,
                beta_d: 1.0,
                alpha: 0.8,
                sigma_p: 1.0,
                dim: 500,
                patches: 2,
                n: 200,
                noise_mode: NoiseMode::MutuallyOrthogonal,
            },
            filters: 10,
            sigma_0: 0.01,
            eta: 0.1,
            rho: RhoChoice::Fixed(0.01),
            steps: 50,
            warmup: 5,
            batch: 25,
            trials: 1000,
            seeds: 20,
            k: 3,
            k_values: vec![1, 3],
            sigma_gamma: 1.0,
            probe_sigma_gamma: 3.0,
            eval_n: 2000,
            exact_tol: 1e-12,
        }
    }

    pub fn thm2_default() -> Self {
        CheckConfig {
            params: DistributionParams {
                beta_e: 1.5,
                beta_d: 1.0,
                alpha: 0.5,
                sigma_p: 1.0,
                dim: 500,
                patches: 2,
                n: 100,
                noise_mode: NoiseMode::MutuallyOrthogonal,
            },
            filters: 10,
            sigma_0: 0.01,
            eta: 0.1,
            rho: RhoChoice::Fixed(0.01),
            steps: 50,
            warmup: 5,
            batch: 25,
            trials: 1000,
            seeds: 200,
            k: 3,
            k_values: vec![1, 2, 3, 5],
            sigma_gamma: 1.0,
            probe_sigma_gamma: 3.0,
            eval_n: 2000,
            exact_tol: 1e-12,
        }
    }

    pub fn thm3_default() -> Self {
        CheckConfig {
            params: DistributionParams {
                beta_e: 1.5,
                beta_d: 1.0,
                alpha: 0.5,
                sigma_p: 1.0,
                dim: 32,
                patches: 2,
                n: 100,
                noise_mode: NoiseMode::FeatureOrthogonal,
            },
            filters: 4,
            sigma_0: 0.1,
            eta: 0.1,
            rho: RhoChoice::Fixed(0.01),
            steps: 50,
            warmup: 0,
            batch: 25,
            trials: 10_000,
            seeds: 1,
            k: 2,
            k_values: vec![1, 2, 3, 4, 5],
            sigma_gamma: 1.0,
            probe_sigma_gamma: 3.0,
            eval_n: 2000,
            exact_tol: 1e-12,
        }
    }

    pub fn cor1_default() -> Self {
        // Noise strength sits where per-point memorization narrowly outruns
        // the slow feature on replicated noise but loses to it once fresh
        // noise dilutes the per-noise gradient; larger sigma_p tips even
        // the generated arm into memorization, smaller flattens the sweep.
        CheckConfig {
            params: DistributionParams {
                beta_e: 1.5,
                beta_d: 1.0,
                alpha: 0.5,
                sigma_p: 4.3,
                dim: 48,
                patches: 2,
                n: 100,
                noise_mode: NoiseMode::FeatureOrthogonal,
            },
            filters: 8,
            sigma_0: 0.2,
            eta: 0.2,
            rho: RhoChoice::Fixed(0.01),
            steps: 40,
            warmup: 0,
            batch: 20,
            trials: 1000,
            seeds: 64,
            k: 4,
            k_values: vec![1, 2, 3, 4, 5],
            sigma_gamma: 4.3,
            probe_sigma_gamma: 12.9,
            eval_n: 10_000,
            exact_tol: 1e-12,
        }
    }

    /// Pipeline preset for selection experiments: a large mostly-fast
    /// dataset where the slow minority is cheap to find early, plus a
    /// retraining budget for the augmented runs.
    pub fn select_default() -> Self {
        CheckConfig {
            params: DistributionParams {
                beta_e: 2.0,
                beta_d: 0.5,
                alpha: 0.8,
                sigma_p: 1.0,
                dim: 64,
                patches: 2,
                n: 1000,
                noise_mode: NoiseMode::FeatureOrthogonal,
            },
            filters: 16,
            sigma_0: 0.1,
            eta: 0.5,
            rho: RhoChoice::Fixed(0.01),
            steps: 60,
            warmup: 30,
            batch: 100,
            trials: 1000,
            seeds: 10,
            k: 3,
            k_values: vec![3],
            sigma_gamma: 1.0,
            probe_sigma_gamma: 3.0,
            eval_n: 4000,
            exact_tol: 1e-12,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "thm1_default" => Ok(Self::thm1_default()),
            "thm2_default" => Ok(Self::thm2_default()),
            "thm3_default" => Ok(Self::thm3_default()),
            "cor1_default" => Ok(Self::cor1_default()),
            "select_default" => Ok(Self::select_default()),
            other => Err(Error::InvalidConfig(format!("unknown preset '{other}'"))),
        }
    }
}

/// The checks a preset is meant to drive.
pub fn preset_check_names(name: &str) -> Result<Vec<&'static str>> {
    match name {
        "thm1_default" => Ok(vec!["inert_noises", "sam_vs_gd_noisealign"]),
        "thm2_default" => Ok(vec!["upsample_amplification", "gen_vs_up_expectation"]),
        "thm3_default" => Ok(vec!["variance_inflation"]),
        "cor1_default" => Ok(vec!["convergence_and_generalization"]),
        "select_default" => Err(Error::InvalidConfig(
            "preset 'select_default' drives the selection pipeline, not verify; \
             use the select or compare subcommands"
                .into(),
        )),
        other => Err(Error::InvalidConfig(format!("unknown preset '{other}'"))),
    }
}

pub fn run_check(name: &str, cfg: &CheckConfig, master_seed: u64) -> Result<CheckReport> {
    match name {
        "inert_noises" => check_inert_noises(cfg, master_seed),
        "sam_vs_gd_noisealign" => check_sam_vs_gd_noisealign(cfg, master_seed),
        "upsample_amplification" => check_upsample_amplification(cfg, master_seed),
        "gen_vs_up_expectation" => check_gen_vs_up_expectation(cfg, master_seed),
        "variance_inflation" => check_variance_inflation(cfg, master_seed),
        "convergence_and_generalization" => check_convergence_and_generalization(cfg, master_seed),
        other => Err(Error::InvalidConfig(format!("unknown check '{other}'"))),
    }
}

/// Runs every check belonging to the named preset.
pub fn run_preset(name: &str, master_seed: u64) -> Result<Vec<CheckReport>> {
    let cfg = CheckConfig::preset(name)?;
    preset_check_names(name)?
        .iter()
        .map(|check| run_check(check, &cfg, master_seed))
        .collect()
}

fn basis_for(cfg: &CheckConfig) -> Result<FeatureBasis> {
    make_feature_basis(cfg.params.dim, BasisMode::Canonical, 0)
}

fn seed_dataset(cfg: &CheckConfig, master: u64, s: u64) -> Result<Dataset> {
    let basis = basis_for(cfg)?;
    sample_dataset(&cfg.params, &basis, derive_seed(master, "data", s), true)
}

fn seed_model(cfg: &CheckConfig, master: u64, s: u64) -> Result<CnnModel> {
    init_model(
        cfg.params.dim,
        cfg.filters,
        InitConfig {
            sigma_0: cfg.sigma_0,
            seed: derive_seed(master, "init", s),
        },
    )
}

fn gen_params(cfg: &CheckConfig, sigma_gamma: f64) -> GenerationNoiseParams {
    GenerationNoiseParams {
        sigma_gamma,
        orthogonalize: cfg.params.noise_mode != NoiseMode::Raw,
    }
}

/// min over (j, i) of |<w_j, xi_i>| / ||xi_i||: below this radius no sign
/// can flip regardless of the gradient direction.
fn conservative_rho_bound(model: &CnnModel, dataset: &Dataset) -> f64 {
    let mut bound = f64::INFINITY;
    for j in 0..model.filters() {
        for p in &dataset.points {
            let s = dot(model.filter(j), p.noise_patch()).abs();
            bound = bound.min(s / norm(p.noise_patch()));
        }
    }
    bound
}

fn resolve_rho(cfg: &CheckConfig, model: &CnnModel, dataset: &Dataset) -> f64 {
    match cfg.rho {
        RhoChoice::Fixed(r) => r,
        RhoChoice::FractionOfBound(f) => f * conservative_rho_bound(model, dataset),
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

struct InertSeedOutcome {
    violations: u64,
    triples: u64,
    set_changes: u64,
    eta_bound: f64,
}

/// Under admissible eta, alignments with minus-set noises shrink
/// monotonically and plus-set alignments grow strictly, while set
/// membership never changes over the horizon.
pub fn check_inert_noises(cfg: &CheckConfig, master_seed: u64) -> Result<CheckReport> {
    cfg.validate()?;
    let outcomes: Vec<InertSeedOutcome> = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|s| -> Result<InertSeedOutcome> {
            let ds = seed_dataset(cfg, master_seed, s)?;
            let mut model = seed_model(cfg, master_seed, s)?;
            let n = ds.len() as f64;
            let mut eta_bound = f64::INFINITY;
            let mut align = vec![0.0f64; cfg.filters * ds.len()];
            let mut plus0 = vec![false; cfg.filters * ds.len()];
            for j in 0..cfg.filters {
                for (i, p) in ds.points.iter().enumerate() {
                    let s_ji = dot(model.filter(j), p.noise_patch());
                    let c_i = 3.0 / n * norm_sq(p.noise_patch());
                    eta_bound = eta_bound.min(1.0 / (c_i * s_ji.abs()));
                    align[j * ds.len() + i] = s_ji.abs();
                    plus0[j * ds.len() + i] = s_ji * p.y() > 0.0;
                }
            }
            let mut violations = 0u64;
            let mut set_changes = 0u64;
            for _ in 0..cfg.steps {
                model = gd_step(&model, &ds, cfg.eta)?;
                for j in 0..cfg.filters {
                    for (i, p) in ds.points.iter().enumerate() {
                        let idx = j * ds.len() + i;
                        let s_ji = dot(model.filter(j), p.noise_patch());
                        let a = s_ji.abs();
                        let was_plus = plus0[idx];
                        if was_plus {
                            if a <= align[idx] {
                                violations += 1;
                            }
                        } else if a > align[idx] + 1e-12 {
                            violations += 1;
                        }
                        if (s_ji * p.y() > 0.0) != was_plus {
                            set_changes += 1;
                        }
                        align[idx] = a;
                    }
                }
            }
            Ok(InertSeedOutcome {
                violations,
                triples: (cfg.filters * ds.len() * cfg.steps) as u64,
                set_changes,
                eta_bound,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let violations: u64 = outcomes.iter().map(|o| o.violations).sum();
    let triples: u64 = outcomes.iter().map(|o| o.triples).sum();
    let set_changes: u64 = outcomes.iter().map(|o| o.set_changes).sum();
    let eta_bound = outcomes.iter().map(|o| o.eta_bound).fold(f64::INFINITY, f64::min);
    let fraction = if triples == 0 {
        0.0
    } else {
        violations as f64 / triples as f64
    };
    let regime_ok = cfg.eta < eta_bound;
    let mut measured = BTreeMap::new();
    measured.insert("violation_count".into(), violations as f64);
    measured.insert("triple_count".into(), triples as f64);
    measured.insert("violation_fraction".into(), fraction);
    measured.insert("set_changes".into(), set_changes as f64);
    measured.insert("eta_bound".into(), eta_bound);
    measured.insert("eta".into(), cfg.eta);
    let mut notes = vec![
        "monotonicity: plus-set alignments strictly increase, minus-set non-increasing (slack 1e-12)"
            .into(),
    ];
    if !regime_ok {
        notes.push(format!(
            "eta {} is not below the admissible bound {eta_bound:.6e}",
            cfg.eta
        ));
    }
    Ok(CheckReport {
        name: "inert_noises".into(),
        passed: regime_ok && fraction <= 1e-3 && set_changes == 0,
        measured,
        regime_ok,
        seeds: cfg.seeds,
        notes,
    })
}

struct SamSeedOutcome {
    align_gd: f64,
    align_sam: f64,
    strict_filters: usize,
    filters: usize,
    set_mismatches: u64,
    max_rel: f64,
    max_drift: f64,
    x_max: f64,
    rho_bound: f64,
    rho: f64,
}

/// From identical weights the perturbed SAM gradient aligns strictly less
/// with plus-set noises than the GD gradient, the plus/minus sets agree at
/// W and W + eps, and the per-noise (1 -/+ x)^2 identity holds up to the
/// observed logit drift.
pub fn check_sam_vs_gd_noisealign(cfg: &CheckConfig, master_seed: u64) -> Result<CheckReport> {
    cfg.validate()?;
    let outcomes: Vec<SamSeedOutcome> = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|s| -> Result<SamSeedOutcome> {
            let ds = seed_dataset(cfg, master_seed, s)?;
            let model0 = seed_model(cfg, master_seed, s)?;
            let mut warmed = model0.clone();
            for _ in 0..cfg.warmup {
                warmed = gd_step(&warmed, &ds, cfg.eta)?;
            }
            let n = ds.len() as f64;
            let mut out = SamSeedOutcome {
                align_gd: 0.0,
                align_sam: 0.0,
                strict_filters: 0,
                filters: 0,
                set_mismatches: 0,
                max_rel: 0.0,
                max_drift: 0.0,
                x_max: 0.0,
                rho_bound: f64::INFINITY,
                rho: 0.0,
            };
            for m in [&model0, &warmed] {
                let rho = resolve_rho(cfg, m, &ds);
                out.rho = rho;
                out.rho_bound = out.rho_bound.min(conservative_rho_bound(m, &ds));
                let (rho_t, eps_model) = if rho == 0.0 {
                    (0.0, m.clone())
                } else {
                    let (_, trace) = sam_step(m, &ds, cfg.eta, rho)?;
                    (trace.rho_t, trace.perturbed_weights)
                };
                let eps = &eps_model;
                for j in 0..cfg.filters {
                    let part = partition_noise_sets(m, &ds, j, None)?;
                    let part_eps = partition_noise_sets(m, &ds, j, Some(eps))?;
                    if part.plus_set != part_eps.plus_set || part.minus_set != part_eps.minus_set
                    {
                        out.set_mismatches += 1;
                    }
                    let gd = noise_align(m, &ds, &part, Side::Plus)?;
                    let sam = noise_align(eps, &ds, &part, Side::Plus)?;
                    out.align_gd += gd;
                    out.align_sam += sam;
                    out.filters += 1;
                    if rho == 0.0 {
                        if sam == gd {
                            out.strict_filters += 1;
                        }
                    } else if sam < gd {
                        out.strict_filters += 1;
                    }
                    for (&i, plus) in part
                        .plus_set
                        .iter()
                        .map(|i| (i, true))
                        .chain(part.minus_set.iter().map(|i| (i, false)))
                    {
                        let p = &ds.points[i];
                        let s_ji = dot(m.filter(j), p.noise_patch());
                        if s_ji == 0.0 {
                            continue;
                        }
                        let l = logit(m, p);
                        let l_eps = logit(eps, p);
                        let x = 3.0 * rho_t / n * l * s_ji.abs() * norm_sq(p.noise_patch());
                        out.x_max = out.x_max.max(x);
                        let factor = if plus { 1.0 - x } else { 1.0 + x };
                        let predicted =
                            noise_gradient(m, &ds, j, i)?.abs() * factor * factor;
                        let actual = noise_gradient(eps, &ds, j, i)?.abs();
                        let rel = (actual - predicted).abs() / predicted.abs().max(1e-300);
                        let drift = (l_eps / l - 1.0).abs();
                        out.max_rel = out.max_rel.max(rel);
                        out.max_drift = out.max_drift.max(drift);
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let filters: usize = outcomes.iter().map(|o| o.filters).sum();
    let strict: usize = outcomes.iter().map(|o| o.strict_filters).sum();
    let mismatches: u64 = outcomes.iter().map(|o| o.set_mismatches).sum();
    let max_rel = outcomes.iter().map(|o| o.max_rel).fold(0.0, f64::max);
    let max_drift = outcomes.iter().map(|o| o.max_drift).fold(0.0, f64::max);
    let x_max = outcomes.iter().map(|o| o.x_max).fold(0.0, f64::max);
    let rho_bound = outcomes.iter().map(|o| o.rho_bound).fold(f64::INFINITY, f64::min);
    let align_gd = outcomes.iter().map(|o| o.align_gd).sum::<f64>() / filters as f64;
    let align_sam = outcomes.iter().map(|o| o.align_sam).sum::<f64>() / filters as f64;
    let regime_ok = x_max < 1.0;
    let identity_ok = max_rel <= (1e-6f64).max(max_drift * (1.0 + 1e-9) + 1e-12);

    let mut measured = BTreeMap::new();
    measured.insert("noisealign_gd".into(), align_gd);
    measured.insert("noisealign_sam".into(), align_sam);
    measured.insert("strict_filter_count".into(), strict as f64);
    measured.insert("filter_count".into(), filters as f64);
    measured.insert("set_mismatches".into(), mismatches as f64);
    measured.insert("max_rel_error".into(), max_rel);
    measured.insert("max_logit_drift".into(), max_drift);
    measured.insert("x_max".into(), x_max);
    measured.insert("rho_bound_conservative".into(), rho_bound);
    measured.insert("rho".into(), outcomes.last().map_or(0.0, |o| o.rho));
    let notes = vec![
        "checkpoints: fresh init and after warmup GD steps".into(),
        "regime condition: x = (3 rho_t / N) l |<w,xi>| ||xi||^2 below 1 for every pair".into(),
        "sets compared exactly; identity tolerance max(1e-6, observed logit drift)".into(),
    ];
    Ok(CheckReport {
        name: "sam_vs_gd_noisealign".into(),
        passed: regime_ok && mismatches == 0 && strict == filters && identity_ok,
        measured,
        regime_ok,
        seeds: cfg.seeds,
        notes,
    })
}

/// Exactness of the replication factor: on the upsampled dataset every
/// noise-gradient projection equals its multiplicity times the single-copy
/// closed form, and on the generated dataset every noise carries the plain
/// single-copy factor.
pub fn check_upsample_amplification(cfg: &CheckConfig, master_seed: u64) -> Result<CheckReport> {
    cfg.validate()?;
    let rels: Vec<f64> = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|s| -> Result<f64> {
            let base = seed_dataset(cfg, master_seed, s)?;
            let model = seed_model(cfg, master_seed, s)?;
            let mut max_rel = 0.0f64;
            for &k in &cfg.k_values {
                let up = upsample(&base, k)?;
                let gen = generate(
                    &base,
                    k,
                    &gen_params(cfg, cfg.sigma_gamma),
                    derive_seed(master_seed, "gen", s * 1000 + u64::from(k)),
                )?;
                for ds in [&up, &gen] {
                    let g = grad_full(&model, ds)?;
                    let mults = ds.noise_multiplicities();
                    let n_new = ds.len() as f64;
                    for j in 0..cfg.filters {
                        for p in &ds.points {
                            let proj = dot(g.column(j), p.noise_patch()).abs();
                            let s_ji = dot(model.filter(j), p.noise_patch());
                            let l = logit(&model, p);
                            let single = 3.0 / n_new * l * s_ji * s_ji * norm_sq(p.noise_patch());
                            let expect = mults[&p.noise_id] as f64 * single;
                            let rel = (proj - expect).abs() / expect.abs().max(1e-300);
                            max_rel = max_rel.max(rel);
                        }
                    }
                }
            }
            Ok(max_rel)
        })
        .collect::<Result<Vec<_>>>()?;

    let max_rel = rels.iter().copied().fold(0.0, f64::max);
    let mut measured = BTreeMap::new();
    measured.insert("max_rel_error".into(), max_rel);
    measured.insert("tolerance".into(), cfg.exact_tol);
    Ok(CheckReport {
        name: "upsample_amplification".into(),
        passed: max_rel <= cfg.exact_tol,
        measured,
        regime_ok: true,
        seeds: cfg.seeds,
        notes: vec![
            "projection of the full gradient onto each noise vs. multiplicity x (3/N_new) l s^2 ||xi||^2"
                .into(),
        ],
    })
}

struct GenUpSeedOutcome {
    mean_u: f64,
    mean_g: f64,
    mean_g_probe: f64,
    smallness_ratio: f64,
}

/// In expectation over seeds, with matched generation noise the generated
/// dataset's plus-set NoiseAlign is smaller than the upsampled one's; an
/// oversized generation noise violates the smallness condition and
/// degrades or reverses the inequality.
pub fn check_gen_vs_up_expectation(cfg: &CheckConfig, master_seed: u64) -> Result<CheckReport> {
    cfg.validate()?;
    let outcomes: Vec<GenUpSeedOutcome> = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|s| -> Result<GenUpSeedOutcome> {
            let base = seed_dataset(cfg, master_seed, s)?;
            let mut model = seed_model(cfg, master_seed, s)?;
            for _ in 0..cfg.warmup {
                model = gd_step(&model, &base, cfg.eta)?;
            }
            let up = upsample(&base, cfg.k)?;
            let gen = generate(
                &base,
                cfg.k,
                &gen_params(cfg, cfg.sigma_gamma),
                derive_seed(master_seed, "gen", s),
            )?;
            let gen_probe = generate(
                &base,
                cfg.k,
                &gen_params(cfg, cfg.probe_sigma_gamma),
                derive_seed(master_seed, "gen-probe", s),
            )?;
            let mut mean_u = 0.0;
            let mut mean_g = 0.0;
            let mut mean_g_probe = 0.0;
            for j in 0..cfg.filters {
                let part_u = partition_noise_sets(&model, &up, j, None)?;
                mean_u += noise_align(&model, &up, &part_u, Side::Plus)?;
                let part_g = partition_noise_sets(&model, &gen, j, None)?;
                mean_g += noise_align(&model, &gen, &part_g, Side::Plus)?;
                let part_p = partition_noise_sets(&model, &gen_probe, j, None)?;
                mean_g_probe += noise_align(&model, &gen_probe, &part_p, Side::Plus)?;
            }
            let jf = cfg.filters as f64;

            // Smallness condition terms, averaged over filters and points:
            // generated noises gamma vs. original noises xi.
            let mut gamma_term = 0.0;
            let mut gamma_count = 0.0f64;
            let mut xi_term = 0.0;
            let mut xi_count = 0.0f64;
            for j in 0..cfg.filters {
                for p in gen
                    .points
                    .iter()
                    .filter(|p| p.provenance == crate::synthdata::Provenance::Generated)
                {
                    let s_ji = dot(model.filter(j), p.noise_patch());
                    gamma_term += logit(&model, p) * s_ji * s_ji * norm_sq(p.noise_patch());
                    gamma_count += 1.0;
                }
                for p in &base.points {
                    let s_ji = dot(model.filter(j), p.noise_patch());
                    xi_term += logit(&model, p) * s_ji * s_ji * norm_sq(p.noise_patch());
                    xi_count += 1.0;
                }
            }
            Ok(GenUpSeedOutcome {
                mean_u: mean_u / jf,
                mean_g: mean_g / jf,
                mean_g_probe: mean_g_probe / jf,
                smallness_ratio: (gamma_term / gamma_count.max(1.0))
                    / (xi_term / xi_count.max(1.0)).max(1e-300),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let us: Vec<f64> = outcomes.iter().map(|o| o.mean_u).collect();
    let gs: Vec<f64> = outcomes.iter().map(|o| o.mean_g).collect();
    let probes: Vec<f64> = outcomes.iter().map(|o| o.mean_g_probe).collect();
    let ratios: Vec<f64> = outcomes.iter().map(|o| o.smallness_ratio).collect();
    let (mu, se_u) = mean_and_se(&us);
    let (mg, se_g) = mean_and_se(&gs);
    let (mp, _) = mean_and_se(&probes);
    let (msmall, _) = mean_and_se(&ratios);
    let separated = mg + 1.96 * se_g < mu - 1.96 * se_u;
    let smallness_ok = msmall < f64::from(cfg.k) + 1.0;
    let probe_degraded = mp > mg;

    let mut measured = BTreeMap::new();
    measured.insert("noisealign_up_mean".into(), mu);
    measured.insert("noisealign_up_se".into(), se_u);
    measured.insert("noisealign_gen_mean".into(), mg);
    measured.insert("noisealign_gen_se".into(), se_g);
    measured.insert("noisealign_gen_probe_mean".into(), mp);
    measured.insert("up_over_gen_ratio".into(), mu / mg.max(1e-300));
    measured.insert("smallness_ratio".into(), msmall);
    measured.insert("smallness_limit".into(), f64::from(cfg.k) + 1.0);
    measured.insert("probe_degraded".into(), f64::from(u8::from(probe_degraded)));
    let mut notes = vec![
        "95% CIs: mean +/- 1.96 se over seeds; pass needs non-overlap".into(),
        format!(
            "probe sigma_gamma = {} vs matched {}",
            cfg.probe_sigma_gamma, cfg.sigma_gamma
        ),
    ];
    if probe_degraded {
        notes.push("oversized generation noise degraded the inequality as predicted".into());
    }
    Ok(CheckReport {
        name: "gen_vs_up_expectation".into(),
        passed: separated && smallness_ok,
        measured,
        regime_ok: smallness_ok,
        seeds: cfg.seeds,
        notes,
    })
}

struct VarianceArm {
    mean: f64,
    se: f64,
}

fn variance_of_process(
    cfg: &CheckConfig,
    master_seed: u64,
    k: u32,
    model: &CnnModel,
) -> Result<(VarianceArm, VarianceArm)> {
    let entries = cfg.params.dim * cfg.filters;
    let grads: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| -> Result<(Vec<f64>, Vec<f64>)> {
            let tag = u64::from(k) * 1_000_000 + t;
            let basis = basis_for(cfg)?;
            let base = sample_dataset(
                &cfg.params,
                &basis,
                derive_seed(master_seed, "var-base", tag),
                true,
            )?;
            let up = upsample(&base, k)?;
            let gen = generate(
                &base,
                k,
                &gen_params(cfg, cfg.sigma_gamma),
                derive_seed(master_seed, "var-gen", tag),
            )?;
            let mut out = Vec::with_capacity(2);
            for ds in [&up, &gen] {
                let mut rng = substream(master_seed, "var-batch", tag);
                let idx =
                    draw_batch_indices(&mut rng, ds, cfg.batch, Sampling::Stratified, false)?;
                let batch = batch_view(ds, &idx);
                let g = grad_full(model, &batch)?;
                out.push(g.entries().to_vec());
            }
            let gen_g = out.pop().expect("two arms");
            let up_g = out.pop().expect("two arms");
            Ok((up_g, gen_g))
        })
        .collect::<Result<Vec<_>>>()?;

    type GradPair = (Vec<f64>, Vec<f64>);
    let arm = |pick: &dyn Fn(&GradPair) -> &Vec<f64>| -> VarianceArm {
        let mut mean = vec![0.0f64; entries];
        for g in &grads {
            for (m, v) in mean.iter_mut().zip(pick(g)) {
                *m += v;
            }
        }
        let inv = 1.0 / grads.len() as f64;
        for m in mean.iter_mut() {
            *m *= inv;
        }
        let devs: Vec<f64> = grads
            .iter()
            .map(|g| {
                pick(g)
                    .iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .collect();
        let (m, se) = mean_and_se(&devs);
        VarianceArm { mean: m, se }
    };
    Ok((arm(&|g| &g.0), arm(&|g| &g.1)))
}

/// The stratified mini-batch gradient variance of the upsampling process
/// exceeds the generation process, with the ratio growing in k. Each trial
/// redraws a fresh base, builds both arms from it, and draws one batch per
/// arm with a shared index stream.
pub fn check_variance_inflation(cfg: &CheckConfig, master_seed: u64) -> Result<CheckReport> {
    cfg.validate()?;
    let model = seed_model(cfg, master_seed, 0)?;
    let mut measured = BTreeMap::new();
    let mut notes = vec![
        "per-trial fresh base; deviations taken around the across-trial mean gradient".into(),
        "CI separation: gap > 1.96 combined se; arms share the batch index stream".into(),
    ];
    let mut ratios = Vec::new();
    let mut ks = Vec::new();
    let mut separated_all = true;
    let mut k1_ok = true;
    for &k in &cfg.k_values {
        let (u, g) = variance_of_process(cfg, master_seed, k, &model)?;
        let ratio = u.mean / g.mean.max(1e-300);
        measured.insert(format!("measured_u_k{k}"), u.mean);
        measured.insert(format!("measured_g_k{k}"), g.mean);
        measured.insert(format!("ratio_k{k}"), ratio);
        measured.insert(
            format!("bound_factor_k{k}"),
            variance_bound_factor(k, cfg.params.alpha, cfg.batch, cfg.params.n),
        );
        let combined = (u.se * u.se + g.se * g.se).sqrt();
        if k == 1 {
            k1_ok = (u.mean - g.mean).abs() <= 2.0 * combined;
            measured.insert("k1_abs_gap".into(), (u.mean - g.mean).abs());
        } else {
            if u.mean - g.mean <= 1.96 * combined {
                separated_all = false;
            }
            ratios.push(ratio);
            ks.push(f64::from(k));
        }
    }
    let trend = if ratios.len() >= 2 {
        spearman(&ks, &ratios)
    } else {
        1.0
    };
    measured.insert("ratio_trend_spearman".into(), trend);
    let n_new = |k: u32| cfg.params.n as f64 * (cfg.params.alpha + f64::from(k) * (1.0 - cfg.params.alpha));
    notes.push(format!(
        "strata rounded to nearest: exact proportions are non-integral (e.g. B1 = {:.4} at k={})",
        cfg.batch as f64 * cfg.params.alpha * cfg.params.n as f64 / n_new(cfg.k),
        cfg.k
    ));
    Ok(CheckReport {
        name: "variance_inflation".into(),
        passed: separated_all && k1_ok && trend > 0.0,
        measured,
        regime_ok: true,
        seeds: cfg.seeds,
        notes,
    })
}

struct ConvSeedOutcome {
    // Per k in cfg.k_values, test errors for the two arms.
    err_u: Vec<f64>,
    err_g: Vec<f64>,
    // Loss trajectories at the headline k.
    loss_u: Vec<f64>,
    loss_g: Vec<f64>,
    premise_holds: bool,
}

/// The k-sweep trend: matched-budget SGD on the generated dataset
/// generalizes better than on the upsampled one at the headline k, the
/// upsampling test-error curve bottoms out at small k while the generation
/// curve keeps improving, and (gated on the measured variance premise)
/// generation reaches the loss threshold no later.
pub fn check_convergence_and_generalization(
    cfg: &CheckConfig,
    master_seed: u64,
) -> Result<CheckReport> {
    cfg.validate()?;
    let outcomes: Vec<ConvSeedOutcome> = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|s| -> Result<ConvSeedOutcome> {
            let base = seed_dataset(cfg, master_seed, s)?;
            let basis = basis_for(cfg)?;
            let mut eval_params = cfg.params.clone();
            eval_params.n = cfg.eval_n;
            let eval = sample_dataset(
                &eval_params,
                &basis,
                derive_seed(master_seed, "eval", s),
                true,
            )?;
            let model0 = seed_model(cfg, master_seed, s)?;
            let mut out = ConvSeedOutcome {
                err_u: Vec::new(),
                err_g: Vec::new(),
                loss_u: Vec::new(),
                loss_g: Vec::new(),
                premise_holds: false,
            };
            for &k in &cfg.k_values {
                let up = upsample(&base, k)?;
                let gen = generate(
                    &base,
                    k,
                    &gen_params(cfg, cfg.sigma_gamma),
                    derive_seed(master_seed, "gen", s * 1000 + u64::from(k)),
                )?;
                let train_seed = derive_seed(master_seed, "train", s * 1000 + u64::from(k));
                let opt = OptimizerConfig::sgd(
                    cfg.eta,
                    cfg.batch,
                    Sampling::WithoutReplacement,
                    cfg.steps,
                );
                let (mu, ru) = train(&model0, &up, &opt, &base.basis, false, None, train_seed)?;
                let (mg, rg) = train(&model0, &gen, &opt, &base.basis, false, None, train_seed)?;
                out.err_u.push(zero_one_error(&mu, &eval)?);
                out.err_g.push(zero_one_error(&mg, &eval)?);
                if k == cfg.k {
                    out.loss_u = ru.steps.iter().map(|r| r.loss).collect();
                    out.loss_g = rg.steps.iter().map(|r| r.loss).collect();
                    let var_u = per_example_variance(&model0, &up)?;
                    let var_g = per_example_variance(&model0, &gen)?;
                    out.premise_holds = var_g <= var_u;
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let k_pos = cfg
        .k_values
        .iter()
        .position(|&k| k == cfg.k)
        .ok_or_else(|| Error::InvalidConfig("headline k must appear in k_values".into()))?;

    // (b) generation beats upsampling on fresh-sample error at the headline k.
    let wins = outcomes
        .iter()
        .filter(|o| o.err_g[k_pos] < o.err_u[k_pos])
        .count();
    let win_frac = wins as f64 / outcomes.len() as f64;

    // (c) argmin of the seed-mean error curves.
    let mean_curve = |pick: &dyn Fn(&ConvSeedOutcome) -> &Vec<f64>| -> Vec<f64> {
        (0..cfg.k_values.len())
            .map(|i| outcomes.iter().map(|o| pick(o)[i]).sum::<f64>() / outcomes.len() as f64)
            .collect()
    };
    let curve_u = mean_curve(&|o| &o.err_u);
    let curve_g = mean_curve(&|o| &o.err_g);
    let argmin = |curve: &[f64]| -> u32 {
        let mut best = 0;
        for (i, v) in curve.iter().enumerate() {
            if *v < curve[best] {
                best = i;
            }
        }
        cfg.k_values[best]
    };
    let argmin_u = argmin(&curve_u);
    let argmin_g = argmin(&curve_g);

    // (a) convergence to the pooled 25th-percentile final loss, gated on
    // the per-seed variance premise.
    let mut finals: Vec<f64> = outcomes
        .iter()
        .flat_map(|o| {
            [
                *o.loss_u.last().expect("nonempty trajectory"),
                *o.loss_g.last().expect("nonempty trajectory"),
            ]
        })
        .collect();
    finals.sort_by(f64::total_cmp);
    let threshold = finals[(finals.len() - 1) / 4];
    let hit = |traj: &[f64]| traj.iter().position(|&l| l <= threshold).unwrap_or(usize::MAX);
    let premise_seeds: Vec<&ConvSeedOutcome> =
        outcomes.iter().filter(|o| o.premise_holds).collect();
    let conv_wins = premise_seeds
        .iter()
        .filter(|o| hit(&o.loss_g) <= hit(&o.loss_u))
        .count();
    // -1 marks the clause as skipped (premise held in no seed).
    let conv_frac = if premise_seeds.is_empty() {
        -1.0
    } else {
        conv_wins as f64 / premise_seeds.len() as f64
    };
    let premise_frac = premise_seeds.len() as f64 / outcomes.len() as f64;

    let mut measured = BTreeMap::new();
    for (i, &k) in cfg.k_values.iter().enumerate() {
        measured.insert(format!("err_u_k{k}"), curve_u[i]);
        measured.insert(format!("err_g_k{k}"), curve_g[i]);
    }
    measured.insert("gen_win_fraction".into(), win_frac);
    measured.insert("argmin_u".into(), f64::from(argmin_u));
    measured.insert("argmin_g".into(), f64::from(argmin_g));
    measured.insert("conv_fraction".into(), conv_frac);
    measured.insert("premise_fraction".into(), premise_frac);
    measured.insert("loss_threshold".into(), threshold);

    let conv_ok = premise_seeds.is_empty() || conv_frac >= 0.7;
    let mut notes = vec![
        "matched budget: same batch stream, eta, steps for both arms".into(),
        "threshold: 25th percentile of pooled final training losses at the headline k".into(),
    ];
    if premise_seeds.is_empty() {
        notes.push("variance premise held in no seed; convergence clause skipped".into());
    }
    Ok(CheckReport {
        name: "convergence_and_generalization".into(),
        passed: win_frac >= 0.8 && argmin_u <= 2 && argmin_g > 2 && conv_ok,
        measured,
        regime_ok: true,
        seeds: cfg.seeds,
        notes,
    })
}
