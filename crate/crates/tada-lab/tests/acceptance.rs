//! Acceptance gate: nine criteria, each printing one PASS/FAIL line with its
//! pinned tolerances. Run
//!
//!     cargo test --test acceptance -- --test-threads=1 --nocapture
//!
//! to see every line; a failing criterion prints its line in the failure
//! output either way.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use tada_lab::analysis::partition_noise_sets;
use tada_lab::cnn::{grad_finite_difference, grad_full, init_model, InitConfig};
use tada_lab::harness::{cli_main, run_compare_selection, RunConfig};
use tada_lab::optim::OptimizerConfig;
use tada_lab::rng::{derive_seed, substream};
use tada_lab::selection::{identify_slow, SelectionConfig, SelectionStrategy};
use tada_lab::synthdata::{
    make_feature_basis, sample_dataset, BasisMode, DistributionParams, NoiseMode,
};
use tada_lab::theoremcheck::{run_check, CheckConfig, RhoChoice};

fn report(n: usize, name: &str, ok: bool, started: Instant, detail: &str) {
    println!(
        "criterion {n} ({name}): {} [{:.1}s] {detail}",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

#[test]
fn criterion_1_gradient_matches_finite_differences() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for c in 0..100u64 {
        let mut rng = substream(7, "fd-config", c);
        let dim = rng.random_range(3..=32usize);
        let filters = rng.random_range(1..=8usize);
        let noise_mode = match c % 3 {
            0 => NoiseMode::Raw,
            1 => NoiseMode::FeatureOrthogonal,
            _ => NoiseMode::MutuallyOrthogonal,
        };
        let n_cap = if noise_mode == NoiseMode::MutuallyOrthogonal {
            (dim - 2).min(64)
        } else {
            64
        };
        let n = rng.random_range(1..=n_cap);
        let beta_d = rng.random_range(0.2..1.2);
        let params = DistributionParams {
            beta_e: beta_d + rng.random_range(0.1..1.2),
            beta_d,
            alpha: rng.random_range(0.1..0.9),
            sigma_p: rng.random_range(0.2..2.0),
            dim,
            patches: 2,
            n,
            noise_mode,
        };
        let basis = make_feature_basis(dim, BasisMode::Canonical, 0).unwrap();
        let ds = sample_dataset(&params, &basis, derive_seed(7, "fd-data", c), false).unwrap();
        let model = init_model(
            dim,
            filters,
            InitConfig {
                sigma_0: rng.random_range(0.05..0.3),
                seed: derive_seed(7, "fd-init", c),
            },
        )
        .unwrap();
        let g = grad_full(&model, &ds).unwrap();
        let fd = grad_finite_difference(&model, &ds, 1e-5).unwrap();
        let diff: f64 = g
            .entries()
            .iter()
            .zip(fd.entries())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = g.entries().iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1e-12));
    }
    let in_budget = started.elapsed().as_secs() <= 30;
    report(
        1,
        "gradient vs central differences",
        worst <= 1e-6 && in_budget,
        started,
        &format!("100 random configs, step 1e-5, worst rel {worst:.3e} (tol 1e-6)"),
    );
}

#[test]
fn criterion_2_noise_gradient_amplification_is_exact() {
    let started = Instant::now();
    let mut cfg = CheckConfig::thm2_default();
    cfg.seeds = 20;
    cfg.k_values = vec![2, 3, 5];
    cfg.exact_tol = 1e-12;
    let r = run_check("upsample_amplification", &cfg, 1).unwrap();
    report(
        2,
        "k-fold noise gradient amplification",
        r.passed && r.regime_ok,
        started,
        &format!(
            "k in {{2,3,5}}, 20 seeds, max rel {:.3e} (tol 1e-12)",
            r.measured["max_rel_error"]
        ),
    );
}

#[test]
fn criterion_3_sam_preserves_noise_sets_below_bound() {
    let started = Instant::now();
    let mut cfg = CheckConfig::thm1_default();
    cfg.rho = RhoChoice::FractionOfBound(0.5);
    let r = run_check("sam_vs_gd_noisealign", &cfg, 1).unwrap();
    let ok = r.regime_ok && r.measured["rho"] > 0.0 && r.measured["set_mismatches"] == 0.0;
    report(
        3,
        "set preservation under the ascent step",
        ok,
        started,
        &format!(
            "rho at 0.5 x the bound per checkpoint (min bound {:.3e}), 20 seeds, \
             {} set mismatches (tol 0)",
            r.measured["rho_bound_conservative"], r.measured["set_mismatches"]
        ),
    );
}

#[test]
fn criterion_4_noise_alignment_dynamics_at_default_scale() {
    let started = Instant::now();
    let cfg = CheckConfig::thm1_default();
    let inert = run_check("inert_noises", &cfg, 1).unwrap();
    let sam = run_check("sam_vs_gd_noisealign", &cfg, 1).unwrap();
    let a = inert.passed && inert.regime_ok && inert.measured["violation_fraction"] <= 1e-3;
    let b = sam.passed
        && sam.regime_ok
        && sam.measured["strict_filter_count"] == sam.measured["filter_count"];

    let mut plus_fraction = 0.0;
    let mut cells = 0usize;
    for s in 0..20u64 {
        let basis = make_feature_basis(cfg.params.dim, BasisMode::Canonical, 0).unwrap();
        let ds = sample_dataset(&cfg.params, &basis, derive_seed(1, "balance-data", s), true)
            .unwrap();
        let model = init_model(
            cfg.params.dim,
            cfg.filters,
            InitConfig {
                sigma_0: cfg.sigma_0,
                seed: derive_seed(1, "balance-init", s),
            },
        )
        .unwrap();
        for j in 0..cfg.filters {
            let part = partition_noise_sets(&model, &ds, j, None).unwrap();
            plus_fraction += part.plus_set.len() as f64 / ds.len() as f64;
            cells += 1;
        }
    }
    plus_fraction /= cells as f64;
    let c = (0.47..=0.53).contains(&plus_fraction);
    let in_budget = started.elapsed().as_secs() <= 300;
    report(
        4,
        "sign dynamics at the default scale",
        a && b && c && in_budget,
        started,
        &format!(
            "violations {:.2e} of {} triples (tol 1e-3); strict SAM<GD on {}/{} filters; \
             fresh-init plus fraction {plus_fraction:.4} (pin [0.47, 0.53])",
            inert.measured["violation_fraction"],
            inert.measured["triple_count"],
            sam.measured["strict_filter_count"],
            sam.measured["filter_count"]
        ),
    );
}

#[test]
fn criterion_5_generation_cuts_noise_alignment_in_expectation() {
    let started = Instant::now();
    let cfg = CheckConfig::thm2_default();
    let r = run_check("gen_vs_up_expectation", &cfg, 1).unwrap();
    let mu = r.measured["noisealign_up_mean"];
    let su = r.measured["noisealign_up_se"];
    let mg = r.measured["noisealign_gen_mean"];
    let sg = r.measured["noisealign_gen_se"];
    let separated = mg + 1.96 * sg < mu - 1.96 * su;
    let in_budget = started.elapsed().as_secs() <= 600;
    report(
        5,
        "upsampled vs generated noise alignment",
        r.passed && r.regime_ok && separated && in_budget,
        started,
        &format!(
            "200 seeds, k 3: upsampled {mu:.4e} +- {su:.1e}, generated {mg:.4e} +- {sg:.1e}, \
             95% CIs disjoint; ratio {:.3}",
            r.measured["up_over_gen_ratio"]
        ),
    );
}

#[test]
fn criterion_6_minibatch_variance_inflation() {
    let started = Instant::now();
    let cfg = CheckConfig::thm3_default();
    let r = run_check("variance_inflation", &cfg, 1).unwrap();
    let reference = (r.measured["bound_factor_k2"] - 10.0 / 9.0).abs() <= 1e-12;
    report(
        6,
        "variance inflation of replicated noise",
        r.passed && r.regime_ok && reference,
        started,
        &format!(
            "10^4 batches, alpha 0.5, B 25, N 100: ratios k2..k5 {:.3}/{:.3}/{:.3}/{:.3} vs \
             bound factors {:.4}/{:.4}/{:.4}/{:.4}, k2 reference 1.1111, k1 gap {:.1e} \
             (within 2 SE), trend rank corr {:.2} > 0",
            r.measured["ratio_k2"],
            r.measured["ratio_k3"],
            r.measured["ratio_k4"],
            r.measured["ratio_k5"],
            r.measured["bound_factor_k2"],
            r.measured["bound_factor_k3"],
            r.measured["bound_factor_k4"],
            r.measured["bound_factor_k5"],
            r.measured["k1_abs_gap"],
            r.measured["ratio_trend_spearman"]
        ),
    );
}

#[test]
fn criterion_7_generation_beats_upsampling_downstream() {
    let started = Instant::now();
    let cfg = CheckConfig::cor1_default();
    let r = run_check("convergence_and_generalization", &cfg, 1).unwrap();
    let win = r.measured["gen_win_fraction"];
    let (au, ag) = (r.measured["argmin_u"], r.measured["argmin_g"]);
    let ok = r.passed && r.regime_ok && win >= 0.8 && au <= 2.0 && ag > au;
    let in_budget = started.elapsed().as_secs() <= 1200;
    report(
        7,
        "test error across the k sweep",
        ok && in_budget,
        started,
        &format!(
            "64 seeds, k 4: generated wins {:.0}% (pin >= 80%); argmin k upsampled {au} \
             (pin <= 2) < generated {ag}; convergence fraction {:.2} (pin >= 0.7)",
            win * 100.0,
            r.measured["conv_fraction"]
        ),
    );
}

#[test]
fn criterion_8_clustered_selection_quality_and_downstream() {
    let started = Instant::now();
    let check = CheckConfig::select_default();
    let basis = make_feature_basis(check.params.dim, BasisMode::Canonical, 0).unwrap();
    let mut recall = 0.0;
    let mut precision = 0.0;
    for s in 0..10u64 {
        let base =
            sample_dataset(&check.params, &basis, derive_seed(1, "sel-data", s), true).unwrap();
        let model = init_model(
            check.params.dim,
            check.filters,
            InitConfig {
                sigma_0: check.sigma_0,
                seed: derive_seed(1, "sel-init", s),
            },
        )
        .unwrap();
        let early_opt = OptimizerConfig::gd(check.eta, 30);
        let (early, _) = tada_lab::optim::train(
            &model,
            &base,
            &early_opt,
            &base.basis,
            false,
            None,
            derive_seed(1, "sel-early", s),
        )
        .unwrap();
        let mut sel_cfg = SelectionConfig {
            strategy: SelectionStrategy::Cluster2,
            ..SelectionConfig::default()
        };
        let cl: BTreeSet<usize> = identify_slow(&early, &base, &sel_cfg)
            .unwrap()
            .indices
            .into_iter()
            .collect();
        sel_cfg.strategy = SelectionStrategy::Oracle;
        let or: BTreeSet<usize> = identify_slow(&early, &base, &sel_cfg)
            .unwrap()
            .indices
            .into_iter()
            .collect();
        let hit = cl.intersection(&or).count() as f64;
        recall += hit / or.len() as f64;
        precision += if cl.is_empty() { 0.0 } else { hit / cl.len() as f64 };
    }
    recall /= 10.0;
    precision /= 10.0;

    let run_cfg = RunConfig {
        preset: "select_default".into(),
        check,
        strategies: vec![SelectionStrategy::Cluster2, SelectionStrategy::HighLoss(0.5)],
        ..RunConfig::default()
    };
    let rows = run_compare_selection(&run_cfg).unwrap();
    let err_of = |name: &str| rows.iter().find(|r| r.strategy == name).unwrap().mean_err;
    let downstream = err_of("cluster2") <= err_of("high_loss_0.5");

    report(
        8,
        "selection quality and downstream error",
        recall >= 0.9 && precision >= 0.8 && downstream,
        started,
        &format!(
            "10 seeds, 30 early steps: recall {recall:.3} (pin >= 0.9), precision \
             {precision:.3} (pin >= 0.8); retrained error cluster {:.4} <= high-loss {:.4}",
            err_of("cluster2"),
            err_of("high_loss_0.5")
        ),
    );
}

fn run_cli_into(cfg: &RunConfig, subcommand: &str, dir: &Path) -> i32 {
    let config_path = dir.join("config-in.json");
    fs::write(&config_path, cfg.to_json().unwrap()).unwrap();
    let out = dir.join("out");
    cli_main([
        "tada-lab",
        subcommand,
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn artifact_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let out = dir.join("out");
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let bytes = fs::read(out.join(&n)).unwrap();
            (n, bytes)
        })
        .collect()
}

fn identical_reruns(cfg: &RunConfig, subcommand: &str) -> (bool, String) {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let code_a = run_cli_into(cfg, subcommand, dir_a.path());
    let code_b = run_cli_into(cfg, subcommand, dir_b.path());
    if code_a != 0 || code_b != 0 {
        return (false, format!("{subcommand} exited {code_a}/{code_b}"));
    }
    let a = artifact_bytes(dir_a.path());
    let b = artifact_bytes(dir_b.path());
    let names_a: Vec<&String> = a.iter().map(|(n, _)| n).collect();
    let names_b: Vec<&String> = b.iter().map(|(n, _)| n).collect();
    if names_a != names_b {
        return (false, format!("{subcommand} artifact sets differ: {names_a:?} vs {names_b:?}"));
    }
    for ((name, bytes_a), (_, bytes_b)) in a.iter().zip(&b) {
        if name == "manifest.json" {
            let mut ma: serde_json::Value = serde_json::from_slice(bytes_a).unwrap();
            let mut mb: serde_json::Value = serde_json::from_slice(bytes_b).unwrap();
            // the two runs write to different directories by construction
            ma["config"]["output_dir"] = serde_json::Value::Null;
            mb["config"]["output_dir"] = serde_json::Value::Null;
            if ma["files"] != mb["files"] || ma["config"] != mb["config"] {
                return (false, format!("{subcommand} manifests disagree beyond timestamp"));
            }
        } else if bytes_a != bytes_b {
            return (false, format!("{subcommand} artifact {name} differs between reruns"));
        }
    }
    (true, format!("{subcommand}: {} artifacts byte-identical", a.len() - 1))
}

#[test]
fn criterion_9_reruns_are_byte_identical() {
    let started = Instant::now();
    let mut verify_cfg = RunConfig::default();
    verify_cfg.check.params = DistributionParams {
        beta_e: 1.5,
        beta_d: 1.0,
        alpha: 0.5,
        sigma_p: 1.0,
        dim: 64,
        patches: 2,
        n: 24,
        noise_mode: NoiseMode::MutuallyOrthogonal,
    };
    verify_cfg.check.filters = 3;
    verify_cfg.check.sigma_0 = 0.1;
    verify_cfg.check.steps = 6;
    verify_cfg.check.warmup = 2;
    verify_cfg.check.batch = 8;
    verify_cfg.check.seeds = 3;
    verify_cfg.check.eval_n = 200;
    let (verify_ok, verify_detail) = identical_reruns(&verify_cfg, "verify");

    let mut sweep_cfg = verify_cfg.clone();
    sweep_cfg.check.params.dim = 32;
    sweep_cfg.check.params.noise_mode = NoiseMode::FeatureOrthogonal;
    sweep_cfg.check.k_values = vec![1, 2];
    sweep_cfg.plots = true;
    let (sweep_ok, sweep_detail) = identical_reruns(&sweep_cfg, "sweep-k");

    report(
        9,
        "byte-identical reruns",
        verify_ok && sweep_ok,
        started,
        &format!("{verify_detail}; {sweep_detail}"),
    );
}
