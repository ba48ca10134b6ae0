//! CLI, configuration, persistence, and report emission: ties the other
//! modules into reproducible experiments. CSV and JSON are the contract;
//! SVG plots are a convenience rendered without a plotting dependency.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::estimate_minibatch_variance;
use crate::cnn::{init_model, CnnModel, InitConfig};
use crate::fmt::sig17;
use crate::optim::{gd_step, train, zero_one_error, OptimizerConfig, Sampling};
use crate::rng::derive_seed;
use crate::selection::{
    build_augmented_from_selection, identify_slow, SelectionConfig, SelectionStrategy,
};
use crate::synthdata::{
    generate, make_feature_basis, sample_dataset, upsample, AugmentMode, BasisMode, Dataset,
    GenerationNoiseParams, NoiseMode,
};
use crate::theoremcheck::{preset_check_names, run_check, CheckConfig, CheckReport};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    Both,
}

impl OutputFormat {
    fn csv(self) -> bool {
        matches!(self, OutputFormat::Csv | OutputFormat::Both)
    }
    fn json(self) -> bool {
        matches!(self, OutputFormat::Json | OutputFormat::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    GenData,
    Train,
    Select,
    SweepK,
    Compare,
    Verify,
    Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    /// Name of the preset `check` was derived from, for the manifest.
    pub preset: String,
    pub check: CheckConfig,
    pub selection: SelectionConfig,
    /// Arms for `compare`; a no-augmentation baseline row is always added.
    pub strategies: Vec<SelectionStrategy>,
    /// Optimizer for `train`.
    pub optimizer: OptimizerConfig,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub format: OutputFormat,
    pub plots: bool,
    pub threads: Option<usize>,
    /// `sweep-k` only: also run the convergence check and fail on red.
    pub assert_trend: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let check = CheckConfig::thm1_default();
        let optimizer = OptimizerConfig::gd(check.eta, check.steps);
        RunConfig {
            experiment: Experiment::Verify,
            preset: "thm1_default".into(),
            check,
            selection: SelectionConfig::default(),
            strategies: vec![
                SelectionStrategy::Cluster2,
                SelectionStrategy::HighLoss(0.5),
                SelectionStrategy::Misclassified,
                SelectionStrategy::Oracle,
            ],
            optimizer,
            master_seed: 1,
            output_dir: PathBuf::from("runs/out"),
            format: OutputFormat::Both,
            plots: false,
            threads: None,
            assert_trend: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.check.validate()?;
        if self.experiment == Experiment::Compare && self.strategies.is_empty() {
            return Err(Error::InvalidConfig(
                "compare needs at least one selection strategy".into(),
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::InvalidConfig("output_dir must not be empty".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub artifact_version: String,
    /// Wall-clock seconds; the one field exempt from byte-identity.
    pub timestamp_unix: u64,
    /// Relative file name -> SHA-256 of contents, for every file in the
    /// output directory except the manifest itself.
    pub files: BTreeMap<String, String>,
}

struct OutputDir {
    dir: PathBuf,
}

impl OutputDir {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutputDir { dir: dir.to_path_buf() })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        Ok(())
    }

    fn read(&self, name: &str) -> Result<Vec<u8>> {
        Ok(fs::read(self.dir.join(name))?)
    }

    /// Hashes everything in the directory and writes `manifest.json`.
    fn finish(&self, config: &RunConfig) -> Result<RunManifest> {
        let mut names: Vec<String> = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                let name = entry.file_name().to_string_lossy().into_owned();
                if name != "manifest.json" {
                    names.push(name);
                }
            }
        }
        names.sort();
        let mut files = BTreeMap::new();
        for name in names {
            let bytes = fs::read(self.dir.join(&name))?;
            files.insert(name, hex_digest(&bytes));
        }
        let manifest = RunManifest {
            config: config.clone(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            files,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(manifest)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(64);
    for b in Sha256::digest(bytes) {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

// ---------------------------------------------------------------------------
// Plots

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Optional (lo, hi) band, same length as `xs`.
    pub band: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotStyle {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        return format!("{v:.2e}");
    }
    let mut s = format!("{v:.4}");
    while s.contains('.') && (s.ends_with('0') || s.ends_with('.')) {
        s.pop();
    }
    s
}

/// Renders a line/band chart as a standalone SVG string. Pure function of
/// its inputs, so identical input gives identical bytes.
pub fn render_plot(series: &[Series], style: &PlotStyle) -> Result<String> {
    if series.is_empty() {
        return Err(Error::InvalidConfig("plot needs at least one series".into()));
    }
    for s in series {
        if s.xs.is_empty() || s.xs.len() != s.ys.len() {
            return Err(Error::InvalidConfig(format!(
                "series '{}' needs matching nonempty xs/ys",
                s.label
            )));
        }
        if let Some((lo, hi)) = &s.band {
            if lo.len() != s.xs.len() || hi.len() != s.xs.len() {
                return Err(Error::InvalidConfig(format!(
                    "series '{}' band length mismatch",
                    s.label
                )));
            }
        }
    }
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (62.0, 14.0, 30.0, 46.0);
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &x in &s.xs {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
        }
        for &y in &s.ys {
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        if let Some((lo, hi)) = &s.band {
            for &v in lo.iter().chain(hi) {
                ymin = ymin.min(v);
                ymax = ymax.max(v);
            }
        }
    }
    if xmin == xmax {
        xmin -= 1.0;
        xmax += 1.0;
    }
    if ymin == ymax {
        let pad = if ymin == 0.0 { 1.0 } else { ymin.abs() * 0.1 };
        ymin -= pad;
        ymax += pad;
    } else {
        let pad = (ymax - ymin) * 0.05;
        ymin -= pad;
        ymax += pad;
    }
    let sx = |v: f64| ml + (v - xmin) / (xmax - xmin) * (w - ml - mr);
    let sy = |v: f64| h - mb - (v - ymin) / (ymax - ymin) * (h - mt - mb);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        (ml + w - mr) / 2.0,
        style.title
    );
    for i in 0..5 {
        let fx = xmin + (xmax - xmin) * i as f64 / 4.0;
        let fy = ymin + (ymax - ymin) * i as f64 / 4.0;
        let px = sx(fx);
        let py = sy(fy);
        let _ = writeln!(
            svg,
            "<line x1=\"{px:.2}\" y1=\"{:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"#ddd\"/>",
            sy(ymin),
            sy(ymax)
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{py:.2}\" x2=\"{:.2}\" y2=\"{py:.2}\" stroke=\"#ddd\"/>",
            sx(xmin),
            sx(xmax)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            h - mb + 18.0,
            tick_label(fx)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            ml - 8.0,
            py + 4.0,
            tick_label(fy)
        );
    }
    let _ = write!(
        svg,
        "<line x1=\"{ml}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{0:.2}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{:.2}\" x2=\"{ml}\" y2=\"{0:.2}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        mt
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
        (ml + w - mr) / 2.0,
        h - 8.0,
        style.x_label
    );
    let _ = writeln!(
        svg,
        "<text x=\"14\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {0:.2})\">{}</text>",
        (mt + h - mb) / 2.0,
        style.y_label
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some((lo, hi)) = &s.band {
            let mut pts = String::new();
            for (x, v) in s.xs.iter().zip(lo) {
                let _ = write!(pts, "{:.2},{:.2} ", sx(*x), sy(*v));
            }
            for (x, v) in s.xs.iter().zip(hi).rev() {
                let _ = write!(pts, "{:.2},{:.2} ", sx(*x), sy(*v));
            }
            let _ = writeln!(
                svg,
                "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.18\" stroke=\"none\"/>",
                pts.trim_end()
            );
        }
        let mut pts = String::new();
        for (x, y) in s.xs.iter().zip(&s.ys) {
            let _ = write!(pts, "{:.2},{:.2} ", sx(*x), sy(*y));
        }
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>",
            pts.trim_end()
        );
        let ly = mt + 16.0 * i as f64 + 8.0;
        let _ = write!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
            ml + 8.0,
            ml + 30.0,
            ml + 36.0,
            ly + 4.0,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_plot(series: &[Series], style: &PlotStyle, path: &Path) -> Result<()> {
    let svg = render_plot(series, style)?;
    fs::write(path, svg)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Experiment pipelines

fn seed_inputs(cfg: &RunConfig, s: u64) -> Result<(Dataset, CnnModel, Dataset)> {
    let check = &cfg.check;
    let basis = make_feature_basis(check.params.dim, BasisMode::Canonical, 0)?;
    let base = sample_dataset(
        &check.params,
        &basis,
        derive_seed(cfg.master_seed, "data", s),
        true,
    )?;
    let model = init_model(
        check.params.dim,
        check.filters,
        InitConfig {
            sigma_0: check.sigma_0,
            seed: derive_seed(cfg.master_seed, "init", s),
        },
    )?;
    let mut eval_params = check.params.clone();
    eval_params.n = check.eval_n;
    // Exact mutual orthogonality caps the sample count at dim - 2; fresh
    // eval noise at these sizes is near-orthogonal anyway.
    if eval_params.noise_mode == NoiseMode::MutuallyOrthogonal
        && eval_params.n + 2 > eval_params.dim
    {
        eval_params.noise_mode = NoiseMode::FeatureOrthogonal;
    }
    let eval = sample_dataset(
        &eval_params,
        &basis,
        derive_seed(cfg.master_seed, "eval", s),
        true,
    )?;
    Ok((base, model, eval))
}

fn matched_gen(check: &CheckConfig) -> GenerationNoiseParams {
    GenerationNoiseParams {
        sigma_gamma: check.sigma_gamma,
        orthogonalize: true,
    }
}

fn mean_ci(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, mean, mean);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let half = 1.96 * (var / n).sqrt();
    (mean, mean - half, mean + half)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: u32,
    pub mode: AugmentMode,
    pub mean_err: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub seeds: usize,
}

/// Trains matched-budget SGD on upsampled and generated datasets for every
/// k and aggregates fresh-sample test error over seeds.
pub fn run_sweep_k(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let check = &cfg.check;
    if check.k_values.is_empty() {
        return Err(Error::InvalidConfig("k list must be nonempty".into()));
    }
    let per_seed: Vec<Vec<(f64, f64)>> = (0..check.seeds as u64)
        .into_par_iter()
        .map(|s| -> Result<Vec<(f64, f64)>> {
            let (base, model, eval) = seed_inputs(cfg, s)?;
            let mut errs = Vec::with_capacity(check.k_values.len());
            for &k in &check.k_values {
                let up = upsample(&base, k)?;
                let gen = generate(
                    &base,
                    k,
                    &matched_gen(check),
                    derive_seed(cfg.master_seed, "gen", s * 1000 + u64::from(k)),
                )?;
                let opt = OptimizerConfig::sgd(
                    check.eta,
                    check.batch,
                    Sampling::WithoutReplacement,
                    check.steps,
                );
                let train_seed = derive_seed(cfg.master_seed, "train", s * 1000 + u64::from(k));
                let (mu, _) = train(&model, &up, &opt, &base.basis, false, None, train_seed)?;
                let (mg, _) = train(&model, &gen, &opt, &base.basis, false, None, train_seed)?;
                errs.push((zero_one_error(&mu, &eval)?, zero_one_error(&mg, &eval)?));
            }
            Ok(errs)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (i, &k) in check.k_values.iter().enumerate() {
        for mode in [AugmentMode::Upsample, AugmentMode::Generate] {
            let vals: Vec<f64> = per_seed
                .iter()
                .map(|errs| match mode {
                    AugmentMode::Upsample => errs[i].0,
                    AugmentMode::Generate => errs[i].1,
                })
                .collect();
            let (mean, lo, hi) = mean_ci(&vals);
            rows.push(SweepRow {
                k,
                mode,
                mean_err: mean,
                ci_lo: lo,
                ci_hi: hi,
                seeds: vals.len(),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub strategy: String,
    pub mean_err: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub selected_fraction: f64,
    pub seeds: usize,
}

fn strategy_name(s: &SelectionStrategy) -> String {
    match s {
        SelectionStrategy::Cluster2 => "cluster2".into(),
        SelectionStrategy::HighLoss(q) => format!("high_loss_{q}"),
        SelectionStrategy::Misclassified => "misclassified".into(),
        SelectionStrategy::Oracle => "oracle".into(),
    }
}

/// Full selection pipeline per strategy: early-train, select, augment by
/// generation, retrain from the same init, evaluate on fresh samples. A
/// no-augmentation baseline row is appended last.
pub fn run_compare_selection(cfg: &RunConfig) -> Result<Vec<CompareRow>> {
    if cfg.strategies.is_empty() {
        return Err(Error::InvalidConfig(
            "compare needs at least one selection strategy".into(),
        ));
    }
    let check = &cfg.check;
    let arms = cfg.strategies.len();
    let per_seed: Vec<(Vec<(f64, f64)>, f64)> = (0..check.seeds as u64)
        .into_par_iter()
        .map(|s| -> Result<(Vec<(f64, f64)>, f64)> {
            let (base, model0, eval) = seed_inputs(cfg, s)?;
            let early_opt = OptimizerConfig::gd(check.eta, cfg.selection.early_steps);
            let (early, _) = train(
                &model0,
                &base,
                &early_opt,
                &base.basis,
                false,
                None,
                derive_seed(cfg.master_seed, "early", s),
            )?;
            let retrain_opt = OptimizerConfig::gd(check.eta, check.steps);
            let mut rows = Vec::with_capacity(arms);
            for (a, strategy) in cfg.strategies.iter().enumerate() {
                let mut sel_cfg = cfg.selection;
                sel_cfg.strategy = *strategy;
                let sel = identify_slow(&early, &base, &sel_cfg)?;
                let aug = build_augmented_from_selection(
                    &base,
                    &sel,
                    check.k,
                    AugmentMode::Generate,
                    &matched_gen(check),
                    derive_seed(cfg.master_seed, "gen", s * 100 + a as u64),
                )?;
                let (m, _) = train(
                    &model0,
                    &aug,
                    &retrain_opt,
                    &base.basis,
                    false,
                    None,
                    derive_seed(cfg.master_seed, "retrain", s),
                )?;
                rows.push((zero_one_error(&m, &eval)?, sel.fraction));
            }
            let (m, _) = train(
                &model0,
                &base,
                &retrain_opt,
                &base.basis,
                false,
                None,
                derive_seed(cfg.master_seed, "retrain", s),
            )?;
            Ok((rows, zero_one_error(&m, &eval)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::with_capacity(arms + 1);
    for (a, strategy) in cfg.strategies.iter().enumerate() {
        let errs: Vec<f64> = per_seed.iter().map(|(rows, _)| rows[a].0).collect();
        let fracs: Vec<f64> = per_seed.iter().map(|(rows, _)| rows[a].1).collect();
        let (mean, lo, hi) = mean_ci(&errs);
        out.push(CompareRow {
            strategy: strategy_name(strategy),
            mean_err: mean,
            ci_lo: lo,
            ci_hi: hi,
            selected_fraction: fracs.iter().sum::<f64>() / fracs.len() as f64,
            seeds: errs.len(),
        });
    }
    let base_errs: Vec<f64> = per_seed.iter().map(|(_, b)| *b).collect();
    let (mean, lo, hi) = mean_ci(&base_errs);
    out.push(CompareRow {
        strategy: "none".into(),
        mean_err: mean,
        ci_lo: lo,
        ci_hi: hi,
        selected_fraction: 0.0,
        seeds: base_errs.len(),
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Command handlers

fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "mode", "mean_err", "ci_lo", "ci_hi", "seeds"])?;
    for r in rows {
        let mode = match r.mode {
            AugmentMode::Upsample => "upsample",
            AugmentMode::Generate => "generate",
        };
        w.write_record([
            r.k.to_string(),
            mode.to_string(),
            sig17(r.mean_err),
            sig17(r.ci_lo),
            sig17(r.ci_hi),
            r.seeds.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn compare_csv(rows: &[CompareRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "strategy",
        "mean_err",
        "ci_lo",
        "ci_hi",
        "selected_fraction",
        "seeds",
    ])?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            sig17(r.mean_err),
            sig17(r.ci_lo),
            sig17(r.ci_hi),
            sig17(r.selected_fraction),
            r.seeds.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn sweep_plot(rows: &[SweepRow]) -> Result<String> {
    let mut series = Vec::new();
    for (mode, label) in [
        (AugmentMode::Upsample, "upsample"),
        (AugmentMode::Generate, "generate"),
    ] {
        let picked: Vec<&SweepRow> = rows.iter().filter(|r| r.mode == mode).collect();
        series.push(Series {
            label: label.into(),
            xs: picked.iter().map(|r| f64::from(r.k)).collect(),
            ys: picked.iter().map(|r| r.mean_err).collect(),
            band: Some((
                picked.iter().map(|r| r.ci_lo).collect(),
                picked.iter().map(|r| r.ci_hi).collect(),
            )),
        });
    }
    render_plot(
        &series,
        &PlotStyle {
            title: "fresh-sample test error vs augmentation factor".into(),
            x_label: "k".into(),
            y_label: "test error".into(),
        },
    )
}

fn run_gen_data(cfg: &RunConfig, out: &OutputDir) -> Result<()> {
    let check = &cfg.check;
    let basis = make_feature_basis(check.params.dim, BasisMode::Canonical, 0)?;
    let base = sample_dataset(
        &check.params,
        &basis,
        derive_seed(cfg.master_seed, "data", 0),
        true,
    )?;
    if cfg.format.csv() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "index",
            "label",
            "feature_kind",
            "noise_id",
            "provenance",
            "noise_norm_sq",
        ])?;
        for (i, p) in base.points.iter().enumerate() {
            let norm_sq: f64 = p.noise_patch().iter().map(|v| v * v).sum();
            w.write_record([
                i.to_string(),
                p.label.to_string(),
                format!("{:?}", p.feature_kind).to_lowercase(),
                p.noise_id.to_string(),
                format!("{:?}", p.provenance).to_lowercase(),
                sig17(norm_sq),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        out.write("dataset.csv", &bytes)?;
    }
    if cfg.format.json() {
        let points: Vec<serde_json::Value> = base
            .points
            .iter()
            .map(|p| {
                serde_json::json!({
                    "label": p.label,
                    "feature_kind": p.feature_kind,
                    "noise_id": p.noise_id,
                    "provenance": p.provenance,
                    "feature_patch": p.feature_patch(),
                    "noise_patch": p.noise_patch(),
                })
            })
            .collect();
        let doc = serde_json::json!({
            "params": check.params,
            "seed": base.seed,
            "points": points,
        });
        out.write("dataset.json", &json_bytes(&doc)?)?;
    }
    Ok(())
}

fn run_train(cfg: &RunConfig, out: &OutputDir) -> Result<()> {
    let (base, model, eval) = seed_inputs(cfg, 0)?;
    let eval_set = (cfg.check.eval_n > 0).then_some(&eval);
    let (final_model, record) = train(
        &model,
        &base,
        &cfg.optimizer,
        &base.basis,
        true,
        eval_set,
        derive_seed(cfg.master_seed, "train", 0),
    )?;
    if cfg.format.csv() {
        let mut bytes = Vec::new();
        record.to_csv(&mut bytes)?;
        out.write("train_record.csv", &bytes)?;
    }
    let last = record.steps.last().expect("at least the initial record");
    let summary = serde_json::json!({
        "method": cfg.optimizer.method,
        "steps_run": record.steps.len() - 1,
        "final_loss": last.loss,
        "final_test_error": last.test_error,
        "flag": record.flag,
        "train_error": zero_one_error(&final_model, &base)?,
    });
    out.write("train_summary.json", &json_bytes(&summary)?)?;
    Ok(())
}

fn run_select(cfg: &RunConfig, out: &OutputDir) -> Result<()> {
    let (base, model, _) = seed_inputs(cfg, 0)?;
    let early_opt = OptimizerConfig::gd(cfg.check.eta, cfg.selection.early_steps);
    let (early, _) = train(
        &model,
        &base,
        &early_opt,
        &base.basis,
        false,
        None,
        derive_seed(cfg.master_seed, "early", 0),
    )?;
    let sel = identify_slow(&early, &base, &cfg.selection)?;
    if cfg.format.csv() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "feature_kind", "selected"])?;
        let mut selected = vec![false; base.len()];
        for &i in &sel.indices {
            selected[i] = true;
        }
        for (i, p) in base.points.iter().enumerate() {
            w.write_record([
                i.to_string(),
                format!("{:?}", p.feature_kind).to_lowercase(),
                u8::from(selected[i]).to_string(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        out.write("selection.csv", &bytes)?;
    }
    if cfg.format.json() {
        out.write("selection.json", &json_bytes(&sel)?)?;
    }
    Ok(())
}

/// Minibatch-variance trajectory along GD training of both arms at the
/// headline k; the desk-scale analogue of the variance-vs-epoch picture.
fn variance_vs_epoch_series(cfg: &RunConfig) -> Result<Vec<Series>> {
    let check = &cfg.check;
    let basis = make_feature_basis(check.params.dim, BasisMode::Canonical, 0)?;
    let base = sample_dataset(
        &check.params,
        &basis,
        derive_seed(cfg.master_seed, "plot-data", 0),
        true,
    )?;
    let up = upsample(&base, check.k)?;
    let gen = generate(
        &base,
        check.k,
        &matched_gen(check),
        derive_seed(cfg.master_seed, "plot-gen", 0),
    )?;
    let model0 = init_model(
        check.params.dim,
        check.filters,
        InitConfig {
            sigma_0: check.sigma_0,
            seed: derive_seed(cfg.master_seed, "plot-init", 0),
        },
    )?;
    let epochs = 12.min(check.steps.max(1));
    let stride = (check.steps / epochs).max(1);
    let mut series = Vec::new();
    for (ds, label) in [(&up, "upsample"), (&gen, "generate")] {
        let mut model = model0.clone();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let mut t = 0usize;
        loop {
            if t.is_multiple_of(stride) || t == check.steps {
                let est = estimate_minibatch_variance(
                    &model,
                    ds,
                    check.batch.min(ds.len()),
                    Sampling::Stratified,
                    2000,
                    derive_seed(cfg.master_seed, "plot-var", t as u64),
                )?;
                xs.push(t as f64);
                ys.push(est.mean_sq_dev);
                lo.push(est.mean_sq_dev - 1.96 * est.std_error);
                hi.push(est.mean_sq_dev + 1.96 * est.std_error);
            }
            if t == check.steps {
                break;
            }
            model = gd_step(&model, ds, check.eta)?;
            t += 1;
        }
        series.push(Series {
            label: label.into(),
            xs,
            ys,
            band: Some((lo, hi)),
        });
    }
    Ok(series)
}

fn reports_csv(reports: &[CheckReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["check", "passed", "regime_ok", "key", "value"])?;
    for r in reports {
        for (key, value) in &r.measured {
            w.write_record([
                r.name.clone(),
                r.passed.to_string(),
                r.regime_ok.to_string(),
                key.clone(),
                sig17(*value),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn run_verify(cfg: &RunConfig, out: &OutputDir) -> Result<bool> {
    let names = preset_check_names(&cfg.preset)?;
    let mut reports = Vec::with_capacity(names.len());
    for name in names {
        let report = run_check(name, &cfg.check, cfg.master_seed)?;
        println!(
            "check {}: {} (regime {})",
            report.name,
            if report.passed { "PASS" } else { "FAIL" },
            if report.regime_ok { "ok" } else { "violated" }
        );
        reports.push(report);
    }
    out.write("reports.json", &json_bytes(&reports)?)?;
    if cfg.format.csv() {
        out.write("reports.csv", &reports_csv(&reports)?)?;
    }
    if cfg.plots {
        if let Some(r) = reports.iter().find(|r| r.name == "variance_inflation") {
            let ks: Vec<f64> = cfg.check.k_values.iter().map(|&k| f64::from(k)).collect();
            let pick = |prefix: &str| -> Vec<f64> {
                cfg.check
                    .k_values
                    .iter()
                    .map(|k| r.measured[&format!("{prefix}{k}")])
                    .collect()
            };
            let series = vec![
                Series {
                    label: "upsample".into(),
                    xs: ks.clone(),
                    ys: pick("measured_u_k"),
                    band: None,
                },
                Series {
                    label: "generate".into(),
                    xs: ks.clone(),
                    ys: pick("measured_g_k"),
                    band: None,
                },
            ];
            let svg = render_plot(
                &series,
                &PlotStyle {
                    title: "minibatch gradient variance vs k".into(),
                    x_label: "k".into(),
                    y_label: "E || g_batch - mean ||^2".into(),
                },
            )?;
            out.write("variance_vs_k.svg", svg.as_bytes())?;
            let svg = render_plot(
                &variance_vs_epoch_series(cfg)?,
                &PlotStyle {
                    title: format!("minibatch gradient variance along GD, k = {}", cfg.check.k),
                    x_label: "step".into(),
                    y_label: "E || g_batch - g_full ||^2".into(),
                },
            )?;
            out.write("variance_vs_epoch.svg", svg.as_bytes())?;
        }
        if let Some(r) = reports
            .iter()
            .find(|r| r.name == "convergence_and_generalization")
        {
            let ks: Vec<f64> = cfg.check.k_values.iter().map(|&k| f64::from(k)).collect();
            let pick = |prefix: &str| -> Vec<f64> {
                cfg.check
                    .k_values
                    .iter()
                    .map(|k| r.measured[&format!("{prefix}{k}")])
                    .collect()
            };
            let series = vec![
                Series {
                    label: "upsample".into(),
                    xs: ks.clone(),
                    ys: pick("err_u_k"),
                    band: None,
                },
                Series {
                    label: "generate".into(),
                    xs: ks,
                    ys: pick("err_g_k"),
                    band: None,
                },
            ];
            let svg = render_plot(
                &series,
                &PlotStyle {
                    title: "seed-mean test error vs k".into(),
                    x_label: "k".into(),
                    y_label: "test error".into(),
                },
            )?;
            out.write("error_vs_k.svg", svg.as_bytes())?;
        }
    }
    Ok(reports.iter().all(|r| r.passed && r.regime_ok))
}

fn run_sweep_command(cfg: &RunConfig, out: &OutputDir) -> Result<bool> {
    let rows = run_sweep_k(cfg)?;
    if cfg.format.csv() {
        out.write("sweep.csv", &sweep_csv(&rows)?)?;
    }
    if cfg.format.json() {
        out.write("sweep.json", &json_bytes(&rows)?)?;
    }
    if cfg.plots {
        out.write("sweep_error_vs_k.svg", sweep_plot(&rows)?.as_bytes())?;
    }
    if cfg.assert_trend {
        let report = run_check("convergence_and_generalization", &cfg.check, cfg.master_seed)?;
        println!(
            "trend check: {} (regime {})",
            if report.passed { "PASS" } else { "FAIL" },
            if report.regime_ok { "ok" } else { "violated" }
        );
        out.write("trend_report.json", &json_bytes(&report)?)?;
        return Ok(report.passed && report.regime_ok);
    }
    Ok(true)
}

fn run_compare_command(cfg: &RunConfig, out: &OutputDir) -> Result<()> {
    let rows = run_compare_selection(cfg)?;
    if cfg.format.csv() {
        out.write("compare.csv", &compare_csv(&rows)?)?;
    }
    if cfg.format.json() {
        out.write("compare.json", &json_bytes(&rows)?)?;
    }
    Ok(())
}

fn run_report(cfg: &RunConfig, out: &OutputDir) -> Result<()> {
    let bytes = out.read("reports.json").map_err(|_| {
        Error::InvalidConfig(format!(
            "no reports.json under {}; run verify into this directory first",
            cfg.output_dir.display()
        ))
    })?;
    let reports: Vec<CheckReport> = serde_json::from_slice(&bytes)?;
    let mut text = String::new();
    for r in &reports {
        let _ = writeln!(
            text,
            "{}: {} (regime {}, {} seeds)",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            if r.regime_ok { "ok" } else { "violated" },
            r.seeds
        );
        for (k, v) in &r.measured {
            let _ = writeln!(text, "  {k} = {}", sig17(*v));
        }
        for note in &r.notes {
            let _ = writeln!(text, "  note: {note}");
        }
    }
    print!("{text}");
    out.write("summary.txt", text.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CLI

#[derive(Parser, Debug)]
#[command(
    name = "tada-lab",
    version,
    about = "Desk-scale lab for planted-feature learning: augmentation, SAM, and theory checks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    globals: Globals,
}

#[derive(Args, Debug, Clone)]
struct Globals {
    /// JSON run configuration; CLI flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Parameter preset: thm1_default | thm2_default | thm3_default |
    /// cor1_default | select_default.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Master seed for the whole run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and the manifest.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores; env TADA_LAB_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    format: Option<OutputFormat>,
    /// Also emit SVG plots.
    #[arg(long, global = true)]
    plots: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Sample a base dataset and write it out.
    GenData,
    /// Train one model on a base dataset and record the trajectory.
    Train,
    /// Early-train, then identify slow-feature points.
    Select,
    /// Sweep augmentation factor k for upsampling vs generation.
    SweepK {
        /// Also run the convergence/generalization check; exit 1 if red.
        #[arg(long)]
        assert_trend: bool,
    },
    /// Compare selection strategies through the full pipeline.
    Compare,
    /// Run the preset's theory checks and write JSON reports.
    Verify,
    /// Re-render reports.json from a previous verify as text.
    Report,
}

fn experiment_of(cmd: &Cmd) -> Experiment {
    match cmd {
        Cmd::GenData => Experiment::GenData,
        Cmd::Train => Experiment::Train,
        Cmd::Select => Experiment::Select,
        Cmd::SweepK { .. } => Experiment::SweepK,
        Cmd::Compare => Experiment::Compare,
        Cmd::Verify => Experiment::Verify,
        Cmd::Report => Experiment::Report,
    }
}

fn default_preset(experiment: Experiment) -> &'static str {
    match experiment {
        Experiment::SweepK => "cor1_default",
        Experiment::Compare | Experiment::Select => "select_default",
        _ => "thm1_default",
    }
}

fn apply_preset(cfg: &mut RunConfig, name: &str) -> Result<()> {
    cfg.check = CheckConfig::preset(name)?;
    cfg.preset = name.to_string();
    cfg.optimizer = OptimizerConfig::gd(cfg.check.eta, cfg.check.steps);
    Ok(())
}

fn build_config(cmd: &Cmd, globals: &Globals) -> Result<RunConfig> {
    let experiment = experiment_of(cmd);
    let mut cfg = match &globals.config {
        Some(path) => RunConfig::from_json(&fs::read_to_string(path)?)?,
        None => {
            let mut cfg = RunConfig::default();
            apply_preset(&mut cfg, default_preset(experiment))?;
            cfg
        }
    };
    if let Some(name) = &globals.preset {
        apply_preset(&mut cfg, name)?;
    }
    cfg.experiment = experiment;
    if let Some(seed) = globals.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &globals.out {
        cfg.output_dir = out.clone();
    }
    if let Some(format) = globals.format {
        cfg.format = format;
    }
    if globals.plots {
        cfg.plots = true;
    }
    if let Some(threads) = globals.threads {
        cfg.threads = Some(threads);
    } else if cfg.threads.is_none() {
        if let Ok(v) = std::env::var("TADA_LAB_THREADS") {
            cfg.threads = v.parse().ok();
        }
    }
    if let Cmd::SweepK { assert_trend } = cmd {
        if *assert_trend {
            cfg.assert_trend = true;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cfg: &RunConfig) -> Result<i32> {
    let out = OutputDir::create(&cfg.output_dir)?;
    let ok = match cfg.experiment {
        Experiment::GenData => {
            run_gen_data(cfg, &out)?;
            true
        }
        Experiment::Train => {
            run_train(cfg, &out)?;
            true
        }
        Experiment::Select => {
            run_select(cfg, &out)?;
            true
        }
        Experiment::SweepK => run_sweep_command(cfg, &out)?,
        Experiment::Compare => {
            run_compare_command(cfg, &out)?;
            true
        }
        Experiment::Verify => run_verify(cfg, &out)?,
        Experiment::Report => {
            run_report(cfg, &out)?;
            true
        }
    };
    out.finish(cfg)?;
    Ok(i32::from(!ok))
}

/// Entry point behind the binary: parses argv, builds the run config, and
/// executes. Exit 0 on success, 1 on check failure, 2 on usage or config
/// errors.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            eprint!("{e}");
            return 2;
        }
    };
    let cfg = match build_config(&cli.cmd, &cli.globals) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let body = || match execute(&cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    match cfg.threads {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(body),
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        _ => body(),
    }
}
