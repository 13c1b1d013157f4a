//! The `normshape` command line: one subcommand per pipeline stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{folds_for_ratio, FlatConfig, Settings};
use crate::detect::{
    asm_fit, asm_project, fit_normative, fit_normative_with_volumes, volume_baseline_score, zero_shot_score,
};
use crate::error::{Error, Result};
use crate::eval::{
    crossval_fewshot, evaluate_scores, interpolate_groups, mid_slice_pgm, pca_2d, pca_csv, push_score_rows, report_csv,
    scores_csv, stratified_kfold, SCORES_HEADER,
};
use crate::nn::checkpoint::{write_named, NamedTensor};
use crate::seed;
use crate::synth::gen_cohort_seeds;
use crate::vae::{train, VaeParams};
use crate::volume::{center_in_grid, load_mask, resample, save_mask, volume_mm3, MaskVolume};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_BAD_INPUT: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "normshape",
    version,
    about = "Normative shape modelling and abnormal shape detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON file of dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: NORMSHAPE_THREADS, else all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Directory receiving every artifact of the run.
    #[arg(long)]
    out_dir: PathBuf,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate healthy and abnormal synthetic masks.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Resample and center a mask directory onto the working grid.
    Preprocess {
        /// Directory holding manifest.csv and its masks.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the VAE on the healthy masks of a directory.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Zero-shot scores (VAE latent distance, volume, signed-distance PCA).
    Score {
        /// Trained checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Healthy reference cohort (the training directory).
        #[arg(long)]
        train: PathBuf,
        /// Labelled test cohort.
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Few-shot linear SVM cross-validation on latent codes.
    Fewshot {
        /// Latent CSV written by `score`.
        #[arg(long)]
        latents: PathBuf,
        /// Prefix for method names in the outputs.
        #[arg(long, default_value = "vae")]
        method: String,
        #[command(flatten)]
        common: Common,
    },
    /// Two-dimensional PCA projection of latent codes.
    Project {
        #[arg(long)]
        latents: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Decode the line between the healthy and abnormal latent means.
    Interp {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        latents: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// AUC and balanced accuracy with bootstrap summaries per method.
    Eval {
        /// Score CSV with columns id,label,score[,method].
        #[arg(long)]
        scores: PathBuf,
        /// Decision threshold for balanced accuracy.
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::Score { .. } => "score",
            Command::Fewshot { .. } => "fewshot",
            Command::Project { .. } => "project",
            Command::Interp { .. } => "interp",
            Command::Eval { .. } => "eval",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Preprocess { common, .. }
            | Command::Train { common, .. }
            | Command::Score { common, .. }
            | Command::Fewshot { common, .. }
            | Command::Project { common, .. }
            | Command::Interp { common, .. }
            | Command::Eval { common, .. } => common,
        }
    }
}

/// Exit code and machine-readable kind for a library error.
pub fn classify(e: &Error) -> (i32, &'static str) {
    match e {
        Error::NonFiniteLoss { .. } => (EXIT_RUNTIME, "non_finite_loss"),
        Error::VolumeMatchFailed(_) => (EXIT_RUNTIME, "volume_match_failed"),
        Error::GenerationExhausted(_) => (EXIT_RUNTIME, "generation_exhausted"),
        Error::DegenerateShape(_) => (EXIT_RUNTIME, "degenerate_shape"),
        Error::ResampleExhausted(_) => (EXIT_RUNTIME, "resample_exhausted"),
        Error::StepOverflow { .. } => (EXIT_RUNTIME, "step_overflow"),
        Error::ShapeMismatch(_) => (EXIT_RUNTIME, "shape_mismatch"),
        Error::Io { .. } => (EXIT_BAD_INPUT, "io"),
        Error::MalformedHeader(_) | Error::SizeMismatch { .. } | Error::NonBinaryVoxel { .. } => {
            (EXIT_BAD_INPUT, "malformed_volume")
        }
        Error::InvalidSpacing(_) | Error::InvalidDims(_) => (EXIT_BAD_INPUT, "invalid_geometry"),
        Error::EmptyMask | Error::UniformMask => (EXIT_BAD_INPUT, "empty_mask"),
        Error::DoesNotFit { .. } | Error::DimMismatch(..) => (EXIT_BAD_INPUT, "dim_mismatch"),
        Error::SingleClass { .. } => (EXIT_BAD_INPUT, "single_class"),
        Error::Checkpoint(_) => (EXIT_BAD_INPUT, "checkpoint"),
        Error::Config(_) => (EXIT_BAD_INPUT, "config"),
        Error::InvalidParameter(_)
        | Error::EmptyCohort
        | Error::LengthMismatch { .. }
        | Error::RankDeficient { .. }
        | Error::InvalidK { .. }
        | Error::TooFewSamples { .. }
        | Error::EmptyGroup(_) => (EXIT_BAD_INPUT, "bad_input"),
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let (code, kind) = classify(&e);
            let line = serde_json::json!({ "error": kind, "message": e.to_string() });
            eprintln!("{line}");
            code
        }
    }
}

fn threads(common: &Common) -> Result<usize> {
    if let Some(t) = common.threads {
        return Ok(t);
    }
    match std::env::var("NORMSHAPE_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("NORMSHAPE_THREADS must be an integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    config: serde_json::Value,
}

fn execute(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let mut flat = match &common.config {
        Some(p) => FlatConfig::load(p)?,
        None => FlatConfig::default(),
    };
    for s in &common.set {
        flat.set(s)?;
    }
    if let Some(s) = common.seed {
        flat.set(&format!("seed={s}"))?;
    }
    let settings = Settings::resolve(&flat)?;
    let out = &common.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = RunManifest {
        command: cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: settings.seed,
        config_hash: flat.hash(),
        config: serde_json::from_str(&flat.canonical()).expect("canonical config is JSON"),
    };
    write_text(
        &out.join("run_manifest.json"),
        &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"),
    )?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads(common)?)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cmd {
        Command::Synth { .. } => cmd_synth(&settings, out),
        Command::Preprocess { input, .. } => cmd_preprocess(&settings, input, out),
        Command::Train { input, .. } => cmd_train(&settings, input, out),
        Command::Score { model, train, test, .. } => cmd_score(&settings, model, train, test, out),
        Command::Fewshot { latents, method, .. } => cmd_fewshot(&settings, latents, method, out),
        Command::Project { latents, .. } => cmd_project(latents, out),
        Command::Interp { model, latents, .. } => cmd_interp(&settings, model, latents, out),
        Command::Eval { scores, threshold, .. } => cmd_eval(&settings, scores, *threshold, out),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::InvalidParameter(format!("{}: {e}", path.display()))
}

/// One row of a cohort directory's `manifest.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub filename: String,
    pub label: u8,
    pub seed: u64,
    pub volume_mm3: f64,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join("manifest.csv");
    let mut rd = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let rows = rd
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()
        .map_err(|e| csv_err(&path, e))?;
    if rows.is_empty() {
        return Err(Error::EmptyCohort);
    }
    Ok(rows)
}

fn write_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut s = String::from("filename,label,seed,volume_mm3\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.6}\n", r.filename, r.label, r.seed, r.volume_mm3));
    }
    write_text(&dir.join("manifest.csv"), &s)
}

fn load_cohort(dir: &Path) -> Result<(Vec<ManifestRow>, Vec<MaskVolume>)> {
    let rows = read_manifest(dir)?;
    let masks = rows
        .iter()
        .map(|r| load_mask(dir.join(&r.filename)))
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, masks))
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn cmd_synth(s: &Settings, out: &Path) -> Result<()> {
    // Abnormal index i shares the nominal seed of healthy index i.
    let base = seed::derive(s.seed, 100);
    let mut rows = Vec::new();
    let mut emit = |cohort: &str, label: u8, items: Vec<(MaskVolume, u64)>| -> Result<()> {
        for (i, (m, sd)) in items.into_iter().enumerate() {
            let filename = format!("{cohort}_{i}.mvol");
            save_mask(&m, out.join(&filename))?;
            rows.push(ManifestRow {
                filename,
                label,
                seed: sd,
                volume_mm3: volume_mm3(&m),
            });
        }
        Ok(())
    };
    if s.n_healthy > 0 {
        emit("healthy", 0, gen_cohort_seeds(s.n_healthy, &s.shape, None, base)?)?;
    }
    if s.n_abnormal > 0 {
        emit(
            "abnormal",
            1,
            gen_cohort_seeds(s.n_abnormal, &s.shape, Some(&s.abnormality), base)?,
        )?;
    }
    if rows.is_empty() {
        return Err(Error::EmptyCohort);
    }
    write_manifest(out, &rows)
}

fn cmd_preprocess(s: &Settings, input: &Path, out: &Path) -> Result<()> {
    if same_dir(input, out) {
        return Err(Error::InvalidParameter("--out-dir must differ from --input".into()));
    }
    let (rows, masks) = load_cohort(input)?;
    let mut out_rows = Vec::with_capacity(rows.len());
    for (r, m) in rows.into_iter().zip(masks) {
        let p = center_in_grid(&resample(&m, s.spacing)?, s.grid)?;
        save_mask(&p, out.join(&r.filename))?;
        out_rows.push(ManifestRow {
            volume_mm3: volume_mm3(&p),
            ..r
        });
    }
    write_manifest(out, &out_rows)
}

fn cmd_train(s: &Settings, input: &Path, out: &Path) -> Result<()> {
    let (rows, masks) = load_cohort(input)?;
    let (names, healthy): (Vec<&str>, Vec<MaskVolume>) = rows
        .iter()
        .zip(masks)
        .filter(|(r, _)| r.label == 0)
        .map(|(r, m)| (r.filename.as_str(), m))
        .unzip();
    let n_train = healthy.len() - (s.train.val_fraction * healthy.len() as f64).round() as usize;
    let opts = crate::vae::TrainOptions {
        log: true,
        ..s.train.clone()
    };
    let (params, history) = train(&healthy, s.model_for(n_train), &opts)?;
    params.save(out.join("model.ckpt"))?;
    write_text(&out.join("history.csv"), &history.to_csv())?;
    let mut split = String::from("filename,role\n");
    for (i, name) in names.iter().enumerate() {
        let role = if history.val_indices.binary_search(&i).is_ok() {
            "val"
        } else {
            "train"
        };
        split.push_str(&format!("{name},{role}\n"));
    }
    write_text(&out.join("split.csv"), &split)
}

fn latents_csv(rows: &[ManifestRow], latents: &[Vec<f64>]) -> String {
    let dim = latents.first().map_or(0, Vec::len);
    let mut s = String::from("id,filename,label");
    for j in 0..dim {
        s.push_str(&format!(",z{j}"));
    }
    s.push('\n');
    for (i, (r, z)) in rows.iter().zip(latents).enumerate() {
        s.push_str(&format!("{i},{},{}", r.filename, r.label));
        for v in z {
            s.push_str(&format!(",{v:.9}"));
        }
        s.push('\n');
    }
    s
}

/// Latent CSV: `(ids, labels, vectors)`.
pub fn read_latents(path: &Path) -> Result<(Vec<usize>, Vec<u8>, Vec<Vec<f64>>)> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut zs = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let row = ids.len();
        let bad = |what: &str| Error::InvalidParameter(format!("{}: bad {what} in row {row}", path.display()));
        ids.push(field(0).parse().map_err(|_| bad("id"))?);
        labels.push(field(2).parse().map_err(|_| bad("label"))?);
        zs.push(
            (3..rec.len())
                .map(|i| field(i).parse::<f64>().map_err(|_| bad("latent value")))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    if zs.is_empty() {
        return Err(Error::EmptyCohort);
    }
    Ok((ids, labels, zs))
}

fn encode_all(params: &VaeParams<f32>, masks: &[MaskVolume]) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    masks.par_iter().map(|m| Ok(params.encode(m)?.mu)).collect()
}

fn cmd_score(s: &Settings, model: &Path, train_dir: &Path, test_dir: &Path, out: &Path) -> Result<()> {
    let params = VaeParams::<f32>::load(model)?;
    let (train_rows, train_masks) = load_cohort(train_dir)?;
    let healthy: Vec<MaskVolume> = train_rows
        .iter()
        .zip(&train_masks)
        .filter(|(r, _)| r.label == 0)
        .map(|(_, m)| m.clone())
        .collect();
    let (test_rows, test_masks) = load_cohort(test_dir)?;

    let ref_latents = encode_all(&params, &healthy)?;
    let stats = fit_normative_with_volumes(&ref_latents, &healthy)?;
    let test_latents = encode_all(&params, &test_masks)?;
    let vae_scores = test_latents
        .iter()
        .map(|z| zero_shot_score(z, &stats))
        .collect::<Result<Vec<_>>>()?;
    let vol_scores = test_masks
        .iter()
        .map(|m| volume_baseline_score(m, &stats))
        .collect::<Result<Vec<_>>>()?;

    let k = s.asm_k.min(healthy.len().saturating_sub(1));
    let asm = asm_fit(&healthy, k)?;
    let ref_asm = healthy
        .iter()
        .map(|m| asm_project(&asm, m))
        .collect::<Result<Vec<_>>>()?;
    let asm_stats = fit_normative(&ref_asm)?;
    let test_asm = test_masks
        .iter()
        .map(|m| asm_project(&asm, m))
        .collect::<Result<Vec<_>>>()?;
    let asm_scores = test_asm
        .iter()
        .map(|z| zero_shot_score(z, &asm_stats))
        .collect::<Result<Vec<_>>>()?;

    write_text(&out.join("latents.csv"), &latents_csv(&test_rows, &test_latents))?;
    write_text(&out.join("asm_latents.csv"), &latents_csv(&test_rows, &test_asm))?;
    let ids: Vec<usize> = (0..test_rows.len()).collect();
    let labels: Vec<u8> = test_rows.iter().map(|r| r.label).collect();
    let mut csv = String::from(SCORES_HEADER);
    for (method, sc) in [
        ("vae_zero_shot", vae_scores),
        ("volume", vol_scores),
        ("asm_zero_shot", asm_scores),
    ] {
        push_score_rows(&mut csv, method, &ids, &labels, &sc);
    }
    write_text(&out.join("scores.csv"), &csv)?;
    let mut normative = vec![NamedTensor::from_f64(
        "normative.z_bar",
        vec![stats.z_bar.len()],
        &stats.z_bar,
    )];
    normative.push(NamedTensor::from_f64(
        "normative.mean_volume_mm3",
        vec![1],
        &[stats.mean_volume_mm3.unwrap_or(0.0)],
    ));
    write_named(out.join("normative.ckpt"), &normative)?;
    write_named(out.join("asm.ckpt"), &asm.to_named())
}

fn cmd_fewshot(s: &Settings, latents: &Path, method: &str, out: &Path) -> Result<()> {
    let (_, labels, zs) = read_latents(latents)?;
    let n = labels.len();
    let mut plans = vec![(format!("{method}_fewshot_loo"), n)];
    for &r in &s.fewshot_ratios {
        plans.push((format!("{method}_fewshot_ratio{r}"), folds_for_ratio(r, n)));
    }
    let mut reports = Vec::new();
    for (i, (name, k)) in plans.into_iter().enumerate() {
        let plan = stratified_kfold(&labels, k, seed::derive(s.seed, 30 + i as u64))?;
        reports.push(crossval_fewshot(
            &name,
            &zs,
            &labels,
            &plan,
            s.svm,
            s.n_boot,
            seed::derive(s.seed, 40 + i as u64),
        )?);
    }
    write_text(&out.join("fewshot_report.csv"), &report_csv(&reports))?;
    write_text(&out.join("fewshot_scores.csv"), &scores_csv(&reports))
}

fn cmd_project(latents: &Path, out: &Path) -> Result<()> {
    let (_, labels, zs) = read_latents(latents)?;
    write_text(&out.join("pca.csv"), &pca_csv(&pca_2d(&zs)?, &labels))
}

fn cmd_interp(s: &Settings, model: &Path, latents: &Path, out: &Path) -> Result<()> {
    let params = VaeParams::<f32>::load(model)?;
    let (_, labels, zs) = read_latents(latents)?;
    let (normal, abnormal): (Vec<_>, Vec<_>) = zs.into_iter().zip(&labels).partition(|(_, &l)| l == 0);
    let normal: Vec<Vec<f64>> = normal.into_iter().map(|(z, _)| z).collect();
    let abnormal: Vec<Vec<f64>> = abnormal.into_iter().map(|(z, _)| z).collect();
    let frames = interpolate_groups(&params, &normal, &abnormal, &s.interp_ts, s.spacing)?;
    let mut csv = String::from("t,foreground_voxels,volume_mm3,render\n");
    for f in &frames {
        let name = f.file_name();
        let path = out.join(&name);
        fs::write(&path, mid_slice_pgm(&f.mask)).map_err(|e| Error::io(&path, e))?;
        csv.push_str(&format!(
            "{},{},{:.6},{name}\n",
            f.t,
            f.mask.count(),
            volume_mm3(&f.mask)
        ));
    }
    write_text(&out.join("interp.csv"), &csv)
}

/// Score CSV rows grouped by method, in first-appearance order.
pub fn read_scores(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<u8>, Vec<f64>)>> {
    #[derive(Deserialize)]
    struct Row {
        id: usize,
        label: u8,
        score: f64,
        method: Option<String>,
    }
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (Vec<usize>, Vec<u8>, Vec<f64>)> = BTreeMap::new();
    for row in rd.deserialize::<Row>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let m = row.method.unwrap_or_else(|| "scores".into());
        if !groups.contains_key(&m) {
            order.push(m.clone());
        }
        let g = groups.entry(m).or_default();
        g.0.push(row.id);
        g.1.push(row.label);
        g.2.push(row.score);
    }
    if order.is_empty() {
        return Err(Error::EmptyCohort);
    }
    Ok(order
        .into_iter()
        .map(|m| {
            let (i, l, s) = groups.remove(&m).expect("group exists");
            (m, i, l, s)
        })
        .collect())
}

fn cmd_eval(s: &Settings, scores: &Path, threshold: Option<f64>, out: &Path) -> Result<()> {
    let groups = read_scores(scores)?;
    let mut reports = Vec::new();
    for (k, (method, ids, labels, sc)) in groups.into_iter().enumerate() {
        reports.push(evaluate_scores(
            &method,
            sc,
            labels,
            ids,
            threshold,
            s.n_boot,
            seed::derive(s.seed, 50 + k as u64),
        )?);
    }
    write_text(&out.join("report.csv"), &report_csv(&reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two_and_help_exits_zero() {
        assert_eq!(run(["normshape", "--help"]), 0);
        assert_eq!(run(["normshape", "eval", "--help"]), 0);
        assert_eq!(run(["normshape", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["normshape", "synth"]), EXIT_USAGE);
    }

    #[test]
    fn error_classes() {
        assert_eq!(classify(&Error::SingleClass { missing: 1 }).0, EXIT_BAD_INPUT);
        assert_eq!(classify(&Error::ResampleExhausted(100)).0, EXIT_RUNTIME);
    }
}
