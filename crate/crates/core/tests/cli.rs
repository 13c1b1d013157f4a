use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const BIN: &str = env!("CARGO_BIN_EXE_normshape");

fn normshape(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("NORMSHAPE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) {
    let out = normshape(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL: &[&str] = &[
    "--set",
    "data.grid=[24,16,8]",
    "--set",
    "train.epochs=5",
    "--set",
    "eval.n_boot=200",
    "--set",
    "fewshot.ratios=[0.5]",
    "--set",
    "asm.k=5",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn pipeline(root: &Path) {
    ok(
        &with_small(&[
            "synth",
            "--seed",
            "1",
            "--out-dir",
            "raw_train",
            "--set",
            "data.n_healthy=20",
        ]),
        root,
    );
    ok(
        &with_small(&[
            "synth",
            "--seed",
            "2",
            "--out-dir",
            "raw_test",
            "--set",
            "data.n_healthy=10",
            "--set",
            "data.n_abnormal=10",
        ]),
        root,
    );
    ok(
        &with_small(&["preprocess", "--input", "raw_train", "--out-dir", "train"]),
        root,
    );
    ok(
        &with_small(&["preprocess", "--input", "raw_test", "--out-dir", "test"]),
        root,
    );
    ok(
        &with_small(&["train", "--seed", "3", "--input", "train", "--out-dir", "model"]),
        root,
    );
    ok(
        &with_small(&[
            "score",
            "--model",
            "model/model.ckpt",
            "--train",
            "train",
            "--test",
            "test",
            "--out-dir",
            "scores",
        ]),
        root,
    );
    ok(
        &with_small(&["fewshot", "--latents", "scores/latents.csv", "--out-dir", "fewshot"]),
        root,
    );
    ok(
        &with_small(&["project", "--latents", "scores/latents.csv", "--out-dir", "project"]),
        root,
    );
    ok(
        &with_small(&[
            "interp",
            "--model",
            "model/model.ckpt",
            "--latents",
            "scores/latents.csv",
            "--out-dir",
            "interp",
        ]),
        root,
    );
    ok(
        &with_small(&["eval", "--scores", "scores/scores.csv", "--out-dir", "eval"]),
        root,
    );
}

const ARTIFACTS: &[&str] = &[
    "raw_train/manifest.csv",
    "raw_train/healthy_19.mvol",
    "raw_test/abnormal_9.mvol",
    "train/manifest.csv",
    "model/model.ckpt",
    "model/history.csv",
    "model/split.csv",
    "scores/latents.csv",
    "scores/asm_latents.csv",
    "scores/scores.csv",
    "scores/asm.ckpt",
    "fewshot/fewshot_report.csv",
    "fewshot/fewshot_scores.csv",
    "project/pca.csv",
    "interp/interp.csv",
    "interp/interp_t0.pgm",
    "interp/interp_t-0.25.pgm",
    "interp/interp_t1.25.pgm",
    "eval/report.csv",
    "eval/run_manifest.json",
];

#[test]
fn smoke_pipeline_is_complete_fast_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let start = Instant::now();
    pipeline(a.path());
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "pipeline took {elapsed:.1} s");
    for f in ARTIFACTS {
        assert!(a.path().join(f).is_file(), "missing {f}");
    }
    let history = fs::read_to_string(a.path().join("model/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 6);
    let report = fs::read_to_string(a.path().join("eval/report.csv")).unwrap();
    assert!(report.starts_with("method,n_boot,auc_mean,auc_sd,balacc_mean,balacc_sd\n"));
    for m in ["vae_zero_shot", "volume", "asm_zero_shot"] {
        assert!(report.contains(&format!("\n{m},200,")), "{report}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("model/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["version"].is_string());

    let b = tempfile::tempdir().unwrap();
    pipeline(b.path());
    for f in ARTIFACTS
        .iter()
        .filter(|f| f.ends_with(".csv") || f.ends_with(".pgm") || f.ends_with(".ckpt"))
    {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs between runs"
        );
    }
}

#[test]
fn help_on_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        "synth",
        "preprocess",
        "train",
        "score",
        "fewshot",
        "project",
        "interp",
        "eval",
    ] {
        let out = normshape(&[sub, "--help"], dir.path());
        assert_eq!(out.status.code(), Some(0), "{sub}");
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--out-dir") && text.contains("--seed"), "{sub}: {text}");
    }
}

#[test]
fn single_class_scores_are_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.csv"), "id,label,score\n0,0,0.5\n1,0,0.7\n").unwrap();
    let out = normshape(&["eval", "--scores", "s.csv", "--out-dir", "o"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], "single_class");
    assert!(v["message"].as_str().unwrap().contains("missing label 1"));
}

#[test]
fn usage_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(normshape(&["synth"], dir.path()).status.code(), Some(2));
    assert_eq!(normshape(&["frobnicate"], dir.path()).status.code(), Some(2));
    let out = normshape(&["synth", "--out-dir", "o", "--set", "model.nope=1"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let out = normshape(&["preprocess", "--input", "missing", "--out-dir", "o"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn preprocess_leaves_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &with_small(&[
            "synth",
            "--out-dir",
            "raw",
            "--set",
            "data.n_healthy=3",
            "--set",
            "data.n_abnormal=2",
        ]),
        dir.path(),
    );
    let before = fs::read(dir.path().join("raw/healthy_0.mvol")).unwrap();
    let manifest = fs::read_to_string(dir.path().join("raw/manifest.csv")).unwrap();
    assert!(manifest.starts_with("filename,label,seed,volume_mm3\n"));
    assert_eq!(manifest.lines().count(), 6);
    ok(
        &[
            "preprocess",
            "--input",
            "raw",
            "--out-dir",
            "pre",
            "--set",
            "data.grid=[32,24,12]",
            "--set",
            "data.spacing=[1.5,1.5,3]",
        ],
        dir.path(),
    );
    assert_eq!(fs::read(dir.path().join("raw/healthy_0.mvol")).unwrap(), before);
    let out = normshape(&["preprocess", "--input", "raw", "--out-dir", "raw"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}
