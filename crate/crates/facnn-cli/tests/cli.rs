//! End-to-end CLI tests: exit codes, output contracts, reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use facnn::data::synth;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_facnn")
}

struct Setup {
    _dir: tempfile::TempDir,
    data_dir: PathBuf,
    checkpoint: PathBuf,
}

static SETUP: OnceLock<Setup> = OnceLock::new();

/// Small synthetic dataset + a micro model trained through the CLI.
fn setup() -> &'static Setup {
    SETUP.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        synth::write_idx_digits(&data_dir, 600, 100, 5).unwrap();
        let out = dir.path().join("train_out");
        let result = run([
            "train",
            "--data-dir",
            data_dir.to_str().unwrap(),
            "--layers",
            "3",
            "--channels",
            "20",
            "--pool-after",
            "none",
            "--epochs",
            "1",
            "--batch-size",
            "50",
            "--lr",
            "0.05",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(result.status.success(), "train failed: {}", stderr(&result));
        let checkpoint = out.join("checkpoint.facn");
        assert!(checkpoint.exists());
        assert!(out.join("manifest.json").exists());
        assert!(out.join("train_log.csv").exists());
        Setup { _dir: dir, data_dir, checkpoint }
    })
}

fn run<const N: usize>(args: [&str; N]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn facnn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn help_exits_zero_and_unknown_flag_exits_two() {
    let help = run(["--help"]);
    assert_eq!(exit_code(&help), 0);
    assert!(stdout(&help).contains("audit"));

    let bad = run(["audit", "--no-such-flag"]);
    assert_eq!(exit_code(&bad), 2);

    let nocmd = run(["frobnicate"]);
    assert_eq!(exit_code(&nocmd), 2);
}

#[test]
fn eval_reports_accuracy() {
    let s = setup();
    let out = run([
        "eval",
        "--checkpoint",
        s.checkpoint.to_str().unwrap(),
        "--data-dir",
        s.data_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("val_top1"), "{}", stdout(&out));

    let missing = run(["eval", "--checkpoint", "/no/such/file.facn", "--data-dir", "/tmp"]);
    assert_eq!(exit_code(&missing), 2);
}

#[test]
fn attribute_emits_counted_grid_and_oracle_correlations() {
    let s = setup();
    let out_dir = s._dir.path().join("attr_out");
    let out = run([
        "attribute",
        "--checkpoint",
        s.checkpoint.to_str().unwrap(),
        "--data-dir",
        s.data_dir.to_str().unwrap(),
        "--image-index",
        "3",
        "--classes",
        "all",
        "--layers",
        "all",
        "--with-oracle",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));

    // 3 layers x 10 classes, fa + oracle variants, ppm + csv each
    let count_ext = |suffix: &str| {
        std::fs::read_dir(&out_dir)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
            .count()
    };
    assert_eq!(count_ext("_oracle.ppm"), 30);
    assert_eq!(count_ext("_oracle.csv"), 30);
    assert_eq!(count_ext(".ppm"), 60);
    assert_eq!(count_ext(".csv"), 60);
    assert!(out_dir.join("manifest.json").exists());

    // the deepest layer correlates at exactly 1.000000 for every class
    let text = stdout(&out);
    for class in 0..10 {
        let needle = format!("layer 3 class {class} correlation 1.000000");
        assert!(text.contains(&needle), "missing '{needle}' in:\n{text}");
    }
}

#[test]
fn attribute_rejects_bad_index_without_partial_output() {
    let s = setup();
    let out_dir = s._dir.path().join("attr_bad");
    let out = run([
        "attribute",
        "--checkpoint",
        s.checkpoint.to_str().unwrap(),
        "--data-dir",
        s.data_dir.to_str().unwrap(),
        "--image-index",
        "100000",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(!out_dir.exists(), "no partial output directory may be created");
}

#[test]
fn audit_passes_dampened_and_reports_vanilla() {
    let pass = run([
        "audit",
        "--random-config",
        "--layers",
        "24",
        "--channels",
        "20",
        "--input-size",
        "16x16",
        "--pool-after",
        "8,16",
        "--inputs",
        "4",
    ]);
    assert_eq!(exit_code(&pass), 0, "{}", stderr(&pass));
    let text = stdout(&pass);
    assert!(text.contains("PASS"), "{text}");
    assert!(text.contains("max_step"), "{text}");

    // vanilla-skip mode still prints the full report (report-only), the
    // measured step just is not required to pass
    let vanilla = run([
        "audit",
        "--random-config",
        "--layers",
        "8",
        "--channels",
        "20",
        "--input-size",
        "16x16",
        "--pool-after",
        "4",
        "--skip",
        "vanilla",
        "--inputs",
        "4",
    ]);
    let text = stdout(&vanilla);
    assert!(text.contains("max_step"), "{text}");
    assert!(exit_code(&vanilla) == 0 || exit_code(&vanilla) == 1);

    let zero = run(["audit", "--random-config", "--inputs", "0"]);
    assert_eq!(exit_code(&zero), 2);
}

#[test]
fn audit_accepts_trained_checkpoint() {
    let s = setup();
    let out = run([
        "audit",
        "--checkpoint",
        s.checkpoint.to_str().unwrap(),
        "--inputs",
        "4",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("PASS"));
}

fn removal_args<'a>(s: &'a Setup, out_dir: &'a Path, methods: &'a str) -> [&'a str; 16] {
    [
        "removal",
        "--checkpoint",
        s.checkpoint.to_str().unwrap(),
        "--data-dir",
        s.data_dir.to_str().unwrap(),
        "--methods",
        methods,
        "--fractions",
        "0,0.3,0.6",
        "--subset",
        "30",
        "--rise-masks",
        "30",
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]
}

#[test]
fn removal_curves_share_baseline_and_rerun_identically() {
    let s = setup();
    let out_dir = s._dir.path().join("rem1");
    let out = run(removal_args(s, &out_dir, "fa,gradcam,random,rise,kocc"));
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("curves.csv")).unwrap();
    let mut baselines = Vec::new();
    let mut fa = Vec::new();
    let mut gradcam = Vec::new();
    for line in csv.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        let fraction: f64 = parts[2].parse().unwrap();
        let acc: f64 = parts[3].parse().unwrap();
        if fraction == 0.0 {
            baselines.push(acc);
        }
        match parts[0] {
            "fa-average" => fa.push(acc),
            "gradcam" => gradcam.push(acc),
            _ => {}
        }
    }
    assert_eq!(baselines.len(), 5);
    assert!(baselines.iter().all(|&b| b == baselines[0]), "baselines differ: {baselines:?}");

    // deepest-layer gradient CAM and fa-average order pixels identically
    assert_eq!(fa.len(), 3);
    for (a, b) in fa.iter().zip(&gradcam) {
        assert!((a - b).abs() <= 1e-6, "fa {a} vs gradcam {b}");
    }

    // byte-identical rerun
    let out_dir2 = s._dir.path().join("rem2");
    let out2 = run(removal_args(s, &out_dir2, "fa,gradcam,random,rise,kocc"));
    assert_eq!(exit_code(&out2), 0);
    assert_eq!(
        std::fs::read(out_dir.join("curves.csv")).unwrap(),
        std::fs::read(out_dir2.join("curves.csv")).unwrap()
    );
    for m in ["fa-average", "gradcam", "random", "rise", "k-occ"] {
        assert!(out_dir.join(format!("curve_{m}.csv")).exists());
    }
    assert!(out_dir.join("manifest.json").exists());
}
