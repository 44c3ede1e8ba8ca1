//! End-to-end checks of the command-line contract: exit codes, artifact
//! placement, and headline output. Every invocation goes through the real
//! binary so the tests see exactly what a shell would.

use std::path::Path;
use std::process::{Command, Output};

fn qcw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcw"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

/// A configuration small enough that a full pipeline run finishes in well
/// under a second.
const TINY: &str = r#"
seed = 1

[diffusion]
t_steps = 6
width = 8
hidden = 2
time_embed_dim = 4

[diffusion.train]
iters = 60
batch_size = 32
lr = 1e-3
train_size = 128
val_size = 32

[calibration]
trajectories = 12
interval = 2
val_fraction = 0.25
groups = 3

[quant]
iters_per_block = 40
minibatch = 16

[weighting]
meta_iters = 8
t_acc = 2
batch_size = 8

[verify]
t_acc = 2
batch_size = 4
lemma42_configs = 5
"#;

fn write_tiny(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_config_path_exits_two_and_names_the_file() {
    let out = qcw(&["train-fp", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/exp.toml"), "stderr: {stderr}");
}

#[test]
fn omitted_config_flag_exits_two() {
    let out = qcw(&["train-fp"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--config"), "stderr: {stderr}");
}

#[test]
fn unknown_subcommand_exits_two() {
    let out = qcw(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_contents_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[weighting]\ntau = 0.0\n").unwrap();
    let out = qcw(&["verify-lemmas", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("tau"), "stderr: {stderr}");
}

#[test]
fn divergent_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("explode.toml");
    // A data scale this large overflows the squared error immediately.
    let toml = format!(
        "{TINY}\n[diffusion.dataset]\nkind = \"gaussian-mixture\"\ncenters = [[0.0, 0.0]]\nstd = 1e200\n"
    );
    std::fs::write(&path, toml).unwrap();
    let out = qcw(&[
        "train-fp",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("runs").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn diagnose_then_compare_produce_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny(dir.path());
    let runs = dir.path().join("runs");
    let runs_str = runs.to_str().unwrap().to_string();

    let out = qcw(&["diagnose", "--config", &config, "--seed", "1", "--out", &runs_str]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("validation mse"), "stdout: {stdout}");

    let run_dirs: Vec<_> = std::fs::read_dir(&runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(run_dirs.len(), 1);
    assert!(run_dirs[0].file_name().unwrap().to_str().unwrap().starts_with("weighted-s1-"));
    assert!(run_dirs[0].join("reports/diagnostics.json").is_file());
    assert!(run_dirs[0].join("manifest.json").is_file());

    let out = qcw(&["compare", "--seeds", "1,2", "--config", &config, "--out", &runs_str]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("seeds"), "stdout: {stdout}");
    assert!(runs.join("sweep.json").is_file());
    let csv = std::fs::read_to_string(runs.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn seed_ranges_expand_half_open() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny(dir.path());
    let runs = dir.path().join("runs");
    let out = qcw(&[
        "compare",
        "--seeds",
        "1..3,5",
        "--config",
        &config,
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("3 seeds"), "stdout: {stdout}");
    let csv = std::fs::read_to_string(runs.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn empty_seed_range_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny(dir.path());
    let out = qcw(&["compare", "--seeds", "3..3", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("3..3"), "stderr: {stderr}");
}

#[test]
fn verify_lemmas_writes_residual_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny(dir.path());
    let runs = dir.path().join("runs");
    let out = qcw(&[
        "verify-lemmas",
        "--config",
        &config,
        "--seed",
        "7",
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<_> = std::fs::read_dir(&runs)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(
        files.iter().any(|f| f.starts_with("lemmas-s7-") && f.ends_with(".json")),
        "files: {files:?}"
    );
}

#[test]
fn sample_writes_one_csv_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny(dir.path());
    let points = dir.path().join("points.csv");
    let out = qcw(&[
        "sample",
        "--count",
        "16",
        "--output",
        points.to_str().unwrap(),
        "--config",
        &config,
        "--out",
        dir.path().join("runs").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&points).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 17);
    assert_eq!(lines[0], "x0,x1");
    for line in &lines[1..] {
        let fields: Vec<_> = line.split(',').collect();
        assert_eq!(fields.len(), 2);
        for f in fields {
            f.parse::<f64>().unwrap();
        }
    }
}
