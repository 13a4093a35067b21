use std::path::Path;
use std::process::{Command, Output};

fn vstab(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vstab"));
    cmd.args(args).env_remove("VSTAB_OUTPUT_DIR").env_remove("VSTAB_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, dataset: &str) -> String {
    let text = format!(
        r#"ensemble_sizes = [2]
output_dir = "from-config"

{dataset}

[evaluation]
horizon = 5
test_window = 20
validation_window = 10
retrain_windows = [1, 5, 20]
baseline_r = 5
season_length = 7

[[models]]
name = "LR"
kind = "pooled_linear"

[[models]]
name = "SNaive"
kind = "seasonal_naive"
"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const SYNTH: &str = "[dataset.synth]\nn_series = 8\nlength = 100\nfrequency = \"daily\"";

#[test]
fn generate_validate_run_report() {
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("panel.csv");
    let out = vstab(
        &["generate", "--n-series", "6", "--length", "90", "--seed", "4", "--out", panel.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&panel).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 90);

    let cfg = write_config(dir.path(), "[dataset]\npath = \"panel.csv\"\nfrequency = \"daily\"");
    let out = vstab(&["validate", &cfg], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("6 of 6 series"));

    let results = dir.path().join("results");
    let out = vstab(&["run", &cfg], &[("VSTAB_OUTPUT_DIR", results.to_str().unwrap()), ("VSTAB_THREADS", "2")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(results.join("manifest.json").is_file());
    assert!(!dir.path().join("from-config").exists());

    let raw = results.join("metrics_raw.csv");
    let out = vstab(&["report", raw.to_str().unwrap(), "--baseline-r", "5", "--decimals", "2"], &[]);
    assert!(out.status.success());
    let table = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(table.starts_with("metric,method,r=1,r=5,r=20\n"));
    assert!(table.lines().skip(1).all(|l| l.split(',').nth(3) == Some("1.00") || l.split(',').nth(3) == Some("")));

    let again = dir.path().join("again");
    let out = vstab(&["report", raw.to_str().unwrap(), "--baseline-r", "5", "--layout", "long", "--output-dir", again.to_str().unwrap()], &[]);
    assert!(out.status.success());
    assert!(again.join("metrics_long.csv").is_file());
    assert!(again.join("plot_data.json").is_file());
}

#[test]
fn config_output_dir_resolves_next_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTH);
    let out = vstab(&["run", &cfg, "--seed", "9"], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("from-config").join("plot_data.json").is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // missing config file
    assert_eq!(vstab(&["run", "/definitely/not/here.toml"], &[]).status.code(), Some(1));
    // unknown flag
    assert_eq!(vstab(&["run", "--nope"], &[]).status.code(), Some(1));
    // no models
    let bare = dir.path().join("bare.toml");
    std::fs::write(
        &bare,
        format!("{SYNTH}\n[evaluation]\nhorizon = 5\ntest_window = 20\nvalidation_window = 10\nretrain_windows = [5]\nbaseline_r = 5\nseason_length = 7\n"),
    )
    .unwrap();
    let out = vstab(&["validate", bare.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least one model"));
    // output directory is an existing file: a runtime failure
    let cfg = write_config(dir.path(), SYNTH);
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "x").unwrap();
    let out = vstab(&["run", &cfg, "--output-dir", blocker.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(vstab(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTH);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(vstab(&["run", &cfg, "--output-dir", d.to_str().unwrap()], &[]).status.success());
    }
    for name in ["metrics_raw.csv", "metrics_normalized.csv", "plot_data.json", "tests_sMAPC.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}
