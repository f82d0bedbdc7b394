//! CLI surface tests driven through the library entry point.

use std::path::Path;
use uqkit_cli::cli;

fn write_config(path: &Path, method: &str, out: &Path, seed: u64) {
    let text = format!(
        r#"
task = "regression"
seed = {seed}
output = {out:?}

[dataset]
kind = "heteroscedastic_sine"
n = 300

[split]
train = 0.6
val = 0.15
calib = 0.1
test = 0.15

[model]
hidden = [8]

[train]
epochs = 15
batch_size = 32
learning_rate = 0.005

[method]
name = {method:?}

[eval]
alpha = 0.1
"#,
        out = out.display().to_string(),
    );
    std::fs::write(path, text).unwrap();
}

fn run_cli(args: &[&str]) -> i32 {
    let mut argv = vec!["uqkit"];
    argv.extend_from_slice(args);
    cli(argv)
}

#[test]
fn missing_config_path_is_a_clean_failure() {
    let code = run_cli(&["run", "--config", "/no/such/config.toml"]);
    assert_eq!(code, 1);
}

#[test]
fn unknown_flags_exit_with_usage_error() {
    assert_eq!(run_cli(&["run", "--nonsense"]), 2);
    assert_eq!(run_cli(&["frobnicate"]), 2);
}

#[test]
fn run_report_plot_data_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("mve.toml");
    let out = dir.path().join("runs/mve");
    write_config(&config_path, "mve", &out, 5);

    assert_eq!(run_cli(&["run", "--config", config_path.to_str().unwrap()]), 0);
    assert!(out.join("metrics.json").is_file());

    // Report over the parent directory of run dirs.
    let runs = dir.path().join("runs");
    assert_eq!(
        run_cli(&["report", "--input", runs.to_str().unwrap(), "--format", "csv"]),
        0
    );

    assert_eq!(
        run_cli(&[
            "plot-data",
            "--input",
            out.to_str().unwrap(),
            "--kind",
            "calibration-curve"
        ]),
        0
    );
    assert!(out.join("plot_data/calibration_curve.csv").is_file());

    assert_eq!(
        run_cli(&["plot-data", "--input", out.to_str().unwrap(), "--kind", "bogus"]),
        1
    );
}

#[test]
fn seed_override_reproduces_directories() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("qr.toml");
    let out = dir.path().join("runs/qr");
    write_config(&config_path, "qr", &out, 5);

    let args = [
        "run",
        "--config",
        config_path.to_str().unwrap(),
        "--seed",
        "7",
    ];
    assert_eq!(run_cli(&args), 0);
    let first = std::fs::read(out.join("metrics.json")).unwrap();
    let first_config = std::fs::read(out.join("config.toml")).unwrap();
    assert_eq!(run_cli(&args), 0);
    assert_eq!(std::fs::read(out.join("metrics.json")).unwrap(), first);
    assert_eq!(std::fs::read(out.join("config.toml")).unwrap(), first_config);
}

#[test]
fn benchmark_over_config_dir() {
    let dir = tempfile::tempdir().unwrap();
    let configs = dir.path().join("configs");
    std::fs::create_dir_all(&configs).unwrap();
    // Shared dataset/split/seed; file-name order fixes row order.
    write_config(&configs.join("00_deterministic.toml"), "deterministic", &dir.path().join("runs/deterministic"), 11);
    write_config(&configs.join("01_mve.toml"), "mve", &dir.path().join("runs/mve"), 11);

    let table = dir.path().join("table");
    assert_eq!(
        run_cli(&[
            "benchmark",
            "--config-dir",
            configs.to_str().unwrap(),
            "--output",
            table.to_str().unwrap(),
        ]),
        0
    );
    let csv = std::fs::read_to_string(table.join("benchmark.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains("deterministic"));
    assert!(lines[2].contains("mve"));

    // CSV re-parses: every row has the header's cell count.
    let cells = lines[0].split(',').count();
    assert!(lines[1..].iter().all(|l| l.split(',').count() == cells));
}
