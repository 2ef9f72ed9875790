use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TOY: &str =
    "T = 3\nB = 8\nnoise_dim = 8\neval_samples = 64\nmetrics_interval = 1\nwall_clock = false\n";

fn cdegan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdegan"))
        .args(args)
        .output()
        .unwrap()
}

fn train_toy(dir: &Path, extra: &[&str]) -> Output {
    let cfg = dir.join("toy.toml");
    fs::write(&cfg, TOY).unwrap();
    let out = dir.join("run");
    let mut args = vec![
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    cdegan(&args)
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run/summary.json")).unwrap()).unwrap()
}

#[test]
fn train_twice_gives_identical_summaries() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(train_toy(a.path(), &["--seed", "7"]).status.success());
    assert!(train_toy(b.path(), &["--seed", "7"]).status.success());
    let (sa, mut sb) = (summary(a.path()), summary(b.path()));
    sb["config"]["out_dir"] = sa["config"]["out_dir"].clone();
    assert_eq!(sa, sb);
    assert_eq!(sa["iterations"], 3);
    assert_eq!(sa["config"]["seed"], 7);
    assert!(!a.path().join("run/.lock").exists());
}

#[test]
fn missing_keys_fall_back_to_defaults() {
    let d = tempfile::tempdir().unwrap();
    assert!(train_toy(d.path(), &[]).status.success());
    let c = &summary(d.path())["config"];
    assert_eq!(
        (
            c["B"].as_u64(),
            c["K"].as_u64(),
            c["M"].as_u64(),
            c["N"].as_u64()
        ),
        (Some(8), Some(3), Some(3), Some(2))
    );
    assert_eq!(c["gamma"], 0.1);
    assert_eq!(c["adam"]["lr"], 0.0002);
}

#[test]
fn override_changes_metric_columns() {
    let d = tempfile::tempdir().unwrap();
    assert!(train_toy(d.path(), &["--override", "I=4"]).status.success());
    let text = fs::read_to_string(d.path().join("run/metrics.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert!(header.contains(&"d_fit_8"));
    assert!(!header.contains(&"d_fit_9"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn summary_reruns_bit_for_bit() {
    let d = tempfile::tempdir().unwrap();
    assert!(train_toy(d.path(), &["--seed", "3"]).status.success());
    let first = fs::read_to_string(d.path().join("run/summary.json")).unwrap();
    let again = d.path().join("again");
    let s = d.path().join("run/summary.json");
    let out = cdegan(&[
        "train",
        "--config",
        s.to_str().unwrap(),
        "--out-dir",
        again.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let mut a: serde_json::Value = serde_json::from_str(&first).unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(again.join("summary.json")).unwrap()).unwrap();
    a["config"]["out_dir"] = b["config"]["out_dir"].clone();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(d.path().join("run/metrics.csv")).unwrap(),
        fs::read(again.join("metrics.csv")).unwrap()
    );
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let d = tempfile::tempdir().unwrap();
    let out = train_toy(d.path(), &["--override", "dataset.modes=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset.modes"));
    let out = train_toy(d.path(), &["--override", "K=0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_and_points_at_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let out = train_toy(d.path(), &["--override", "adam.lr=1e200"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("checkpoint"), "{err}");
    assert!(d.path().join("run/checkpoint/manifest.json").exists());
}

#[test]
fn locked_output_dir_exits_4() {
    let d = tempfile::tempdir().unwrap();
    fs::create_dir_all(d.path().join("run")).unwrap();
    fs::write(d.path().join("run/.lock"), "").unwrap();
    assert_eq!(train_toy(d.path(), &[]).status.code(), Some(4));
}

#[test]
fn eval_reports_and_rejects_zero_samples() {
    let d = tempfile::tempdir().unwrap();
    assert!(train_toy(d.path(), &[]).status.success());
    let ck = d.path().join("run/checkpoint");
    let ck = ck.to_str().unwrap();
    let a = cdegan(&["eval", "--checkpoint", ck, "--n", "100", "--seed", "1"]);
    let b = cdegan(&["eval", "--checkpoint", ck, "--n", "100", "--seed", "1"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["total"], 100);
    assert!(report["covered_modes"].as_u64().unwrap() <= 8);
    assert_eq!(
        cdegan(&["eval", "--checkpoint", ck, "--n", "0"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("manifest.json"), "{\"iteration\": 1}").unwrap();
    let out = cdegan(&["eval", "--checkpoint", d.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn plot_data_writes_grid_and_samples() {
    let d = tempfile::tempdir().unwrap();
    assert!(train_toy(d.path(), &[]).status.success());
    let ck = d.path().join("run/checkpoint");
    let plot = d.path().join("plot");
    let out = cdegan(&[
        "plot-data",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out-dir",
        plot.to_str().unwrap(),
        "--n",
        "300",
        "--resolution",
        "50",
    ]);
    assert!(out.status.success());
    let rows = |name: &str| -> Vec<Vec<f64>> {
        fs::read_to_string(plot.join(name))
            .unwrap()
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect()
    };
    let grid = rows("kde.csv");
    assert_eq!(grid.len(), 50 * 50);
    let cell = grid[1][0] - grid[0][0];
    let mass: f64 = grid.iter().map(|r| r[2] * cell * cell).sum();
    assert!((mass - 1.0).abs() < 1e-6, "{mass}");
    let samples = rows("samples.csv");
    assert_eq!(samples.len(), 300);
    assert!(samples.iter().all(|r| r.len() == 2));
}

#[test]
fn sample_dumps_real_and_noise() {
    let d = tempfile::tempdir().unwrap();
    let real = d.path().join("real.csv");
    let out = cdegan(&[
        "sample",
        "--kind",
        "real",
        "--n",
        "40",
        "--out",
        real.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(&real).unwrap().lines().count(), 40);
    let out = cdegan(&[
        "sample",
        "--kind",
        "noise",
        "--n",
        "3",
        "--override",
        "noise_dim=5",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.split(',').count() == 5));
    assert_eq!(cdegan(&["sample", "--kind", "fake"]).status.code(), Some(2));
}
