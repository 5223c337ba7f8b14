use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_vanishnet");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A workspace with an 8-image synthetic set and a one-epoch desk checkpoint.
fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--out", "synth", "synth", "--n", "8"]);
    let printed = ok(
        dir.path(),
        &["--out", "run", "train", "--desk", "--epochs", "1", "--data", "synth/annotations.tsv"],
    );
    assert_eq!(printed.trim(), "run/checkpoint.safetensors");
    dir
}

#[test]
fn missing_dataset_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train", "--desk", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.train"));

    std::fs::write(dir.path().join("run.toml"), "[data]\ntrain = \"absent.tsv\"\n").unwrap();
    let out = run(dir.path(), &["--config", "run.toml", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.train"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[train]\nlearning_rate = 1.0\n").unwrap();
    let out = run(dir.path(), &["--config", "run.toml", "train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_and_frozen_config_reproduces_history() {
    let dir = trained();
    let run_dir = dir.path().join("run");
    for f in ["checkpoint.safetensors", "loss.csv", "config.toml"] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }
    ok(dir.path(), &["--config", "run/config.toml", "--out", "rerun", "train"]);
    let a = std::fs::read(run_dir.join("loss.csv")).unwrap();
    let b = std::fs::read(dir.path().join("rerun/loss.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn predict_prints_id_x_y_confidence() {
    let dir = trained();
    let stdout = ok(
        dir.path(),
        &["--out", "pred", "predict", "--checkpoint", "run/checkpoint.safetensors", "synth/synth_0003.png"],
    );
    let line = stdout.lines().next().unwrap();
    let fields: Vec<&str> = line.split(' ').collect();
    assert_eq!(fields.len(), 4, "{line}");
    assert_eq!(fields[0], "synth_0003");
    for coord in &fields[1..3] {
        let decimals = coord.split('.').nth(1).unwrap();
        assert_eq!(decimals.len(), 2, "{coord}");
    }
    let x: f64 = fields[1].parse().unwrap();
    let y: f64 = fields[2].parse().unwrap();
    let c: f64 = fields[3].parse().unwrap();
    assert!((0.0..160.0).contains(&x) && (0.0..120.0).contains(&y), "{line}");
    assert!((0.0..=1.0).contains(&c));
    assert!(dir.path().join("pred/synth_0003_overlay.png").is_file());
}

#[test]
fn predict_rejects_undecodable_image() {
    let dir = trained();
    std::fs::write(dir.path().join("junk.png"), b"not an image").unwrap();
    let out = run(
        dir.path(),
        &["--out", "pred", "predict", "--checkpoint", "run/checkpoint.safetensors", "junk.png"],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_emits_report_artifacts_and_report_reproduces_baselines() {
    let dir = trained();
    ok(
        dir.path(),
        &["--out", "ev", "eval", "--checkpoint", "run/checkpoint.safetensors", "--data", "synth/annotations.tsv"],
    );
    for f in ["report.json", "report.csv", "histogram.svg"] {
        assert!(dir.path().join("ev").join(f).is_file(), "{f} missing");
    }
    let table = ok(dir.path(), &["report", "--report", "ev/report.json"]);
    for (method, err, runtime) in [
        ("Kong (Gabor)", "0.040639", "20.1021"),
        ("Kong (gLoG)", "0.051556", "21.213"),
        ("Moghadam", "0.063407", "0.2423"),
        ("Yang", "0.045931", "0.752"),
    ] {
        let line = table.lines().find(|l| l.starts_with(method)).unwrap();
        assert!(line.contains(err) && line.contains(runtime), "{line}");
    }
}

#[test]
fn ablate_upsample_has_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(
        dir.path(),
        &["--out", "ab", "ablate", "--axis", "upsample", "--epochs", "1", "--synth", "4", "--desk"],
    );
    let out_dir = dir.path().join(stdout.lines().last().unwrap());
    let csv = std::fs::read_to_string(out_dir.join("table.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["deconv", "upu", "upu2"]);
    assert!(out_dir.join("config.toml").is_file());
}

#[test]
fn gpu_device_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--device", "gpu", "train", "--desk"]);
    assert_eq!(out.status.code(), Some(2));
}
