use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ncspoof(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncspoof"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn run_json(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("run.json")).unwrap()).unwrap()
}

#[test]
fn gen_writes_dataset_triplet_and_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ncspoof(
        tmp.path(),
        &["gen", "--profile", "desk", "--pattern", "random", "--n", "16", "--rows", "200", "--seed", "5"],
    );
    assert_ok(&o);
    let dir = tmp.path().join("gen");
    for f in ["manifest.json", "data.f32le", "labels.f32le", "run.json"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let ds = ncspoof::dataset::Dataset::load(&dir).unwrap();
    assert_eq!(ds.rows(), 200);
    assert_eq!(ds.dim(), 160);
    let run = run_json(&dir);
    assert_eq!(run["seed"], 5);
    assert_eq!(run["profile"], "desk");
    assert_eq!(run["config"]["n"], 16);
}

#[test]
fn caf_csv_is_deterministic_and_shows_64us_spacing() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["caf", "--case", "table1-1", "--samples", "30000", "--max-lag", "200"];
    assert_ok(&ncspoof(tmp.path(), &args));
    let first = fs::read(tmp.path().join("caf/caf_table1-1.csv")).unwrap();
    let peaks = fs::read_to_string(tmp.path().join("caf/peaks.csv")).unwrap();
    assert_ok(&ncspoof(tmp.path(), &args));
    let second = fs::read(tmp.path().join("caf/caf_table1-1.csv")).unwrap();
    assert_eq!(first, second);

    let text = String::from_utf8(first).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("tau_seconds,magnitude"));
    assert_eq!(lines.count(), 401);
    let spacing: f64 = peaks.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!((spacing - 64e-6).abs() < 1.5e-6, "spacing {spacing}");
}

#[test]
fn config_file_layers_under_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 7, "rows": 50, "n": 8, "n1": 40}"#).unwrap();
    let o = ncspoof(tmp.path(), &["gen", "--config", cfg.to_str().unwrap(), "--rows", "30"]);
    assert_ok(&o);
    let run = run_json(&tmp.path().join("gen"));
    assert_eq!(run["seed"], 7);
    assert_eq!(run["config"]["rows"], 30);
    assert_eq!(run["config"]["n"], 8);
}

#[test]
fn validation_errors_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"rowz": 10}"#).unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["gen", "--config", cfg.to_str().unwrap()],
        vec!["gen", "--profile", "laptop"],
        vec!["gen", "--pattern", "zigzag"],
        vec!["gen", "--rows", "0"],
        vec!["caf", "--case", "table1-9"],
        vec!["metrics"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let o = ncspoof(tmp.path(), &args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn runtime_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    // A path whose parent is a regular file cannot be created.
    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, b"x").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ncspoof"))
        .args(["gen", "--rows", "10", "--out"])
        .arg(&blocker)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn oracle_spoof_and_rx_eval_write_ber_csv() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in ["spoof-eval", "rx-eval"] {
        let o = ncspoof(tmp.path(), &[cmd, "--frames", "300", "--eb-n0-db", "0,8"]);
        assert_ok(&o);
        let csv = fs::read_to_string(tmp.path().join(cmd).join("ber.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows[0], "eb_n0_db,ber,ci_low,ci_high,baseline_ber");
        assert_eq!(rows.len(), 3);
        let ber = |r: &str| r.split(',').nth(1).unwrap().parse::<f64>().unwrap();
        assert!(ber(rows[1]) > ber(rows[2]));
    }
}

#[test]
fn supervised_checkpoint_feeds_spoof_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ncspoof(
        tmp.path(),
        &["train-supervised", "--rows", "600", "--test-rows", "100", "--steps", "30"],
    );
    assert_ok(&o);
    let ckpt = tmp.path().join("train-supervised/supervised.json");
    assert!(ckpt.exists());
    let trace = fs::read_to_string(tmp.path().join("train-supervised/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 31);
    let o = ncspoof(
        tmp.path(),
        &["spoof-eval", "--adversary", ckpt.to_str().unwrap(), "--frames", "100", "--eb-n0-db", "5"],
    );
    assert_ok(&o);
}

#[test]
fn vae_training_then_traverse_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ncspoof(
        tmp.path(),
        &["train-vae", "--experiment", "random", "--rows", "500", "--steps", "20", "--nz", "6"],
    );
    assert_ok(&o);
    let model = tmp.path().join("train-vae");
    let m = model.to_str().unwrap();
    assert_ok(&ncspoof(tmp.path(), &["traverse", "--model", m, "--rows", "20", "--k", "8"]));
    let map = fs::read_to_string(tmp.path().join("traverse/latent_map.csv")).unwrap();
    assert_eq!(map.lines().count(), 7);
    assert_ok(&ncspoof(tmp.path(), &["metrics", "--model", m, "--rows", "20", "--votes", "4"]));
    let csv = fs::read_to_string(tmp.path().join("metrics/metrics.csv")).unwrap();
    let metrics: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(metrics, ["traversal", "traversal", "higgins", "kim"]);
}
