use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dampid::nn::{save_weights, CellKind, ModelSpec, ModelWeights, WeightsHeader};
use tempfile::TempDir;

fn dampid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dampid"))
        .args(args)
        .output()
        .expect("spawn dampid")
}

fn ok(args: &[&str]) -> String {
    let out = dampid(args);
    assert!(
        out.status.success(),
        "dampid {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn simulate_writes_full_trajectory_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.dmt"), dir.path().join("b.dmt"));
    let csv = dir.path().join("a.csv");
    let out = ok(&["simulate", "--zeta", "0.3", "--noise-sigma", "0.01", "--seed", "9", "--out", p(&a), "--csv", p(&csv)]);
    assert!(out.starts_with("10001 samples"), "{out}");
    ok(&["simulate", "--zeta", "0.3", "--noise-sigma", "0.01", "--seed", "9", "--out", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 10001);
    assert!(rows.iter().all(|r| r[1] == 1.0));
    assert_eq!(rows[10000][0], 10.0);
}

#[test]
fn simulate_rejects_unstable_damping() {
    let dir = TempDir::new().unwrap();
    let out = dampid(&["simulate", "--zeta", "1.5", "--out", p(&dir.path().join("x.dmt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{ "noise_sigma": 0.5 }"#).unwrap();
    let (noisy, clean) = (dir.path().join("noisy.csv"), dir.path().join("clean.csv"));
    let o = p(&dir.path().join("t.dmt")).to_string();
    ok(&["--config", p(&cfg), "simulate", "--zeta", "0.2", "--out", &o, "--csv", p(&noisy)]);
    ok(&["--config", p(&cfg), "simulate", "--zeta", "0.2", "--noise-sigma", "0", "--out", &o, "--csv", p(&clean)]);
    let plain = dir.path().join("plain.csv");
    ok(&["simulate", "--zeta", "0.2", "--out", &o, "--csv", p(&plain)]);
    assert_eq!(fs::read(&clean).unwrap(), fs::read(&plain).unwrap());
    let (noisy, clean) = (csv_rows(&noisy), csv_rows(&clean));
    assert!(noisy.iter().zip(&clean).any(|(n, c)| n[2] != c[2]));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{ "epoch": 3 }"#).unwrap();
    let out = dampid(&["--config", p(&cfg), "gradcheck", "--cell", "gru", "--trials", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn gradcheck_exit_code_follows_tolerance() {
    let out = ok(&["gradcheck", "--cell", "lstm", "--trials", "2"]);
    assert!(out.contains("PASS"), "{out}");
    let out = dampid(&["gradcheck", "--cell", "lstm", "--trials", "2", "--tolerance", "1e-300"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn predict_with_constant_model_returns_its_bias() {
    let dir = TempDir::new().unwrap();
    let spec = ModelSpec {
        cell_kind: CellKind::Gru,
        input_size: 168,
        hidden_size: 3,
        fc1_size: 2,
        dropout_rate: 0.5,
        output_size: 1,
    };
    // zero weights make the output exactly the final bias
    let mut w = ModelWeights::<f32>::zeros(spec);
    w.fc2_bias[0] = 0.25;
    let model = dir.path().join("m.dmw");
    save_weights(&w, &WeightsHeader::new(spec), &model).unwrap();

    let csv = dir.path().join("s.csv");
    let traj = dir.path().join("s.dmt");
    ok(&["simulate", "--zeta", "0.4", "--input", "ramp:1", "--out", p(&traj), "--csv", p(&csv)]);
    let first = ok(&["predict", "--model", p(&model), "--input", p(&csv), "--offset", "3"]);
    assert_eq!(first.trim(), "zeta_hat=0.25 model=gru-untrained");
    let second = ok(&["predict", "--model", p(&model), "--input", p(&traj), "--offset", "3"]);
    assert_eq!(first, second);

    let late = dampid(&["predict", "--model", p(&model), "--input", p(&csv), "--offset", "8"]);
    assert!(!late.status.success());
}

#[test]
fn extended_dataset_has_64_trajectories() {
    let dir = TempDir::new().unwrap();
    let out = ok(&["gen-dataset", "--extended", "--out", p(dir.path())]);
    assert!(out.starts_with("64 trajectories"), "{out}");
}

#[test]
fn train_then_evaluate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let models = dir.path().join("models");
    ok(&["gen-dataset", "--out", p(&data)]);
    ok(&[
        "train", "--exp", "Exp4", "--dataset", p(&data), "--out", p(&models), "--stride", "1000", "--epochs", "1",
        "--batch-size", "16", "--deterministic",
    ]);
    for f in ["experiment.json", "fold1.dmw", "fold2.dmw", "report/summary.json", "report/predictions.csv"] {
        assert!(models.join(f).is_file(), "missing {f}");
    }

    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    let s1 = ok(&["--deterministic", "evaluate", "--dataset", p(&data), "--models", p(&models), "--out", p(&e1)]);
    let s2 = ok(&["--deterministic", "evaluate", "--dataset", p(&data), "--models", p(&models), "--out", p(&e2)]);
    assert_eq!(s1, s2);
    let mut names: Vec<_> = fs::read_dir(&e1).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 3);
    for name in names {
        assert_eq!(fs::read(e1.join(&name)).unwrap(), fs::read(e2.join(&name)).unwrap(), "{name:?} differs");
    }

    // a different master seed gives a different split, which the models were not trained on
    let other = dampid(&["--master-seed", "1", "evaluate", "--dataset", p(&data), "--models", p(&models), "--out", p(&e2)]);
    assert!(!other.status.success());

    let refused = dampid(&["train", "--exp", "Exp6b", "--dataset", p(&data), "--out", p(&models)]);
    assert!(!refused.status.success());
}
