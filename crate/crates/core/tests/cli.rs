use std::path::{Path, PathBuf};
use std::process::Command;

use augeq::datasets::encode_idx_images;
use augeq::harness::output::{read_results, RESULT_COLUMNS};

const TINY: &str = r#"{
  "data": {"synthetic": {"d": 8, "n": 16, "rotation_seed": 4, "spectrum": {"kind": "linear", "lo": 0.5, "hi": 1.5},
           "truth_map": {"kind": "identity"}, "theta_star": {"kind": "ones"}, "noise_sigma2": 0.25}},
  "features": {"kind": "random-mlp", "hidden_sizes": [8], "output_dim": 6, "seed": 3},
  "scheme": {"kind": "masking", "keep_prob": 0.7},
  "grid": {"lambdas": [0.1, 1.0], "alphas": [0.0, 0.5], "n_values": [12]},
  "replicates": 10,
  "mc": {"n_mc_aug": 4, "n_mc_data": 1000},
  "seed": 5
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_augeq"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> (i32, String, String) {
    let o = bin().args(args).output().unwrap();
    (
        o.status.code().unwrap(),
        String::from_utf8_lossy(&o.stdout).into(),
        String::from_utf8_lossy(&o.stderr).into(),
    )
}

#[test]
fn sweep_writes_schema_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg_s = cfg.to_str().unwrap();
    assert_eq!(
        run(&[
            "sweep-lambda",
            "--config",
            cfg_s,
            "--out",
            a.to_str().unwrap(),
            "--workers",
            "1"
        ])
        .0,
        0
    );
    assert_eq!(
        run(&[
            "sweep-lambda",
            "--config",
            cfg_s,
            "--out",
            b.to_str().unwrap(),
            "--workers",
            "3"
        ])
        .0,
        0
    );
    let ta = std::fs::read_to_string(a.join("sweep_lambda.csv")).unwrap();
    let tb = std::fs::read_to_string(b.join("sweep_lambda.csv")).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(ta.lines().next().unwrap(), RESULT_COLUMNS.join(","));
    let rows = read_results(&ta).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows
        .iter()
        .all(|r| r.fp_converged && r.g_mean.is_finite() && r.bias2_emp.is_finite()));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("sweep_lambda.meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["risk_method"], "population");

    let c = dir.path().join("c");
    assert_eq!(
        run(&[
            "sweep-lambda",
            "--config",
            cfg_s,
            "--out",
            c.to_str().unwrap(),
            "--seed",
            "6"
        ])
        .0,
        0
    );
    assert_ne!(
        ta,
        std::fs::read_to_string(c.join("sweep_lambda.csv")).unwrap()
    );
}

#[test]
fn every_synthetic_subcommand_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY);
    for (cmd, file, lines) in [
        ("sweep-alpha", "sweep_alpha.csv", 5),
        ("sweep-aspect", "sweep_aspect.csv", 5),
        ("bias-variance", "bias_variance.csv", 5),
        ("validate", "validate.csv", 6),
    ] {
        let (code, out, err) = run(&[
            cmd,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{cmd}: {err}");
        assert!(out.contains(file));
        assert_eq!(
            std::fs::read_to_string(dir.path().join(file))
                .unwrap()
                .lines()
                .count(),
            lines
        );
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(
        dir.path(),
        "u.json",
        &TINY.replacen("\"seed\": 5", "\"seed\": 5, \"colour\": 1", 1),
    );
    let (code, _, err) = run(&[
        "sweep-lambda",
        "--config",
        unknown.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("colour"));
    assert_eq!(
        run(&["sweep-lambda", "--config", "/nonexistent/c.json"]).0,
        2
    );
    let few = write_config(
        dir.path(),
        "r.json",
        &TINY.replacen("\"replicates\": 10", "\"replicates\": 3", 1),
    );
    assert_eq!(
        run(&[
            "bias-variance",
            "--config",
            few.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap()
        ])
        .0,
        2
    );
    let neg = write_config(
        dir.path(),
        "l.json",
        &TINY.replacen("[0.1, 1.0]", "[-0.1]", 1),
    );
    assert_eq!(
        run(&["sweep-lambda", "--config", neg.to_str().unwrap()]).0,
        2
    );
}

fn mnist_config(dir: &Path, train: &Path, test: &Path) -> PathBuf {
    let text = format!(
        r#"{{"data": {{"mnist": {{"train_images": "{}", "test_images": "{}", "patch_size": 3}}}},
            "features": {{"kind": "identity"}},
            "grid": {{"lambdas": [0.01], "alphas": [0.0, 0.5], "aspect_ratios": [1.0, 2.0]}},
            "replicates": 2, "mc": {{"n_mc_aug": 4, "n_mc_data": 0}}, "seed": 1}}"#,
        train.display(),
        test.display()
    );
    write_config(dir, "m.json", &text)
}

#[test]
fn missing_or_corrupt_images_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.idx");
    let cfg = mnist_config(dir.path(), &missing, &missing);
    assert_eq!(
        run(&[
            "mnist",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap()
        ])
        .0,
        3
    );
    let bad = dir.path().join("bad.idx");
    std::fs::write(&bad, [0u8, 0, 8, 1, 0, 0, 0, 1]).unwrap();
    let cfg = mnist_config(dir.path(), &bad, &bad);
    let (code, _, err) = run(&[
        "mnist",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn mnist_subcommand_on_synthetic_idx() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, cols) = (9, 9);
    let make = |count: usize, seed: u32| {
        let bytes: Vec<u8> = (0..count * rows * cols)
            .map(|i| {
                let (img, px) = (i / (rows * cols), i % (rows * cols));
                let (r, c) = ((px / cols) as f64 - 4.0, (px % cols) as f64 - 4.0);
                let shift =
                    ((img as u32).wrapping_mul(2654435761).wrapping_add(seed) % 5) as f64 - 2.0;
                (255.0 * (-((r - shift).powi(2) + c * c) / 8.0).exp()) as u8
            })
            .collect();
        encode_idx_images(count, rows, cols, &bytes)
    };
    let train = dir.path().join("train.idx");
    let test = dir.path().join("test.idx");
    std::fs::write(&train, make(400, 1)).unwrap();
    std::fs::write(&test, make(100, 2)).unwrap();
    let cfg = mnist_config(dir.path(), &train, &test);
    let (code, out, err) = run(&[
        "mnist",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let csvs: Vec<&str> = out.lines().filter(|l| l.ends_with(".csv")).collect();
    assert_eq!(csvs.len(), 3);
    for f in csvs {
        let rows = read_results(&std::fs::read_to_string(f).unwrap()).unwrap();
        assert_eq!(rows.len(), 4);
        for r in rows {
            assert_eq!((r.p, r.d), (72, 72));
            assert!(r.g_mean.is_finite() && r.g_det.is_finite() && r.fp_converged);
        }
    }
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("mnist_1_masking.meta.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["risk_method"], "test-set");
    assert!(meta["coordinatewise_gap"].as_f64().unwrap() <= 1e-10);
}
