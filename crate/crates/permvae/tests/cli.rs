//! End-to-end runs of the `permvae` binary: the full workflow on a small
//! dataset, rerun determinism, flag validation and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn permvae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_permvae"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(output: &Output, expected: i32) {
    let code = output.status.code().expect("exit code");
    assert_eq!(
        code,
        expected,
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

const GEN_DATA: &[&str] = &[
    "gen-data", "--n", "48", "--clusters", "2", "--views", "2", "--dims", "4,5", "--noise", "0.05",
    "--seed", "3", "--out", "data",
];

const GEN_MASKS: &[&str] =
    &["gen-masks", "--data", "data", "--eta", "0.5", "--seed", "4", "--out", "data/fp.jsonl"];

const TRAIN_TINY: &[&str] = &[
    "train", "--data", "data", "--fingerprint", "data/fp.jsonl", "--d", "4", "--k", "2",
    "--warmup", "2", "--epochs", "6", "--batch", "16", "--enc-hidden", "8", "--corr-hidden", "4",
    "--seed", "1", "--out", "run",
];

#[test]
fn full_workflow_and_rerun_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    assert_code(&permvae(root, GEN_DATA), 0);
    for name in ["view_1.csv", "view_2.csv", "labels.csv", "manifest.json"] {
        assert!(root.join("data").join(name).exists(), "{name} missing");
    }
    let first = std::fs::read(root.join("data/view_1.csv")).unwrap();
    assert_code(&permvae(root, GEN_DATA), 0);
    assert_eq!(first, std::fs::read(root.join("data/view_1.csv")).unwrap(), "rerun is byte-identical");

    assert_code(&permvae(root, GEN_MASKS), 0);
    let fp_bytes = std::fs::read(root.join("data/fp.jsonl")).unwrap();
    let incomplete = String::from_utf8_lossy(&fp_bytes)
        .lines()
        .skip(1)
        .filter(|l| l.contains('0'))
        .count();
    assert_eq!(incomplete, 24, "eta 0.5 of 48 samples");
    assert_code(&permvae(root, GEN_MASKS), 0);
    assert_eq!(fp_bytes, std::fs::read(root.join("data/fp.jsonl")).unwrap());

    assert_code(&permvae(root, TRAIN_TINY), 0);
    assert!(root.join("run/checkpoint.bin").exists());
    assert!(root.join("run/train_log.jsonl").exists());
    let ckpt = std::fs::read(root.join("run/checkpoint.bin")).unwrap();
    assert_code(&permvae(root, TRAIN_TINY), 0);
    assert_eq!(ckpt, std::fs::read(root.join("run/checkpoint.bin")).unwrap(), "training is deterministic");

    let eval_args = [
        "eval", "--checkpoint", "run/checkpoint.bin", "--data", "data", "--fingerprint",
        "data/fp.jsonl", "--seed", "0", "--out", "metrics.json",
    ];
    assert_code(&permvae(root, &eval_args), 0);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("metrics.json")).unwrap()).unwrap();
    let acc = metrics["acc"].as_f64().unwrap();
    let nmi = metrics["nmi"].as_f64().unwrap();
    let ari = metrics["ari"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!((0.0..=1.0).contains(&nmi));
    assert!((-1.0..=1.0).contains(&ari));
    assert!((metrics["eta"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!(metrics["config_digest"].as_str().unwrap().len() == 16);

    let infer_args = [
        "infer", "--checkpoint", "run/checkpoint.bin", "--data", "data", "--fingerprint",
        "data/fp.jsonl", "--out", "inferred",
    ];
    assert_code(&permvae(root, &infer_args), 0);
    let recon = std::fs::read_to_string(root.join("inferred/recon_view_1.csv")).unwrap();
    assert_eq!(recon.lines().count(), 48);
    assert_eq!(recon.lines().next().unwrap().split(',').count(), 4);
    let recon2 = std::fs::read_to_string(root.join("inferred/recon_view_2.csv")).unwrap();
    assert_eq!(recon2.lines().next().unwrap().split(',').count(), 5);
    assert!(root.join("inferred/mse.json").exists());
    let bytes = std::fs::read(root.join("inferred/recon_view_1.csv")).unwrap();
    assert_code(&permvae(root, &infer_args), 0);
    assert_eq!(bytes, std::fs::read(root.join("inferred/recon_view_1.csv")).unwrap());
}

#[test]
fn zero_epoch_training_keeps_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_code(&permvae(root, GEN_DATA), 0);
    assert_code(&permvae(root, GEN_MASKS), 0);
    let zero = [
        "train", "--data", "data", "--fingerprint", "data/fp.jsonl", "--d", "4", "--k", "2",
        "--warmup", "0", "--epochs", "0", "--enc-hidden", "8", "--corr-hidden", "4", "--seed",
        "9", "--out", "a",
    ];
    assert_code(&permvae(root, &zero), 0);
    let mut again = zero;
    again[again.len() - 1] = "b";
    assert_code(&permvae(root, &again), 0);
    assert_eq!(
        std::fs::read(root.join("a/checkpoint.bin")).unwrap(),
        std::fs::read(root.join("b/checkpoint.bin")).unwrap()
    );
}

#[test]
fn validation_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // L >= 2 is enforced
    let out = permvae(root, &["gen-data", "--views", "1", "--out", "data"]);
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("2 views"));

    assert_code(&permvae(root, GEN_DATA), 0);
    // eta outside [0, 1]
    let out = permvae(root, &["gen-masks", "--data", "data", "--eta", "1.5", "--out", "data/fp.jsonl"]);
    assert_code(&out, 1);

    assert_code(&permvae(root, GEN_MASKS), 0);
    // unknown prior mode
    let out = permvae(
        root,
        &[
            "train", "--data", "data", "--fingerprint", "data/fp.jsonl", "--prior-mode",
            "bogus", "--epochs", "1", "--warmup", "0", "--out", "run",
        ],
    );
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("prior mode"));

    // k > d
    let out = permvae(
        root,
        &[
            "train", "--data", "data", "--fingerprint", "data/fp.jsonl", "--d", "4", "--k",
            "8", "--epochs", "1", "--warmup", "0", "--out", "run",
        ],
    );
    assert_code(&out, 1);

    // missing labels file
    assert_code(&permvae(root, TRAIN_TINY), 0);
    std::fs::remove_file(root.join("data/labels.csv")).unwrap();
    let out = permvae(
        root,
        &[
            "eval", "--checkpoint", "run/checkpoint.bin", "--data", "data", "--fingerprint",
            "data/fp.jsonl", "--out", "metrics.json",
        ],
    );
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("label"));

    // unknown ablation mode
    let out = permvae(
        root,
        &[
            "ablate", "--data", "data", "--fingerprint", "data/fp.jsonl", "--modes",
            "cyclic,nonsense", "--seeds", "0", "--out", "t.csv",
        ],
    );
    assert_code(&out, 1);
}

#[test]
fn numerical_abort_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_code(&permvae(root, GEN_DATA), 0);
    assert_code(&permvae(root, GEN_MASKS), 0);
    // an absurd learning rate overflows the forward pass on the next batch
    let out = permvae(
        root,
        &[
            "train", "--data", "data", "--fingerprint", "data/fp.jsonl", "--d", "4", "--k", "2",
            "--warmup", "0", "--epochs", "3", "--batch", "16", "--enc-hidden", "8",
            "--corr-hidden", "4", "--lr", "1e200", "--seed", "1", "--out", "run",
        ],
    );
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn gradcheck_command_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = permvae(dir.path(), &["gradcheck", "--d", "4", "--k", "2", "--views", "2", "--seed", "0"]);
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    // minimal latent dimension also passes
    let out = permvae(dir.path(), &["gradcheck", "--d", "1", "--k", "1", "--views", "2", "--seed", "0"]);
    assert_code(&out, 0);
}

#[test]
fn ablate_writes_the_summary_schema() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_code(&permvae(root, GEN_DATA), 0);
    assert_code(&permvae(root, GEN_MASKS), 0);
    let out = permvae(
        root,
        &[
            "ablate", "--data", "data", "--fingerprint", "data/fp.jsonl", "--modes", "cyclic",
            "--seeds", "0", "--d", "4", "--k", "4", "--warmup", "1", "--epochs", "3", "--batch",
            "16", "--enc-hidden", "8", "--corr-hidden", "4", "--out", "ablation.csv",
        ],
    );
    assert_code(&out, 0);
    let csv = std::fs::read_to_string(root.join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "Model,Reconstruction,Regularization,ACC,NMI,ARI");
    assert_eq!(lines.count(), 1);
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(
        root.join("config.json"),
        r#"{"gen-data": {"n": 30, "views": 2, "dims": [4], "clusters": 2, "seed": 8, "out": "data"}}"#,
    )
    .unwrap();
    assert_code(&permvae(root, &["--config", "config.json", "gen-data"]), 0);
    let rows = std::fs::read_to_string(root.join("data/view_1.csv")).unwrap().lines().count();
    assert_eq!(rows, 30, "n came from the config file");

    // flag overrides the file
    assert_code(&permvae(root, &["--config", "config.json", "gen-data", "--n", "12"]), 0);
    let rows = std::fs::read_to_string(root.join("data/view_1.csv")).unwrap().lines().count();
    assert_eq!(rows, 12);

    // unknown keys are rejected
    std::fs::write(root.join("config.json"), r#"{"gen-data": {"bogus": 1}}"#).unwrap();
    assert_code(&permvae(root, &["--config", "config.json", "gen-data"]), 1);
}
