use std::path::Path;
use std::process::{Command, Output};

fn fedmae(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedmae"));
    cmd.args(args);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn cost_succeeds_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cost");
    let o = fedmae(&["cost", "--out", out.to_str().unwrap()], None);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("cost.json")).unwrap()).unwrap();
    assert_eq!(
        json["reference_model"]["mb_per_client_per_round"].as_f64(),
        Some(933.28)
    );
    assert!(out.join("config.echo.txt").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.cfg",
        "model.mask_ratio = 1.5\nnot.a.key = 1\n",
    );
    let o = fedmae(&["cost"], Some(&bad));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("mask_ratio") && err.contains("not.a.key"),
        "{err}"
    );

    let o = fedmae(
        &[
            "pretrain-fed",
            "--strategy",
            "sgd-magic",
            "--out",
            dir.path().to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
    let o = fedmae(
        &[
            "ablation",
            "--reps",
            "0",
            "--out",
            dir.path().to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn aborted_runs_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "abort.cfg",
        "corpus.n_images = 1000\nfed.rounds = 1\neval.size = 4\nfed.failure_prob = 0.9\nfed.min_completion_fraction = 1.0\nfed.max_retries = 0\n",
    );
    let out = dir.path().join("pf");
    let o = fedmae(
        &[
            "pretrain-fed",
            "--strategy",
            "fedavg",
            "--out",
            out.to_str().unwrap(),
        ],
        Some(&cfg),
    );
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    let out = dir.path().join("ab");
    let o = fedmae(
        &[
            "ablation",
            "--strategy",
            "centralized,fedavg",
            "--reps",
            "1",
            "--out",
            out.to_str().unwrap(),
        ],
        Some(&cfg),
    );
    assert_eq!(o.status.code(), Some(3));
    // the centralized row never fails, so it is still reported
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(csv.contains("centralized,0,ok"));
    assert!(csv.contains("fedavg,0,failed"), "{csv}");
}

#[test]
fn pretrain_then_compare_and_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "small.cfg",
        "corpus.n_images = 1000\nfed.rounds = 1\neval.size = 8\nprobe.seeds = 1\nprobe.epochs = 2\nprobe.n_train = 40\nprobe.n_test = 40\n",
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = fedmae(
        &["pretrain-central", "--out", a.to_str().unwrap()],
        Some(&cfg),
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o = fedmae(
        &[
            "pretrain-fed",
            "--strategy",
            "krum",
            "--out",
            b.to_str().unwrap(),
        ],
        Some(&cfg),
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for d in [&a, &b] {
        assert!(d.join("final.ckpt").exists() && d.join("round_log.csv").exists());
    }

    let cmp = dir.path().join("cmp");
    let o = Command::new(env!("CARGO_BIN_EXE_fedmae"))
        .args([
            "compare",
            "--out",
            cmp.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--a",
        ])
        .arg(a.join("final.ckpt"))
        .arg("--b")
        .arg(b.join("final.ckpt"))
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(cmp.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(json["n_units"].as_u64(), Some(8));

    let pr = dir.path().join("probe");
    let o = Command::new(env!("CARGO_BIN_EXE_fedmae"))
        .args([
            "probe",
            "--out",
            pr.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--model",
        ])
        .arg(a.join("final.ckpt"))
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = std::fs::read_to_string(pr.join("probe.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
