use fedmae::experiment::{self, ExperimentConfig, Method};
use fedmae::federation::Strategy;

const TINY: &str = "corpus.n_images = 1000\nfed.rounds = 1\neval.size = 4\n";

#[test]
fn full_table_has_one_row_per_method_and_rep() {
    let cfg = ExperimentConfig::parse(TINY).unwrap();
    assert_eq!(cfg.methods.len(), 8);
    assert_eq!(cfg.reps, 3);
    let ab = experiment::run_ablation(&cfg, &cfg.methods).unwrap();
    let csv = experiment::ablation_csv(&ab.thresholds, ab.reduction, &ab.runs);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 25);
    assert_eq!(lines[0], experiment::ablation_header(&cfg.thresholds));
    assert!(lines[1..].iter().all(|l| l.split(',').nth(2) == Some("ok")));
}

#[test]
fn repeated_method_gives_identical_rows_within_a_rep() {
    let cfg = ExperimentConfig::parse(&format!("{TINY}reps = 2\n")).unwrap();
    let fedavg = Method::Fed(Strategy::FedAvg);
    let ab = experiment::run_ablation(&cfg, &[fedavg, fedavg]).unwrap();
    let csv = experiment::ablation_csv(&ab.thresholds, ab.reduction, &ab.runs);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], rows[1]);
    assert_eq!(rows[2], rows[3]);
    assert_ne!(rows[0], rows[2]);
}

#[test]
fn sweep_needs_two_methods() {
    let cfg = ExperimentConfig::parse(TINY).unwrap();
    assert!(experiment::run_ablation(&cfg, &[Method::Centralized])
        .unwrap_err()
        .is_config());
}

#[test]
fn loaded_config_echo_reparses_to_itself() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.cfg");
    std::fs::write(
        &path,
        "# tiny\nseed = 9\nfed.rounds = 3\neval.thresholds = 0.2, 0.02\nsam.rho = 0.1\n",
    )
    .unwrap();
    let cfg = experiment::load_config(&path, Some(dir.path())).unwrap();
    let echo = std::fs::read_to_string(dir.path().join(experiment::ECHO_FILE)).unwrap();
    assert_eq!(ExperimentConfig::parse(&echo).unwrap(), cfg);
    assert_eq!(cfg.fed.lr.total_rounds, 3);
    assert_eq!(cfg.thresholds, vec![0.2, 0.02]);
}

#[test]
fn invalid_mask_ratio_names_field_and_range() {
    let err = ExperimentConfig::parse("model.mask_ratio = 1.5\nreps = 0\n").unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("mask_ratio") && msg.contains("[0, 1)"),
        "{msg}"
    );
    assert!(msg.contains("reps"), "{msg}");
}

#[test]
fn reports_are_byte_identical_on_rerun() {
    let cfg = ExperimentConfig::parse(&format!(
        "{TINY}reps = 1\nmethods = adaptive-fedsam, fedavg, krum\n"
    ))
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let ab = experiment::run_ablation(&cfg, &cfg.methods).unwrap();
        experiment::emit_reports(&cfg, &ab, dir.path()).unwrap();
        let files = [
            "ablation.csv",
            "comparison.json",
            "cost.json",
            "runs/krum/rep0/round_log.csv",
            "runs/fedavg/rep0/final.ckpt",
        ];
        snapshots.push(files.map(|f| std::fs::read(dir.path().join(f)).unwrap()));
    }
    assert_eq!(snapshots[0], snapshots[1]);
}

#[test]
fn centralized_matches_federated_step_budget() {
    let cfg = ExperimentConfig::parse(&format!(
        "{TINY}reps = 1\nmethods = centralized, fedavg, adaptive-fedsam\n"
    ))
    .unwrap();
    let ab = experiment::run_ablation(&cfg, &cfg.methods).unwrap();
    let steps = |m| {
        ab.get(m, 0)
            .unwrap()
            .outcome
            .as_ref()
            .unwrap()
            .training
            .optimizer_steps()
    };
    let central = steps(Method::Centralized) as i64;
    let fed = steps(Method::Fed(Strategy::FedAvg)) as i64;
    // one ragged final batch per client at most
    assert!(
        (central - fed).abs() <= cfg.n_clients() as i64,
        "{central} vs {fed}"
    );
    assert_eq!(steps(Method::AdaptiveFedSam) as i64, fed);
    let cost = experiment::cost_summary(&cfg, &ab.runs).unwrap();
    let evals: std::collections::HashMap<_, _> = cost.grad_evals.into_iter().collect();
    assert_eq!(evals["adaptive-fedsam"], 2 * evals["fedavg"]);
}
