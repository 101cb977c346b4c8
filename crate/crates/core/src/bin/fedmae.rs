use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedmae::experiment::{self, ExperimentConfig, ExperimentError, Method};
use fedmae::federation;
use fedmae::partition::SyntheticCorpus;
use fedmae::stats::{self, UnitMetric};

#[derive(Parser)]
#[command(
    name = "fedmae",
    version,
    about = "Federated masked-autoencoder pretraining simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method name, or a comma-separated list for `ablation`.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the pooled client data.
    PretrainCentral(Common),
    /// Federated pretraining with one method.
    PretrainFed(Common),
    /// Every configured method for every replication.
    Ablation(Common),
    /// Paired signed-rank test between two checkpoints on the held-out set.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Unit score threshold; per-image masked MSE when omitted.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Full and frozen probes over the configured seeds.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint; pretrained from scratch when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Communication and compute cost report.
    Cost(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::PretrainCentral(c)
            | Command::PretrainFed(c)
            | Command::Ablation(c)
            | Command::Cost(c) => c,
            Command::Compare { common, .. } | Command::Probe { common, .. } => common,
        }
    }
}

enum Failure {
    Config(String),
    Aborted(String),
    Other(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config() || matches!(e, ExperimentError::Partition(_)) {
            Failure::Config(e.to_string())
        } else if e.is_abort() {
            Failure::Aborted(e.to_string())
        } else {
            Failure::Other(e.to_string())
        }
    }
}

fn config(common: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(s) = common.seed {
        cfg.apply_override("seed", &s.to_string())?;
    }
    if let Some(r) = common.reps {
        cfg.apply_override("reps", &r.to_string())?;
    }
    if let Some(o) = &common.out {
        cfg.out = o.display().to_string();
    }
    let out = PathBuf::from(&cfg.out);
    Ok((cfg, out))
}

fn single_method(common: &Common, default: Method) -> Result<Method, Failure> {
    match &common.strategy {
        None => Ok(default),
        Some(s) => {
            Method::parse(s).ok_or_else(|| Failure::Config(format!("unknown strategy {s:?}")))
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (mut cfg, out) = config(cli.command.common())?;
    match &cli.command {
        Command::PretrainCentral(_) => {
            experiment::write_echo(&cfg, &out)?;
            let (result, eval) = experiment::run_centralized(&cfg, 0)?;
            experiment::write_training(&cfg, &result, &out)?;
            print_eval("centralized", &eval);
        }
        Command::PretrainFed(common) => {
            let method = single_method(common, Method::AdaptiveFedSam)?;
            experiment::write_echo(&cfg, &out)?;
            let corpus = SyntheticCorpus::generate(&cfg.corpus);
            let setup = experiment::prepare(&cfg, &corpus, 0)?;
            let result = experiment::run_method(&cfg, &setup, method)?;
            experiment::write_training(&cfg, &result, &out)?;
            let eval = federation::evaluate(&result.final_weights, &cfg.arch, &setup.eval)
                .map_err(ExperimentError::from)?;
            print_eval(method.name(), &eval);
        }
        Command::Ablation(common) => {
            if let Some(list) = &common.strategy {
                cfg.apply_override("methods", list)?;
            }
            experiment::write_echo(&cfg, &out)?;
            let ab = experiment::run_ablation(&cfg, &cfg.methods)?;
            experiment::emit_reports(&cfg, &ab, &out)?;
            print!(
                "{}",
                experiment::ablation_csv(&ab.thresholds, ab.reduction, &ab.runs)
            );
            let failed: Vec<String> = ab
                .runs
                .iter()
                .filter_map(|r| {
                    r.outcome
                        .as_ref()
                        .err()
                        .map(|e| format!("{} rep{}: {e}", r.method.name(), r.rep))
                })
                .collect();
            if !failed.is_empty() {
                return Err(Failure::Aborted(failed.join("\n")));
            }
        }
        Command::Compare {
            a, b, threshold, ..
        } => {
            experiment::write_echo(&cfg, &out)?;
            let (arch_a, wa) = experiment::read_model(a)?;
            let (arch_b, wb) = experiment::read_model(b)?;
            if arch_a != arch_b || arch_a != cfg.arch {
                return Err(Failure::Config(
                    "checkpoints and config disagree on the architecture".into(),
                ));
            }
            let metric = match threshold {
                Some(t) => UnitMetric::PatchesBelow(*t),
                None => UnitMetric::MaskedMse,
            };
            let images = experiment::eval_images(&cfg);
            let report = stats::compare_models_paired(
                &wa,
                &wb,
                &cfg.arch,
                &images,
                cfg.eval_mask_seed,
                metric,
                None,
                cfg.alpha,
            )
            .map_err(ExperimentError::from)?;
            experiment::write_comparison(&report, &out)?;
            println!("{}", report.to_json());
        }
        Command::Probe { model, .. } => {
            experiment::write_echo(&cfg, &out)?;
            let weights = match model {
                Some(p) => Some(load_matching(p, &cfg)?),
                None => None,
            };
            let reports = experiment::run_probes(&cfg, weights.as_deref())?;
            experiment::emit_probe_reports(&reports, &out)?;
            print!("{}", fedmae::probe::probe_csv(&reports));
        }
        Command::Cost(_) => {
            experiment::write_echo(&cfg, &out)?;
            let summary = experiment::write_cost_report(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
        }
    }
    Ok(())
}

fn load_matching(path: &Path, cfg: &ExperimentConfig) -> Result<Vec<f64>, Failure> {
    let (arch, w) = experiment::read_model(path)?;
    if arch != cfg.arch {
        return Err(Failure::Config(format!(
            "{}: architecture differs from the config",
            path.display()
        )));
    }
    Ok(w.to_vec())
}

fn print_eval(name: &str, eval: &federation::EvalSummary) {
    println!(
        "{name}: masked_mse={:.6} counts={:?}",
        eval.masked_mse, eval.counts
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("{m}");
            ExitCode::from(2)
        }
        Err(Failure::Aborted(m)) => {
            eprintln!("{m}");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("{m}");
            ExitCode::FAILURE
        }
    }
}
