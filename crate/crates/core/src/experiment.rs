//! Config-driven orchestration of pretraining runs, the strategy sweep,
//! paired comparisons, cost reports and probes.
//!
//! Configs are flat `key = value` text with dotted section names. Blank
//! lines and `#` comments are ignored; unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federation::{
    self, derive_seed, ClientData, EvalSet, EvalSummary, FedConfig, FedError, MedianMode, Strategy,
    TrainingResult,
};
use crate::mae::{self, Image, MaeArchitecture, Reduction, DEFAULT_THRESHOLDS};
use crate::optim::{CycleShape, InnerOptimizer, SamConfig};
use crate::partition::{
    self, apply_domain_shift, default_domain_shifts, endo700k_fractions, CorpusSpec,
    PartitionManifest, PartitionMode, PartitionSpec, SyntheticCorpus,
};
use crate::probe::{self, HeadKind, ProbeConfig, ProbeMode, ProbeReport};
use crate::stats::{self, ComparisonReport, CostReport, UnitMetric};
use crate::tensor::Precision;
use crate::weights::WeightVector;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config errors:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Partition(#[from] partition::PartitionError),
    #[error(transparent)]
    Model(#[from] mae::MaeError),
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
    #[error(transparent)]
    Probe(#[from] probe::ProbeError),
}

impl ExperimentError {
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }

    pub fn is_abort(&self) -> bool {
        matches!(self, ExperimentError::Fed(FedError::RoundAborted { .. }))
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One row family of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Pooled data, plain local steps, same round structure.
    Centralized,
    /// Adaptive sharpness-aware client steps, FedAvg, server averaging.
    AdaptiveFedSam,
    Fed(Strategy),
}

impl Method {
    pub const TABLE: [Method; 8] = [
        Method::Centralized,
        Method::AdaptiveFedSam,
        Method::Fed(Strategy::FedAvg),
        Method::Fed(Strategy::FedAvgM),
        Method::Fed(Strategy::FedAdam),
        Method::Fed(Strategy::FedMedian),
        Method::Fed(Strategy::QFedAvg),
        Method::Fed(Strategy::Krum),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Centralized => "centralized",
            Method::AdaptiveFedSam => "adaptive-fedsam",
            Method::Fed(s) => s.name(),
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "centralized" => Some(Method::Centralized),
            "adaptive-fedsam" | "adaptivefedsam" => Some(Method::AdaptiveFedSam),
            other => Strategy::parse(other).map(Method::Fed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub head: HeadKind,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub encoder_lr_scale: f64,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seeds: usize,
    pub pretrain_method: Method,
    pub pretrain_rounds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSettings {
    pub params: f64,
    pub bytes_per_param: f64,
    pub rounds: usize,
    pub clients: usize,
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: String,
    pub reps: usize,
    pub methods: Vec<Method>,
    pub corpus: CorpusSpec,
    pub partition: PartitionSpec,
    pub domain_shift: bool,
    pub arch: MaeArchitecture,
    pub fed: FedConfig,
    pub sam: SamConfig,
    pub eval_size: usize,
    pub eval_mask_seed: u64,
    pub thresholds: Vec<f64>,
    pub reduction: Reduction,
    pub alpha: f64,
    pub probe: ProbeSettings,
    pub cost: CostSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fed = FedConfig::default();
        ExperimentConfig {
            seed: 0,
            out: "out".into(),
            reps: 3,
            methods: Method::TABLE.to_vec(),
            corpus: CorpusSpec::default(),
            partition: endo700k_fractions(),
            domain_shift: true,
            arch: MaeArchitecture::default(),
            fed,
            sam: SamConfig {
                rho: 0.05,
                adaptive: true,
                eta: 0.01,
            },
            eval_size: 128,
            eval_mask_seed: 1_000_003,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            reduction: Reduction::Max,
            alpha: 0.01,
            probe: ProbeSettings {
                head: HeadKind::Linear,
                hidden: 16,
                epochs: 20,
                lr: 1e-2,
                encoder_lr_scale: 0.1,
                batch_size: 32,
                n_train: 300,
                n_test: 300,
                seeds: 5,
                pretrain_method: Method::AdaptiveFedSam,
                pretrain_rounds: 8,
            },
            cost: CostSettings {
                params: stats::REFERENCE_PARAMS,
                bytes_per_param: 4.0,
                rounds: stats::REFERENCE_ROUNDS,
                clients: stats::REFERENCE_CLIENTS,
            },
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse()
            .map_err(|_| format!("expected a non-negative integer, got {s:?}"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse()
            .map_err(|_| format!("expected a non-negative integer, got {s:?}"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse()
            .map_err(|_| format!("expected a number, got {s:?}"))
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("expected true or false, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("endo700k") {
            return Ok(endo700k_fractions().fractions);
        }
        s.split(',').map(|p| f64::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter()
            .map(|v| v.render())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl ConfigValue for Vec<Method> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Method::TABLE.to_vec());
        }
        s.split(',')
            .map(|p| Method::parse(p).ok_or_else(|| format!("unknown method {:?}", p.trim())))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    }
}

impl ConfigValue for Method {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Method::parse(s).ok_or_else(|| format!("unknown method {s:?}"))
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

macro_rules! enum_value {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl ConfigValue for $ty {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(format!("expected one of {}, got {s:?}", [$($name),+].join("|"))),
                }
            }
            fn render(&self) -> String {
                $(if *self == $variant { return $name.into(); })+
                unreachable!()
            }
        }
    };
}

enum_value!(PartitionMode { "fractions" => PartitionMode::Fractions, "dirichlet" => PartitionMode::Dirichlet });
enum_value!(Precision { "f32" => Precision::F32, "f64" => Precision::F64 });
enum_value!(InnerOptimizer { "sgd" => InnerOptimizer::Sgd, "momentum" => InnerOptimizer::Momentum, "adamw" => InnerOptimizer::Adamw });
enum_value!(CycleShape { "linear" => CycleShape::Linear, "constant" => CycleShape::Constant });
enum_value!(MedianMode { "median" => MedianMode::Median, "trimmed-mean" => MedianMode::TrimmedMean });
enum_value!(Reduction { "mean" => Reduction::Mean, "max" => Reduction::Max });
enum_value!(HeadKind { "linear" => HeadKind::Linear, "two-layer" => HeadKind::TwoLayer });

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)+) => {
        /// Every accepted key, in echo order.
        pub const CONFIG_KEYS: &[&str] = &[$($key),+];

        fn render_entries(c: &ExperimentConfig) -> Vec<(&'static str, String)> {
            vec![$(($key, ConfigValue::render(&c.$($field).+))),+]
        }

        fn set_entry(c: &mut ExperimentConfig, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
            match key {
                $($key => Some(ConfigValue::parse_value(value).map(|v| c.$($field).+ = v)),)+
                _ => None,
            }
        }
    };
}

config_keys! {
    "seed" => seed;
    "out" => out;
    "reps" => reps;
    "methods" => methods;
    "corpus.n_images" => corpus.n_images;
    "corpus.image_size" => corpus.image_size;
    "corpus.channels" => corpus.channels;
    "corpus.families" => corpus.families;
    "corpus.seed" => corpus.seed;
    "partition.mode" => partition.mode;
    "partition.fractions" => partition.fractions;
    "partition.alpha" => partition.alpha;
    "partition.clients" => partition.clients;
    "partition.silo_by_family" => partition.silo_by_family;
    "partition.domain_shift" => domain_shift;
    "model.patch_size" => arch.patch_size;
    "model.encoder_dim" => arch.encoder_dim;
    "model.encoder_depth" => arch.encoder_depth;
    "model.decoder_dim" => arch.decoder_dim;
    "model.decoder_depth" => arch.decoder_depth;
    "model.heads" => arch.heads;
    "model.mlp_ratio" => arch.mlp_ratio;
    "model.mask_ratio" => arch.mask_ratio;
    "model.norm_target" => arch.norm_target;
    "fed.rounds" => fed.rounds;
    "fed.client_fraction" => fed.client_fraction;
    "fed.local_epochs" => fed.local_epochs;
    "fed.batch_size" => fed.batch_size;
    "fed.inner" => fed.inner;
    "fed.min_completion_fraction" => fed.min_completion_fraction;
    "fed.max_retries" => fed.max_retries;
    "fed.failure_prob" => fed.failure_prob;
    "fed.precision" => fed.precision;
    "lr.gamma1" => fed.lr.gamma1;
    "lr.gamma2" => fed.lr.gamma2;
    "lr.cycle" => fed.lr.cycle;
    "lr.swa_start_fraction" => fed.lr.swa_start_fraction;
    "lr.shape" => fed.lr.shape;
    "swa.enabled" => fed.swa;
    "sam.rho" => sam.rho;
    "sam.eta" => sam.eta;
    "sam.adaptive" => sam.adaptive;
    "strategy.q" => fed.params.q;
    "strategy.q_lipschitz" => fed.params.q_lipschitz;
    "strategy.server_momentum" => fed.params.server_momentum;
    "strategy.avgm_server_lr" => fed.params.avgm_server_lr;
    "strategy.adam_beta1" => fed.params.adam_beta1;
    "strategy.adam_beta2" => fed.params.adam_beta2;
    "strategy.adam_tau" => fed.params.adam_tau;
    "strategy.adam_server_lr" => fed.params.adam_server_lr;
    "strategy.median_mode" => fed.params.median_mode;
    "strategy.trim_fraction" => fed.params.trim_fraction;
    "strategy.krum_f" => fed.params.krum_f;
    "eval.size" => eval_size;
    "eval.mask_seed" => eval_mask_seed;
    "eval.thresholds" => thresholds;
    "eval.reduction" => reduction;
    "eval.alpha" => alpha;
    "probe.head" => probe.head;
    "probe.hidden" => probe.hidden;
    "probe.epochs" => probe.epochs;
    "probe.lr" => probe.lr;
    "probe.encoder_lr_scale" => probe.encoder_lr_scale;
    "probe.batch_size" => probe.batch_size;
    "probe.n_train" => probe.n_train;
    "probe.n_test" => probe.n_test;
    "probe.seeds" => probe.seeds;
    "probe.pretrain_method" => probe.pretrain_method;
    "probe.pretrain_rounds" => probe.pretrain_rounds;
    "cost.params" => cost.params;
    "cost.bytes_per_param" => cost.bytes_per_param;
    "cost.rounds" => cost.rounds;
    "cost.clients" => cost.clients;
}

impl ExperimentConfig {
    /// Parses config text over the defaults; all problems are reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut errors = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`", no + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                errors.push(format!("line {}: duplicate key {k}", no + 1));
                continue;
            }
            match set_entry(&mut cfg, k, v) {
                None => errors.push(format!("line {}: unknown key {k}", no + 1)),
                Some(Err(e)) => errors.push(format!("line {}: {k}: {e}", no + 1)),
                Some(Ok(())) => {}
            }
        }
        cfg.sync();
        errors.extend(cfg.problems());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ExperimentError::Config(errors))
        }
    }

    /// Sets one config key as if it appeared in the file, then revalidates.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut errors = match set_entry(self, key, value) {
            None => vec![format!("unknown key {key}")],
            Some(Err(e)) => vec![format!("{key}: {e}")],
            Some(Ok(())) => Vec::new(),
        };
        self.sync();
        errors.extend(self.problems());
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ExperimentError::Config(errors))
        }
    }

    /// Propagates values that live in more than one place.
    fn sync(&mut self) {
        self.arch.image_size = self.corpus.image_size;
        self.arch.channels = self.corpus.channels;
        self.fed.lr.total_rounds = self.fed.rounds;
        self.partition.domain_shift = if self.domain_shift {
            default_domain_shifts()
        } else {
            Vec::new()
        };
    }

    /// Every violated invariant, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(errs) = self.arch.validate() {
            p.extend(errs.into_iter().map(|e| format!("model: {e}")));
        }
        p.extend(self.fed.problems());
        if let Err(e) = self.partition.validate() {
            p.push(format!("partition: {e}"));
        }
        if let Err(e) = self.sam.validate() {
            p.push(format!("sam: {e}"));
        }
        if self.reps < 1 {
            p.push("reps must be >= 1".into());
        }
        if self.methods.is_empty() {
            p.push("methods must list at least one method".into());
        }
        if self.corpus.n_images == 0 {
            p.push("corpus.n_images must be > 0".into());
        }
        if self.corpus.families == 0 {
            p.push("corpus.families must be > 0".into());
        }
        if !(self.corpus.channels == 1 || self.corpus.channels == 3) {
            p.push(format!(
                "corpus.channels must be 1 or 3, got {}",
                self.corpus.channels
            ));
        }
        if self.eval_size == 0 {
            p.push("eval.size must be > 0".into());
        }
        if let Err(e) = mae::check_thresholds(&self.thresholds) {
            p.push(format!("eval.thresholds: {e}"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            p.push(format!("eval.alpha {} outside (0, 1)", self.alpha));
        }
        let pr = &self.probe;
        if pr.epochs == 0
            || pr.batch_size == 0
            || pr.n_train == 0
            || pr.n_test == 0
            || pr.seeds == 0
        {
            p.push("probe.epochs, batch_size, n_train, n_test and seeds must be > 0".into());
        }
        if !(pr.lr > 0.0) || !(pr.encoder_lr_scale >= 0.0) {
            p.push("probe.lr must be > 0 and probe.encoder_lr_scale >= 0".into());
        }
        if pr.pretrain_rounds == 0 {
            p.push("probe.pretrain_rounds must be > 0".into());
        }
        let c = &self.cost;
        if !(c.params > 0.0 && c.bytes_per_param > 0.0) || c.rounds == 0 || c.clients == 0 {
            p.push("cost.params, bytes_per_param, rounds and clients must be positive".into());
        }
        p
    }

    /// Canonical text form; parsing it yields this config again.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, v) in render_entries(self) {
            let s = k.split_once('.').map(|(s, _)| s).unwrap_or("");
            if s != section && !out.is_empty() {
                out.push('\n');
            }
            section = s;
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn n_clients(&self) -> usize {
        self.partition.n_clients()
    }
}

/// Reads, validates and echoes a config into `out_dir` (the config's own
/// `out` when `None`).
pub fn load_config(path: &Path, out_dir: Option<&Path>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let cfg = ExperimentConfig::parse(&text)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.out));
    write_file(&dir.join(ECHO_FILE), cfg.echo().as_bytes())?;
    Ok(cfg)
}

pub fn write_echo(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    write_file(&out_dir.join(ECHO_FILE), cfg.echo().as_bytes())
}

pub const ECHO_FILE: &str = "config.echo.txt";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const COST_FILE: &str = "cost.json";
pub const PROBE_FILE: &str = "probe.csv";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

const TAG_REP: u64 = 11;

/// Seed shared by every method within one replication.
pub fn rep_seed(master: u64, rep: usize) -> u64 {
    derive_seed(master, TAG_REP, rep as u64, 0)
}

/// Data, held-out set and initial weights shared by all methods of one
/// replication.
#[derive(Debug, Clone)]
pub struct Setup {
    pub rep: usize,
    pub seed: u64,
    pub sets: Vec<Vec<usize>>,
    pub clients: Vec<ClientData>,
    pub eval: EvalSet,
    pub init: WeightVector,
}

impl Setup {
    pub fn pooled(&self) -> ClientData {
        ClientData {
            id: 0,
            images: self
                .clients
                .iter()
                .flat_map(|c| c.images.iter().cloned())
                .collect(),
        }
    }

    pub fn total_examples(&self) -> usize {
        self.clients.iter().map(|c| c.images.len()).sum()
    }
}

/// Held-out generator images past the training range, shifted round-robin
/// through the client sites.
pub fn eval_images(cfg: &ExperimentConfig) -> Vec<Image> {
    let k = cfg.n_clients().max(1);
    (0..cfg.eval_size)
        .map(|i| {
            let (img, _) = partition::generate_image(&cfg.corpus, cfg.corpus.n_images + i);
            apply_domain_shift(&img, &cfg.partition.shift_for(i % k))
        })
        .collect()
}

pub fn prepare(cfg: &ExperimentConfig, corpus: &SyntheticCorpus, rep: usize) -> Result<Setup> {
    let seed = rep_seed(cfg.seed, rep);
    let sets = partition::partition(corpus, &cfg.partition, seed)?;
    let clients = sets
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let shift = cfg.partition.shift_for(k);
            ClientData {
                id: k,
                images: idx
                    .iter()
                    .map(|&i| apply_domain_shift(&corpus.images[i], &shift))
                    .collect(),
            }
        })
        .collect();
    Ok(Setup {
        rep,
        seed,
        sets,
        clients,
        eval: EvalSet {
            images: eval_images(cfg),
            mask_seed: cfg.eval_mask_seed,
            thresholds: cfg.thresholds.clone(),
            reduction: cfg.reduction,
        },
        init: mae::init_params(&cfg.arch, seed),
    })
}

/// Federated settings for `method`; every method shares the base values.
pub fn fed_config_for(cfg: &ExperimentConfig, method: Method, seed: u64) -> FedConfig {
    let mut fed = cfg.fed.clone();
    fed.seed = seed;
    fed.lr.total_rounds = fed.rounds;
    match method {
        Method::Centralized => {
            fed.strategy = Strategy::FedAvg;
            fed.sam = None;
            fed.client_fraction = 1.0;
            fed.failure_prob = 0.0;
        }
        Method::AdaptiveFedSam => {
            fed.strategy = Strategy::FedAvg;
            fed.sam = Some(cfg.sam);
        }
        Method::Fed(s) => {
            fed.strategy = s;
            fed.sam = None;
        }
    }
    fed
}

pub fn run_method(cfg: &ExperimentConfig, setup: &Setup, method: Method) -> Result<TrainingResult> {
    let fed = fed_config_for(cfg, method, setup.seed);
    let result = match method {
        Method::Centralized => federation::run_federated_training(
            &fed,
            &cfg.arch,
            &[setup.pooled()],
            setup.init.clone(),
            Some(&setup.eval),
        )?,
        _ => federation::run_federated_training(
            &fed,
            &cfg.arch,
            &setup.clients,
            setup.init.clone(),
            Some(&setup.eval),
        )?,
    };
    Ok(result)
}

/// Trains on the pooled union of every client's data with the federated
/// round structure and step budget.
pub fn run_centralized(
    cfg: &ExperimentConfig,
    rep: usize,
) -> Result<(TrainingResult, EvalSummary)> {
    let corpus = SyntheticCorpus::generate(&cfg.corpus);
    let setup = prepare(cfg, &corpus, rep)?;
    let r = run_method(cfg, &setup, Method::Centralized)?;
    let eval = federation::evaluate(&r.final_weights, &cfg.arch, &setup.eval)?;
    Ok((r, eval))
}

/// One method in one replication.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub method: Method,
    pub rep: usize,
    pub outcome: std::result::Result<RunOutput, String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub training: TrainingResult,
    pub final_eval: EvalSummary,
    pub swa_eval: Option<EvalSummary>,
}

impl RunArtifact {
    pub fn final_count(&self, threshold_index: usize, reduction: Reduction) -> Option<f64> {
        self.outcome
            .as_ref()
            .ok()
            .map(|o| o.final_eval.counts.reduced(reduction)[threshold_index])
    }

    pub fn swa_count(&self, threshold_index: usize, reduction: Reduction) -> Option<f64> {
        self.outcome
            .as_ref()
            .ok()
            .and_then(|o| o.swa_eval.as_ref())
            .map(|e| e.counts.reduced(reduction)[threshold_index])
    }
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub thresholds: Vec<f64>,
    pub reduction: Reduction,
    pub runs: Vec<RunArtifact>,
    pub setups: Vec<Setup>,
}

impl Ablation {
    pub fn get(&self, method: Method, rep: usize) -> Option<&RunArtifact> {
        self.runs
            .iter()
            .find(|r| r.method == method && r.rep == rep)
    }
}

fn run_one(cfg: &ExperimentConfig, setup: &Setup, method: Method) -> RunArtifact {
    let outcome = run_method(cfg, setup, method).and_then(|training| {
        let final_eval = federation::evaluate(&training.final_weights, &cfg.arch, &setup.eval)?;
        let swa_eval = match &training.swa_weights {
            Some(w) => Some(federation::evaluate(w, &cfg.arch, &setup.eval)?),
            None => None,
        };
        Ok(RunOutput {
            training,
            final_eval,
            swa_eval,
        })
    });
    RunArtifact {
        method,
        rep: setup.rep,
        outcome: outcome.map_err(|e| e.to_string()),
    }
}

/// Every method for every replication; failed runs are recorded, not fatal.
pub fn run_ablation(cfg: &ExperimentConfig, methods: &[Method]) -> Result<Ablation> {
    if methods.len() < 2 {
        return Err(ExperimentError::Config(vec![
            "ablation needs at least two methods".into(),
        ]));
    }
    let corpus = SyntheticCorpus::generate(&cfg.corpus);
    let mut runs = Vec::new();
    let mut setups = Vec::new();
    for rep in 0..cfg.reps {
        let setup = prepare(cfg, &corpus, rep)?;
        for &m in methods {
            runs.push(run_one(cfg, &setup, m));
        }
        setups.push(setup);
    }
    Ok(Ablation {
        thresholds: cfg.thresholds.clone(),
        reduction: cfg.reduction,
        runs,
        setups,
    })
}

fn fmt_count(x: f64, r: Reduction) -> String {
    match r {
        Reduction::Mean => format!("{x:.3}"),
        Reduction::Max => format!("{x:.0}"),
    }
}

pub fn ablation_header(thresholds: &[f64]) -> String {
    let mut h = String::from("method,rep,status,final_masked_mse");
    for t in thresholds {
        let _ = write!(h, ",final_thre_{t}");
    }
    h.push_str(",swa_masked_mse");
    for t in thresholds {
        let _ = write!(h, ",swa_thre_{t}");
    }
    h.push_str(",optimizer_steps,grad_evals,total_bytes");
    h
}

/// Header plus one row per run.
pub fn ablation_csv(thresholds: &[f64], reduction: Reduction, runs: &[RunArtifact]) -> String {
    let mut out = ablation_header(thresholds);
    out.push('\n');
    let blank = |n: usize| vec![String::new(); n].join(",");
    for r in runs {
        match &r.outcome {
            Ok(o) => {
                let fin: Vec<String> = o
                    .final_eval
                    .counts
                    .reduced(reduction)
                    .iter()
                    .map(|c| fmt_count(*c, reduction))
                    .collect();
                let (swa_mse, swa) = match &o.swa_eval {
                    Some(e) => (
                        format!("{:.6}", e.masked_mse),
                        e.counts
                            .reduced(reduction)
                            .iter()
                            .map(|c| fmt_count(*c, reduction))
                            .collect::<Vec<_>>()
                            .join(","),
                    ),
                    None => (String::new(), blank(thresholds.len())),
                };
                let bytes = o
                    .training
                    .rounds
                    .last()
                    .map(|x| x.cumulative_bytes)
                    .unwrap_or(0);
                let _ = writeln!(
                    out,
                    "{},{},ok,{:.6},{},{},{},{},{},{}",
                    r.method.name(),
                    r.rep,
                    o.final_eval.masked_mse,
                    fin.join(","),
                    swa_mse,
                    swa,
                    o.training.optimizer_steps(),
                    o.training.grad_evals(),
                    bytes
                );
            }
            Err(msg) => {
                let reason = msg.replace([',', '\n'], ";");
                let _ = writeln!(
                    out,
                    "{},{},failed: {},,{},,{},,,",
                    r.method.name(),
                    r.rep,
                    reason,
                    blank(thresholds.len()),
                    blank(thresholds.len())
                );
            }
        }
    }
    out
}

fn checkpoint_bytes(arch: &MaeArchitecture, params: &[f64]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    mae::write_checkpoint(&mut buf, arch, params)?;
    Ok(buf)
}

/// Cost of exchanging the desk model, alongside the configured reference model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostSummary {
    pub desk_model: CostReport,
    pub reference_model: CostReport,
    pub macs: stats::MacsReport,
    /// Gradient evaluations per method, summed over replications; the extra
    /// sharpness-aware pass shows up here and not in optimizer steps.
    pub grad_evals: Vec<(String, usize)>,
    pub optimizer_steps: Vec<(String, usize)>,
}

pub fn cost_summary(cfg: &ExperimentConfig, runs: &[RunArtifact]) -> Result<CostSummary> {
    let clients_per_round =
        ((cfg.fed.client_fraction * cfg.n_clients() as f64).ceil() as usize).max(1);
    let desk = stats::comm_cost(
        mae::count_params(&cfg.arch) as f64,
        cfg.fed.precision.bytes() as f64,
        cfg.fed.rounds,
        clients_per_round,
    )?;
    let reference = stats::comm_cost(
        cfg.cost.params,
        cfg.cost.bytes_per_param,
        cfg.cost.rounds,
        cfg.cost.clients,
    )?;
    let macs = stats::macs_report(
        &partition::ENDO700K_CLIENTS,
        &partition::ENDO700K_COUNTS,
        stats::endo700k_macs_per_image(),
    );
    let mut grad_evals: Vec<(String, usize)> = Vec::new();
    let mut steps: Vec<(String, usize)> = Vec::new();
    for r in runs {
        if let Ok(o) = &r.outcome {
            let name = r.method.name().to_string();
            match grad_evals.iter_mut().find(|(n, _)| *n == name) {
                Some(e) => e.1 += o.training.grad_evals(),
                None => grad_evals.push((name.clone(), o.training.grad_evals())),
            }
            match steps.iter_mut().find(|(n, _)| *n == name) {
                Some(e) => e.1 += o.training.optimizer_steps(),
                None => steps.push((name, o.training.optimizer_steps())),
            }
        }
    }
    Ok(CostSummary {
        desk_model: desk,
        reference_model: reference,
        macs,
        grad_evals,
        optimizer_steps: steps,
    })
}

/// Paired image-level tests at the 0.05-style threshold (third entry, or the
/// last when fewer are configured) for the headline method pairs.
pub fn ablation_comparisons(
    cfg: &ExperimentConfig,
    ab: &Ablation,
) -> Result<Vec<(String, ComparisonReport)>> {
    let t = cfg.thresholds[2.min(cfg.thresholds.len() - 1)];
    let pairs = [
        (Method::AdaptiveFedSam, Method::Fed(Strategy::FedAvg)),
        (Method::Centralized, Method::AdaptiveFedSam),
    ];
    let mut out = Vec::new();
    for setup in &ab.setups {
        for (a, b) in pairs {
            let (Some(ra), Some(rb)) = (ab.get(a, setup.rep), ab.get(b, setup.rep)) else {
                continue;
            };
            let (Ok(oa), Ok(ob)) = (&ra.outcome, &rb.outcome) else {
                continue;
            };
            let rep = stats::compare_models_paired(
                &oa.training.final_weights,
                &ob.training.final_weights,
                &cfg.arch,
                &setup.eval.images,
                setup.eval.mask_seed,
                UnitMetric::PatchesBelow(t),
                None,
                cfg.alpha,
            )?;
            out.push((
                format!("{}_vs_{}_rep{}", a.name(), b.name(), setup.rep),
                rep,
            ));
        }
    }
    Ok(out)
}

/// Writes the sweep's output tree:
///
/// ```text
/// ablation.csv
/// comparison.json
/// cost.json
/// partition/rep<r>.json
/// runs/<method>/rep<r>/{round_log.csv, final.ckpt, swa.ckpt}
/// ```
pub fn emit_reports(cfg: &ExperimentConfig, ab: &Ablation, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(
        &out.join(ABLATION_FILE),
        ablation_csv(&ab.thresholds, ab.reduction, &ab.runs).as_bytes(),
    )?;
    for s in &ab.setups {
        write_file(
            &out.join("partition").join(format!("rep{}.json", s.rep)),
            PartitionManifest::new(&s.sets).to_json().as_bytes(),
        )?;
    }
    for r in &ab.runs {
        let dir = out
            .join("runs")
            .join(r.method.name())
            .join(format!("rep{}", r.rep));
        if let Ok(o) = &r.outcome {
            write_file(
                &dir.join("round_log.csv"),
                federation::round_log_csv(&o.training.rounds, ab.reduction).as_bytes(),
            )?;
            write_file(
                &dir.join("final.ckpt"),
                &checkpoint_bytes(&cfg.arch, &o.training.final_weights)?,
            )?;
            if let Some(w) = &o.training.swa_weights {
                write_file(&dir.join("swa.ckpt"), &checkpoint_bytes(&cfg.arch, w)?)?;
            }
        }
    }
    let comparisons: serde_json::Map<String, serde_json::Value> = ablation_comparisons(cfg, ab)?
        .into_iter()
        .map(|(k, v)| (k, serde_json::to_value(v).expect("report serializes")))
        .collect();
    write_file(
        &out.join(COMPARISON_FILE),
        serde_json::to_string_pretty(&comparisons)
            .expect("json")
            .as_bytes(),
    )?;
    let cost = cost_summary(cfg, &ab.runs)?;
    write_file(
        &out.join(COST_FILE),
        serde_json::to_string_pretty(&cost)
            .expect("json")
            .as_bytes(),
    )?;
    Ok(())
}

/// Pretrains an encoder per the probe settings, then runs full and frozen
/// probes for each seed.
pub fn run_probes(cfg: &ExperimentConfig, model: Option<&[f64]>) -> Result<Vec<ProbeReport>> {
    let pretrained;
    let weights = match model {
        Some(w) => w,
        None => {
            let mut pc = cfg.clone();
            pc.fed.rounds = cfg.probe.pretrain_rounds;
            pc.fed.lr.total_rounds = pc.fed.rounds;
            let corpus = SyntheticCorpus::generate(&pc.corpus);
            let setup = prepare(&pc, &corpus, 0)?;
            let fed = fed_config_for(&pc, cfg.probe.pretrain_method, setup.seed);
            let clients = match cfg.probe.pretrain_method {
                Method::Centralized => vec![setup.pooled()],
                _ => setup.clients.clone(),
            };
            pretrained = federation::run_federated_training(
                &fed,
                &pc.arch,
                &clients,
                setup.init.clone(),
                None,
            )?
            .final_weights;
            &pretrained[..]
        }
    };
    let shifts = cfg.partition.domain_shift.clone();
    let base = cfg.corpus.n_images + cfg.eval_size;
    let mut reports = Vec::new();
    for s in 0..cfg.probe.seeds {
        let seed = derive_seed(cfg.seed, 21, s as u64, 0);
        let offset = base + s * (cfg.probe.n_train + cfg.probe.n_test);
        let train = probe::synthetic_task(&cfg.corpus, offset, cfg.probe.n_train, &shifts, seed);
        let test = probe::synthetic_task(
            &cfg.corpus,
            offset + cfg.probe.n_train,
            cfg.probe.n_test,
            &shifts,
            seed ^ 1,
        );
        for mode in [ProbeMode::Full, ProbeMode::Frozen] {
            let pcfg = ProbeConfig {
                mode,
                head: cfg.probe.head,
                hidden: cfg.probe.hidden,
                epochs: cfg.probe.epochs,
                lr: cfg.probe.lr,
                encoder_lr_scale: cfg.probe.encoder_lr_scale,
                batch_size: cfg.probe.batch_size,
                seed,
            };
            reports.push(probe::run_probe(weights, &cfg.arch, &pcfg, &train, &test)?);
        }
    }
    Ok(reports)
}

pub fn emit_probe_reports(reports: &[ProbeReport], out: &Path) -> Result<()> {
    write_file(&out.join(PROBE_FILE), probe::probe_csv(reports).as_bytes())
}

pub fn write_cost_report(cfg: &ExperimentConfig, out: &Path) -> Result<CostSummary> {
    let summary = cost_summary(cfg, &[])?;
    write_file(
        &out.join(COST_FILE),
        serde_json::to_string_pretty(&summary)
            .expect("json")
            .as_bytes(),
    )?;
    Ok(summary)
}

pub fn write_comparison(report: &ComparisonReport, out: &Path) -> Result<()> {
    write_file(&out.join(COMPARISON_FILE), report.to_json().as_bytes())
}

pub fn write_training(cfg: &ExperimentConfig, result: &TrainingResult, out: &Path) -> Result<()> {
    write_file(
        &out.join("round_log.csv"),
        federation::round_log_csv(&result.rounds, cfg.reduction).as_bytes(),
    )?;
    write_file(
        &out.join("final.ckpt"),
        &checkpoint_bytes(&cfg.arch, &result.final_weights)?,
    )?;
    if let Some(w) = &result.swa_weights {
        write_file(&out.join("swa.ckpt"), &checkpoint_bytes(&cfg.arch, w)?)?;
    }
    Ok(())
}

pub fn read_model(path: &Path) -> Result<(MaeArchitecture, WeightVector)> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    Ok(mae::read_checkpoint(std::io::BufReader::new(f))?)
}
