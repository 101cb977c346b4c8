//! Synchronous federated training: client sampling, local (optionally
//! sharpness-aware) training, failure-tolerant collection, server
//! aggregation and server-side weight averaging.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mae::{self, Image, MaeArchitecture, MaeError, MaskSet, Reduction};
use crate::optim::{sam_step, InnerOptimizer, LrSchedule, OptimError, SamConfig};
use crate::tensor::Precision;
use crate::weights::{l2_norm, WeightVector};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("no completed client updates to aggregate")]
    NoUpdates,
    #[error("update from client {client} has {got} weights, expected {expected}")]
    Misaligned {
        client: usize,
        expected: usize,
        got: usize,
    },
    #[error("krum needs n >= 2f + 3 updates (n = {n}, f = {f})")]
    KrumTooFew { n: usize, f: usize },
    #[error("trim fraction {0} removes every value")]
    TrimAll(f64),
    #[error(
        "round {round} aborted after {attempts} attempts: {completed}/{expected} clients completed"
    )]
    RoundAborted {
        round: usize,
        attempts: usize,
        completed: usize,
        expected: usize,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("client dataset {0} is empty")]
    EmptyDataset(usize),
    #[error(transparent)]
    Model(#[from] MaeError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

pub type Result<T> = std::result::Result<T, FedError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    FedAvg,
    FedAvgM,
    FedAdam,
    FedMedian,
    QFedAvg,
    Krum,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::FedAvg,
        Strategy::FedAvgM,
        Strategy::FedAdam,
        Strategy::FedMedian,
        Strategy::QFedAvg,
        Strategy::Krum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedAvgM => "fedavgm",
            Strategy::FedAdam => "fedadam",
            Strategy::FedMedian => "fedmedian",
            Strategy::QFedAvg => "qfedavg",
            Strategy::Krum => "krum",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MedianMode {
    Median,
    TrimmedMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyParams {
    /// QFedAvg fairness exponent.
    pub q: f64,
    /// QFedAvg Lipschitz constant L.
    pub q_lipschitz: f64,
    pub server_momentum: f64,
    pub avgm_server_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_tau: f64,
    pub adam_server_lr: f64,
    pub median_mode: MedianMode,
    pub trim_fraction: f64,
    pub krum_f: usize,
}

impl Default for StrategyParams {
    fn default() -> Self {
        StrategyParams {
            q: 2.0,
            q_lipschitz: 1.0,
            server_momentum: 0.5,
            avgm_server_lr: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_tau: 1e-2,
            adam_server_lr: 0.1,
            median_mode: MedianMode::Median,
            trim_fraction: 0.0,
            krum_f: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    pub client_fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub sam: Option<SamConfig>,
    pub inner: InnerOptimizer,
    pub strategy: Strategy,
    pub params: StrategyParams,
    pub swa: bool,
    pub min_completion_fraction: f64,
    /// Extra attempts with a fresh client sample before a round fails.
    pub max_retries: usize,
    /// Probability that a sampled client drops out of a round.
    pub failure_prob: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 40,
            client_fraction: 1.0,
            local_epochs: 1,
            batch_size: 32,
            lr: LrSchedule {
                gamma1: 3e-3,
                gamma2: 3e-4,
                total_rounds: 40,
                cycle: 2,
                swa_start_fraction: 0.75,
                shape: crate::optim::CycleShape::Linear,
            },
            sam: None,
            inner: InnerOptimizer::Sgd,
            strategy: Strategy::FedAvg,
            params: StrategyParams::default(),
            swa: true,
            min_completion_fraction: 0.5,
            max_retries: 3,
            failure_prob: 0.0,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl FedConfig {
    /// Every violated constraint, as messages.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.rounds < 1 {
            p.push("fed.rounds must be >= 1".into());
        }
        if self.local_epochs < 1 {
            p.push("fed.local_epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            p.push("fed.batch_size must be >= 1".into());
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            p.push(format!(
                "fed.client_fraction {} outside (0, 1]",
                self.client_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.min_completion_fraction) {
            p.push(format!(
                "fed.min_completion_fraction {} outside [0, 1]",
                self.min_completion_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.failure_prob) {
            p.push(format!(
                "fed.failure_prob {} outside [0, 1)",
                self.failure_prob
            ));
        }
        if let Err(e) = self.lr.validate() {
            p.push(format!("lr: {e}"));
        }
        if self.lr.total_rounds != self.rounds {
            p.push("lr.total_rounds must equal fed.rounds".into());
        }
        if let Some(s) = &self.sam {
            if let Err(e) = s.validate() {
                p.push(format!("sam: {e}"));
            }
        }
        let sp = &self.params;
        if !(0.0..0.5).contains(&sp.trim_fraction) {
            p.push(format!(
                "strategy.trim_fraction {} outside [0, 0.5)",
                sp.trim_fraction
            ));
        }
        if sp.q < 0.0 {
            p.push("strategy.q must be >= 0".into());
        }
        if !(sp.q_lipschitz > 0.0) {
            p.push("strategy.q_lipschitz must be > 0".into());
        }
        p
    }
}

/// A client's reply for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub weights: WeightVector,
    pub num_examples: usize,
    /// Mean training loss over the final local epoch.
    pub local_loss: f64,
    pub completed: bool,
    #[serde(default)]
    pub grad_evals: usize,
    #[serde(default)]
    pub steps: usize,
}

fn sorted_by_id(updates: &[ClientUpdate]) -> Vec<&ClientUpdate> {
    let mut v: Vec<&ClientUpdate> = updates.iter().collect();
    v.sort_by_key(|u| u.client_id);
    v
}

fn check_aligned(updates: &[&ClientUpdate]) -> Result<usize> {
    let first = updates.first().ok_or(FedError::NoUpdates)?;
    let d = first.weights.len();
    for u in updates {
        if u.weights.len() != d {
            return Err(FedError::Misaligned {
                client: u.client_id,
                expected: d,
                got: u.weights.len(),
            });
        }
    }
    Ok(d)
}

/// Example-count weighted mean of the updates' weights.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<WeightVector> {
    let ups = sorted_by_id(updates);
    let d = check_aligned(&ups)?;
    let total: usize = ups.iter().map(|u| u.num_examples).sum();
    if total == 0 {
        return Err(FedError::NoUpdates);
    }
    let mut out = vec![0.0; d];
    for u in &ups {
        let w = u.num_examples as f64 / total as f64;
        for (o, x) in out.iter_mut().zip(u.weights.iter()) {
            *o += w * x;
        }
    }
    Ok(WeightVector::new(out))
}

/// Server momentum on the pseudo-gradient `theta - fedavg(updates)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub beta: f64,
    pub server_lr: f64,
    pub velocity: Vec<f64>,
}

pub fn aggregate_fedavgm(
    global: &[f64],
    updates: &[ClientUpdate],
    state: &mut MomentumState,
) -> Result<WeightVector> {
    let avg = aggregate_fedavg(updates)?;
    if avg.len() != global.len() || state.velocity.len() != global.len() {
        return Err(FedError::Misaligned {
            client: usize::MAX,
            expected: global.len(),
            got: avg.len(),
        });
    }
    let mut out = global.to_vec();
    for i in 0..out.len() {
        let delta = global[i] - avg[i];
        state.velocity[i] = state.beta * state.velocity[i] + delta;
        out[i] = global[i] - state.server_lr * state.velocity[i];
    }
    Ok(WeightVector::new(out))
}

/// Adaptive server optimizer on the pseudo-gradient `fedavg(updates) - theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerAdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub server_lr: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn aggregate_fedadam(
    global: &[f64],
    updates: &[ClientUpdate],
    state: &mut ServerAdamState,
) -> Result<WeightVector> {
    let avg = aggregate_fedavg(updates)?;
    if avg.len() != global.len() || state.m.len() != global.len() {
        return Err(FedError::Misaligned {
            client: usize::MAX,
            expected: global.len(),
            got: avg.len(),
        });
    }
    let mut out = global.to_vec();
    for i in 0..out.len() {
        let delta = avg[i] - global[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * delta;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * delta * delta;
        out[i] = global[i] + state.server_lr * state.m[i] / (state.v[i].sqrt() + state.tau);
    }
    Ok(WeightVector::new(out))
}

/// Coordinate-wise median, or mean after trimming `floor(trim * n)` values
/// from each end.
pub fn aggregate_median(
    updates: &[ClientUpdate],
    mode: MedianMode,
    trim_fraction: f64,
) -> Result<WeightVector> {
    let ups = sorted_by_id(updates);
    let d = check_aligned(&ups)?;
    let n = ups.len();
    let k = (trim_fraction * n as f64).floor() as usize;
    if mode == MedianMode::TrimmedMean && 2 * k >= n {
        return Err(FedError::TrimAll(trim_fraction));
    }
    let mut col = vec![0.0; n];
    let mut out = Vec::with_capacity(d);
    for i in 0..d {
        for (c, u) in col.iter_mut().zip(&ups) {
            *c = u.weights[i];
        }
        col.sort_by(f64::total_cmp);
        out.push(match mode {
            MedianMode::Median if n % 2 == 1 => col[n / 2],
            MedianMode::Median => 0.5 * (col[n / 2 - 1] + col[n / 2]),
            MedianMode::TrimmedMean => col[k..n - k].iter().sum::<f64>() / (n - 2 * k) as f64,
        });
    }
    Ok(WeightVector::new(out))
}

/// Outcome of q-fair aggregation; `fell_back` marks a zero denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct QFedOutcome {
    pub weights: WeightVector,
    pub fell_back: bool,
}

/// q-fair update: with `D_k = L (theta - theta_k)`,
/// `theta' = theta - sum F_k^q D_k / sum (q F_k^(q-1) |D_k|^2 + L F_k^q)`.
/// Clients with zero loss carry zero weight when q > 0.
pub fn aggregate_qfedavg(
    global: &[f64],
    updates: &[ClientUpdate],
    q: f64,
    lipschitz: f64,
) -> Result<QFedOutcome> {
    let ups = sorted_by_id(updates);
    let d = check_aligned(&ups)?;
    if d != global.len() {
        return Err(FedError::Misaligned {
            client: ups[0].client_id,
            expected: global.len(),
            got: d,
        });
    }
    let mut num = vec![0.0; d];
    let mut denom = 0.0;
    for u in &ups {
        let f = u.local_loss;
        let delta: Vec<f64> = global
            .iter()
            .zip(u.weights.iter())
            .map(|(g, w)| lipschitz * (g - w))
            .collect();
        let fq = if q == 0.0 { 1.0 } else { f.powf(q) };
        if fq == 0.0 {
            continue;
        }
        let dn = l2_norm(&delta);
        let curvature = if q == 0.0 {
            0.0
        } else {
            q * f.powf(q - 1.0) * dn * dn
        };
        denom += curvature + lipschitz * fq;
        for (a, b) in num.iter_mut().zip(&delta) {
            *a += fq * b;
        }
    }
    if !(denom > 0.0) || !denom.is_finite() {
        return Ok(QFedOutcome {
            weights: aggregate_fedavg(updates)?,
            fell_back: true,
        });
    }
    let out = global
        .iter()
        .zip(&num)
        .map(|(g, s)| g - s / denom)
        .collect();
    Ok(QFedOutcome {
        weights: WeightVector::new(out),
        fell_back: false,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Single-Krum: index (into the id-sorted updates) and weights of the update
/// whose summed squared distance to its `n - f - 2` nearest peers is smallest.
/// Ties go to the lowest client id.
pub fn krum_select(updates: &[ClientUpdate], f: usize) -> Result<(usize, WeightVector)> {
    let ups = sorted_by_id(updates);
    check_aligned(&ups)?;
    let n = ups.len();
    if n < 2 * f + 3 {
        return Err(FedError::KrumTooFew { n, f });
    }
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(&ups[i].weights, &ups[j].weights);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let m = n - f - 2;
    let mut best = (f64::INFINITY, 0);
    for i in 0..n {
        let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
        row.sort_by(f64::total_cmp);
        let score: f64 = row[..m].iter().sum();
        if score < best.0 {
            best = (score, i);
        }
    }
    Ok((ups[best.1].client_id, ups[best.1].weights.clone()))
}

pub fn aggregate_krum(updates: &[ClientUpdate], f: usize) -> Result<WeightVector> {
    Ok(krum_select(updates, f)?.1)
}

/// Running mean of absorbed checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct SwaState {
    pub theta: WeightVector,
    pub n_models: usize,
}

impl SwaState {
    pub fn empty(len: usize) -> Self {
        SwaState {
            theta: WeightVector::zeros(len),
            n_models: 0,
        }
    }

    /// Restarts the average from a single checkpoint.
    pub fn init(theta: &[f64]) -> Self {
        SwaState {
            theta: WeightVector::new(theta.to_vec()),
            n_models: 1,
        }
    }
}

/// `theta_swa <- (theta_swa * n + theta_new) / (n + 1)`.
pub fn swa_update(state: &mut SwaState, theta_new: &[f64]) -> Result<()> {
    if state.theta.len() != theta_new.len() {
        return Err(FedError::Misaligned {
            client: usize::MAX,
            expected: state.theta.len(),
            got: theta_new.len(),
        });
    }
    let n = state.n_models as f64;
    for (s, x) in state.theta.iter_mut().zip(theta_new) {
        *s = (*s * n + x) / (n + 1.0);
    }
    state.n_models += 1;
    Ok(())
}

/// Whether round `t` absorbs a checkpoint: averaging phase and `t mod c == 0`.
pub fn swa_round(schedule: &LrSchedule, t: usize) -> bool {
    schedule.in_swa_phase(t) && t.is_multiple_of(schedule.cycle.max(1))
}

/// SplitMix64 finalizer over a tagged tuple; the per-(round, client) stream
/// derivation that keeps runs independent of scheduling.
pub fn derive_seed(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z =
        master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ a.rotate_left(21) ^ b.rotate_left(42);
    for _ in 0..2 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const TAG_SAMPLE: u64 = 1;
const TAG_LOCAL: u64 = 2;
const TAG_FAIL: u64 = 3;

/// `max(1, ceil(C K))` distinct clients, sorted.
pub fn sample_clients(k: usize, fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let m = ((fraction * k as f64).ceil() as usize).clamp(1, k.max(1));
    if m >= k {
        return (0..k).collect();
    }
    let mut ids = index::sample(rng, k, m).into_vec();
    ids.sort_unstable();
    ids
}

/// Why a round cannot proceed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundAbort {
    pub completed: usize,
    pub expected: usize,
}

/// Keeps completed updates; the round proceeds when at least one completed
/// and `completed / expected >= min_completion_fraction`.
pub fn collect_with_failures(
    expected: &[usize],
    updates: Vec<ClientUpdate>,
    min_completion_fraction: f64,
) -> std::result::Result<Vec<ClientUpdate>, RoundAbort> {
    let accepted: Vec<ClientUpdate> = updates
        .into_iter()
        .filter(|u| u.completed && expected.contains(&u.client_id))
        .collect();
    let ratio = if expected.is_empty() {
        0.0
    } else {
        accepted.len() as f64 / expected.len() as f64
    };
    if accepted.is_empty() || ratio < min_completion_fraction {
        return Err(RoundAbort {
            completed: accepted.len(),
            expected: expected.len(),
        });
    }
    Ok(accepted)
}

/// One client's local data.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub id: usize,
    pub images: Vec<Image>,
}

/// Batch order and mask seeds for one client's local training in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPlan {
    /// `epochs[e][b]` lists dataset indices of batch `b` in epoch `e`.
    pub epochs: Vec<Vec<Vec<usize>>>,
    /// Mask seed for each image of each batch, same nesting.
    pub mask_seeds: Vec<Vec<Vec<u64>>>,
}

impl LocalPlan {
    pub fn new(n: usize, batch_size: usize, epochs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plan = LocalPlan {
            epochs: Vec::with_capacity(epochs),
            mask_seeds: Vec::with_capacity(epochs),
        };
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let batches: Vec<Vec<usize>> = order
                .chunks(batch_size.max(1))
                .map(|c| c.to_vec())
                .collect();
            let seeds = batches
                .iter()
                .map(|b| b.iter().map(|_| rng.random()).collect())
                .collect();
            plan.epochs.push(batches);
            plan.mask_seeds.push(seeds);
        }
        plan
    }
}

/// Trains from `global` for `E` epochs over the client's data. A non-finite
/// loss marks the update as not completed and returns the global weights.
pub fn local_train(
    global: &[f64],
    data: &ClientData,
    arch: &MaeArchitecture,
    cfg: &FedConfig,
    lr: f64,
    seed: u64,
) -> Result<ClientUpdate> {
    if data.images.is_empty() {
        return Err(FedError::EmptyDataset(data.id));
    }
    if cfg.local_epochs < 1 {
        return Err(FedError::Config("local_epochs must be >= 1".into()));
    }
    let plan = LocalPlan::new(data.images.len(), cfg.batch_size, cfg.local_epochs, seed);
    let mut params = global.to_vec();
    let mut opt = cfg.inner.build(params.len());
    let mut grad_evals = 0;
    let mut steps = 0;
    let mut last_epoch_loss = 0.0;
    let n = arch.n_patches();
    for (batches, seeds) in plan.epochs.iter().zip(&plan.mask_seeds) {
        let mut loss_sum = 0.0;
        for (batch, bseeds) in batches.iter().zip(seeds) {
            let imgs: Vec<&Image> = batch.iter().map(|&i| &data.images[i]).collect();
            let masks: Vec<MaskSet> = bseeds
                .iter()
                .map(|&s| mae::sample_mask(n, arch.mask_ratio, s))
                .collect::<std::result::Result<_, _>>()?;
            let mrefs: Vec<&MaskSet> = masks.iter().collect();
            let loss_fn = |p: &[f64]| {
                mae::loss_and_grad(p, arch, &imgs, &mrefs)
                    .map_err(|e| OptimError::Loss(e.to_string()))
            };
            match sam_step(&mut params, loss_fn, opt.as_mut(), cfg.sam.as_ref(), lr) {
                Ok(out) => {
                    grad_evals += out.grad_evals;
                    steps += 1;
                    loss_sum += out.loss * batch.len() as f64;
                }
                Err(_) => {
                    return Ok(ClientUpdate {
                        client_id: data.id,
                        weights: WeightVector::new(global.to_vec()),
                        num_examples: data.images.len(),
                        local_loss: f64::NAN,
                        completed: false,
                        grad_evals,
                        steps,
                    });
                }
            }
        }
        last_epoch_loss = loss_sum / data.images.len() as f64;
    }
    let completed = params.iter().all(|p| p.is_finite());
    Ok(ClientUpdate {
        client_id: data.id,
        weights: if completed {
            params.into()
        } else {
            global.to_vec().into()
        },
        num_examples: data.images.len(),
        local_loss: last_epoch_loss,
        completed,
        grad_evals,
        steps,
    })
}

/// Held-out images scored after every round.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub images: Vec<Image>,
    pub mask_seed: u64,
    pub thresholds: Vec<f64>,
    pub reduction: Reduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub masked_mse: f64,
    pub counts: mae::ThresholdCounts,
}

pub fn evaluate(params: &[f64], arch: &MaeArchitecture, eval: &EvalSet) -> Result<EvalSummary> {
    let (masked_mse, reports) = mae::evaluate(params, arch, &eval.images, eval.mask_seed, 64)?;
    let counts = mae::patches_below_thresholds(&reports, &eval.thresholds)?;
    Ok(EvalSummary { masked_mse, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub strategy: Strategy,
    pub lr: f64,
    pub sampled: Vec<usize>,
    pub completed: usize,
    pub attempts: usize,
    pub mean_local_loss: f64,
    pub eval: Option<EvalSummary>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub cumulative_bytes: u64,
    pub optimizer_steps: usize,
    pub grad_evals: usize,
    pub swa_absorbed: bool,
    pub qfed_fallback: bool,
    /// Seconds; not written to the round log.
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub final_weights: WeightVector,
    pub swa_weights: Option<WeightVector>,
    pub swa_models: usize,
    pub rounds: Vec<RoundRecord>,
}

impl TrainingResult {
    pub fn optimizer_steps(&self) -> usize {
        self.rounds.iter().map(|r| r.optimizer_steps).sum()
    }

    pub fn grad_evals(&self) -> usize {
        self.rounds.iter().map(|r| r.grad_evals).sum()
    }
}

enum ServerState {
    Stateless,
    Momentum(MomentumState),
    Adam(ServerAdamState),
}

fn server_state(cfg: &FedConfig, len: usize) -> ServerState {
    let p = &cfg.params;
    match cfg.strategy {
        Strategy::FedAvgM => ServerState::Momentum(MomentumState {
            beta: p.server_momentum,
            server_lr: p.avgm_server_lr,
            velocity: vec![0.0; len],
        }),
        Strategy::FedAdam => ServerState::Adam(ServerAdamState {
            beta1: p.adam_beta1,
            beta2: p.adam_beta2,
            tau: p.adam_tau,
            server_lr: p.adam_server_lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }),
        _ => ServerState::Stateless,
    }
}

/// Runs `cfg.rounds` rounds of sample / train / collect / aggregate, keeping
/// a weight average over the final rounds.
///
/// Before the averaging phase the average simply tracks the latest global
/// model, so it enters the phase holding the model the phase starts from.
pub fn run_federated_training(
    cfg: &FedConfig,
    arch: &MaeArchitecture,
    clients: &[ClientData],
    init: WeightVector,
    eval: Option<&EvalSet>,
) -> Result<TrainingResult> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(FedError::Config(problems.join("; ")));
    }
    if clients.is_empty() {
        return Err(FedError::Config("at least one client required".into()));
    }
    if let Some(c) = clients.iter().find(|c| c.images.is_empty()) {
        return Err(FedError::EmptyDataset(c.id));
    }
    let expected_len = mae::count_params(arch);
    if init.len() != expected_len {
        return Err(FedError::Model(MaeError::ParamCount {
            expected: expected_len,
            got: init.len(),
        }));
    }
    let k = clients.len();
    let bytes_per_client = (expected_len * cfg.precision.bytes()) as u64;
    let mut global = init;
    let mut swa = SwaState::init(&global);
    let mut server = server_state(cfg, expected_len);
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut cumulative = 0u64;

    for t in 0..cfg.rounds {
        let started = Instant::now();
        let lr = cfg.lr.lr_for_round(t)?;
        let mut attempts = 0;
        let mut bytes_up = 0;
        let mut bytes_down = 0;
        let (sampled, accepted, steps, evals) = loop {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                TAG_SAMPLE,
                t as u64,
                attempts as u64,
            ));
            let sampled = sample_clients(k, cfg.client_fraction, &mut rng);
            let mut updates = Vec::with_capacity(sampled.len());
            let (mut steps, mut evals) = (0, 0);
            for &c in &sampled {
                bytes_down += bytes_per_client;
                let data = &clients[c];
                if cfg.failure_prob > 0.0 {
                    let mut frng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        TAG_FAIL,
                        t as u64,
                        ((attempts as u64) << 32) | c as u64,
                    ));
                    if frng.random::<f64>() < cfg.failure_prob {
                        continue;
                    }
                }
                let seed = derive_seed(cfg.seed, TAG_LOCAL, t as u64, data.id as u64);
                let u = local_train(&global, data, arch, cfg, lr, seed)?;
                steps += u.steps;
                evals += u.grad_evals;
                if u.completed {
                    bytes_up += bytes_per_client;
                }
                updates.push(u);
            }
            attempts += 1;
            match collect_with_failures(&sampled, updates, cfg.min_completion_fraction) {
                Ok(acc) => break (sampled, acc, steps, evals),
                Err(abort) if attempts > cfg.max_retries => {
                    return Err(FedError::RoundAborted {
                        round: t,
                        attempts,
                        completed: abort.completed,
                        expected: abort.expected,
                    });
                }
                Err(_) => continue,
            }
        };

        let mut qfed_fallback = false;
        let next = match (&mut server, cfg.strategy) {
            (ServerState::Momentum(st), _) => aggregate_fedavgm(&global, &accepted, st)?,
            (ServerState::Adam(st), _) => aggregate_fedadam(&global, &accepted, st)?,
            (_, Strategy::FedMedian) => {
                aggregate_median(&accepted, cfg.params.median_mode, cfg.params.trim_fraction)?
            }
            (_, Strategy::QFedAvg) => {
                let out =
                    aggregate_qfedavg(&global, &accepted, cfg.params.q, cfg.params.q_lipschitz)?;
                qfed_fallback = out.fell_back;
                out.weights
            }
            (_, Strategy::Krum) => aggregate_krum(&accepted, cfg.params.krum_f)?,
            _ => aggregate_fedavg(&accepted)?,
        };
        global = next;

        let mut absorbed = false;
        if cfg.swa {
            if !cfg.lr.in_swa_phase(t) {
                swa = SwaState::init(&global);
            } else if swa_round(&cfg.lr, t) {
                swa_update(&mut swa, &global)?;
                absorbed = true;
            }
        }

        let eval_summary = match eval {
            Some(e) => Some(evaluate(&global, arch, e)?),
            None => None,
        };
        cumulative += bytes_up + bytes_down;
        let mean_local_loss =
            accepted.iter().map(|u| u.local_loss).sum::<f64>() / accepted.len() as f64;
        records.push(RoundRecord {
            round: t,
            strategy: cfg.strategy,
            lr,
            sampled,
            completed: accepted.len(),
            attempts,
            mean_local_loss,
            eval: eval_summary,
            bytes_up,
            bytes_down,
            cumulative_bytes: cumulative,
            optimizer_steps: steps,
            grad_evals: evals,
            swa_absorbed: absorbed,
            qfed_fallback,
            wall_time: started.elapsed().as_secs_f64(),
        });
    }

    let swa_models = swa.n_models;
    Ok(TrainingResult {
        final_weights: global,
        swa_weights: cfg.swa.then_some(swa.theta),
        swa_models,
        rounds: records,
    })
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

pub const ROUND_LOG_HEADER: &str =
    "round,strategy,lr,sampled,completed,mean_local_loss,eval_masked_mse,thre_0.3,thre_0.1,thre_0.05,thre_0.01,bytes_up,bytes_down,cumulative_bytes";

/// One CSV line per round. Sampled ids are `;`-separated.
pub fn round_log_csv(records: &[RoundRecord], reduction: Reduction) -> String {
    let mut out = String::from(ROUND_LOG_HEADER);
    out.push('\n');
    for r in records {
        let (mse, counts) = match &r.eval {
            Some(e) => (
                fmt_f(e.masked_mse),
                e.counts
                    .reduced(reduction)
                    .iter()
                    .map(|c| format!("{c:.3}"))
                    .collect::<Vec<_>>(),
            ),
            None => (String::new(), vec![String::new(); 4]),
        };
        let mut counts = counts;
        counts.resize(4, String::new());
        let sampled = r
            .sampled
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.round,
            r.strategy.name(),
            fmt_f(r.lr),
            sampled,
            r.completed,
            fmt_f(r.mean_local_loss),
            mse,
            counts[0],
            counts[1],
            counts[2],
            counts[3],
            r.bytes_up,
            r.bytes_down,
            r.cumulative_bytes
        ));
    }
    out
}
