//! Paired significance testing and cost accounting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mae::{self, Image, MaeArchitecture, MaeError, MaskSet};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("empty evaluation set")]
    Empty,
    #[error("group labels: {0}")]
    Groups(String),
    #[error("non-finite score for unit {0}")]
    NonFinite(String),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error(transparent)]
    Model(#[from] MaeError),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Below this many non-zero differences the test has little power.
pub const MIN_MEANINGFUL_PAIRS: usize = 5;
pub const EXACT_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub unit: String,
    pub score_a: f64,
    pub score_b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMode {
    /// Exact up to 20 non-zero pairs, normal approximation beyond.
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    pub w: f64,
    /// Two-sided.
    pub p: f64,
    pub alpha: f64,
    pub reject: bool,
    pub exact: bool,
    /// Every difference was zero; the test is undefined.
    pub no_evidence: bool,
    pub underpowered: bool,
}

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// `P(W+ <= w)` under the null by counting sign assignments. Ranks are
/// doubled to integers so average ranks of ties stay exact.
pub fn exact_lower_tail(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut dist = vec![0.0f64; max + 1];
    dist[0] = 1.0;
    let mut top = 0;
    for &r in &doubled {
        for s in (0..=top).rev() {
            let v = dist[s] * 0.5;
            dist[s] = v;
            dist[s + r] += v;
        }
        top += r;
    }
    let limit = (2.0 * w).round() as usize;
    dist[..=limit.min(max)].iter().sum()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Paired two-sided signed-rank test on `score_a - score_b`.
pub fn wilcoxon_signed_rank(
    pairs: &[PairedSample],
    alpha: f64,
    mode: WilcoxonMode,
) -> WilcoxonResult {
    let diffs: Vec<f64> = pairs
        .iter()
        .map(|p| p.score_a - p.score_b)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return WilcoxonResult {
            n,
            w_plus: 0.0,
            w_minus: 0.0,
            w: 0.0,
            p: 1.0,
            alpha,
            reject: false,
            exact: true,
            no_evidence: true,
            underpowered: true,
        };
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = n as f64 * (n as f64 + 1.0) / 2.0;
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);
    let exact = match mode {
        WilcoxonMode::Exact => true,
        WilcoxonMode::Normal => false,
        WilcoxonMode::Auto => n <= EXACT_LIMIT,
    };
    let p = if exact {
        (2.0 * exact_lower_tail(&ranks, w)).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut ties = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            ties += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        if var <= 0.0 {
            1.0
        } else {
            let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
            (2.0 * normal_cdf(-z)).min(1.0)
        }
    };
    WilcoxonResult {
        n,
        w_plus,
        w_minus,
        w,
        p,
        alpha,
        reject: p < alpha,
        exact,
        no_evidence: false,
        underpowered: n < MIN_MEANINGFUL_PAIRS,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "threshold", rename_all = "kebab-case")]
pub enum UnitMetric {
    /// Mean per-patch error over masked patches; lower is better.
    MaskedMse,
    /// Patches with error below the threshold; higher is better.
    PatchesBelow(f64),
}

impl UnitMetric {
    pub fn higher_is_better(self) -> bool {
        matches!(self, UnitMetric::PatchesBelow(_))
    }

    pub fn name(self) -> String {
        match self {
            UnitMetric::MaskedMse => "masked_mse".into(),
            UnitMetric::PatchesBelow(t) => format!("patches_below_{t}"),
        }
    }

    fn score(self, report: &mae::ReconstructionReport) -> f64 {
        match self {
            UnitMetric::MaskedMse => report.mean_masked_mse,
            UnitMetric::PatchesBelow(t) => {
                report.per_patch_mse.iter().filter(|e| **e < t).count() as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Image,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    A,
    B,
    Tie,
    NoEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub metric: String,
    pub level: Level,
    pub n_units: usize,
    #[serde(rename = "W")]
    pub w: f64,
    pub p: f64,
    pub alpha: f64,
    pub winner: Winner,
    pub test: WilcoxonResult,
    pub units: Vec<PairedSample>,
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores both models on the same images and masks (mask of image `i` seeded
/// with `mask_seed + i`), optionally averages per group, and tests the pairs.
#[allow(clippy::too_many_arguments)]
pub fn compare_models_paired(
    model_a: &[f64],
    model_b: &[f64],
    arch: &MaeArchitecture,
    images: &[Image],
    mask_seed: u64,
    metric: UnitMetric,
    groups: Option<&[usize]>,
    alpha: f64,
) -> Result<ComparisonReport> {
    if images.is_empty() {
        return Err(StatsError::Empty);
    }
    if let Some(g) = groups {
        if g.len() != images.len() {
            return Err(StatsError::Groups(format!(
                "{} labels for {} images",
                g.len(),
                images.len()
            )));
        }
    }
    let n = arch.n_patches();
    let mut per_image = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let mask: MaskSet = mae::sample_mask(n, arch.mask_ratio, mask_seed.wrapping_add(i as u64))?;
        let (_, ra) = mae::forward_mae(model_a, arch, img, &mask)?;
        let (_, rb) = mae::forward_mae(model_b, arch, img, &mask)?;
        per_image.push((metric.score(&ra), metric.score(&rb)));
    }
    let units: Vec<PairedSample> = match groups {
        None => per_image
            .iter()
            .enumerate()
            .map(|(i, (a, b))| PairedSample {
                unit: format!("image-{i}"),
                score_a: *a,
                score_b: *b,
            })
            .collect(),
        Some(g) => {
            let mut ids: Vec<usize> = g.to_vec();
            ids.sort_unstable();
            ids.dedup();
            ids.iter()
                .map(|&gid| {
                    let members: Vec<&(f64, f64)> = per_image
                        .iter()
                        .zip(g)
                        .filter(|(_, l)| **l == gid)
                        .map(|(s, _)| s)
                        .collect();
                    let m = members.len() as f64;
                    PairedSample {
                        unit: format!("group-{gid}"),
                        score_a: members.iter().map(|s| s.0).sum::<f64>() / m,
                        score_b: members.iter().map(|s| s.1).sum::<f64>() / m,
                    }
                })
                .collect()
        }
    };
    if let Some(u) = units
        .iter()
        .find(|u| !u.score_a.is_finite() || !u.score_b.is_finite())
    {
        return Err(StatsError::NonFinite(u.unit.clone()));
    }
    let test = wilcoxon_signed_rank(&units, alpha, WilcoxonMode::Auto);
    let a_higher = test.w_plus > test.w_minus;
    let winner = if test.no_evidence {
        Winner::NoEvidence
    } else if !test.reject {
        Winner::Tie
    } else if a_higher == metric.higher_is_better() {
        Winner::A
    } else {
        Winner::B
    };
    Ok(ComparisonReport {
        metric: metric.name(),
        level: if groups.is_some() {
            Level::Group
        } else {
            Level::Image
        },
        n_units: units.len(),
        w: test.w,
        p: test.p,
        alpha,
        winner,
        test,
        units,
    })
}

/// Published transfer figures for a 116.66M-parameter model.
pub const REFERENCE_PARAMS: f64 = 116.66e6;
pub const REFERENCE_MB_PER_CLIENT_ROUND: f64 = 893.0;
pub const REFERENCE_TOTAL_GB: f64 = 121.0;
pub const REFERENCE_ROUNDS: usize = 15;
pub const REFERENCE_CLIENTS: usize = 9;
/// Ops per client for one epoch, in units of 1e12 MACs.
pub const ENDO700K_OPS_TERA: [f64; 9] = [40.40, 2.99, 9.86, 0.25, 79.51, 8.66, 16.70, 0.17, 8.07];
pub const ENDO700K_TOTAL_OPS_TERA: f64 = 166.61;
pub const ENDO700K_TOTAL_IMAGES: u64 = 734_549;

/// Relative disagreement above which a published figure is flagged.
pub const FLAG_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub label: String,
    pub published: f64,
    pub computed: f64,
    /// `published / computed`.
    pub ratio: f64,
    pub flagged: bool,
}

impl ReferenceCheck {
    pub fn new(label: &str, published: f64, computed: f64) -> Self {
        let ratio = published / computed;
        ReferenceCheck {
            label: label.into(),
            published,
            computed,
            ratio,
            flagged: (ratio - 1.0).abs() > FLAG_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: f64,
    pub bytes_per_param: f64,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub bytes_up_per_round_per_client: f64,
    pub bytes_down_per_round_per_client: f64,
    pub bidirectional_bytes_per_round_per_client: f64,
    pub total_bytes: f64,
    /// SI megabytes (1e6 bytes).
    pub mb_per_client_per_round: f64,
    /// SI gigabytes (1e9 bytes).
    pub total_gb: f64,
    /// Published figures next to the formula values; empty for other model sizes.
    pub references: Vec<ReferenceCheck>,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Full-model exchange in both directions every round.
pub fn comm_cost(
    params: f64,
    bytes_per_param: f64,
    rounds: usize,
    clients_per_round: usize,
) -> Result<CostReport> {
    if !(params > 0.0) {
        return Err(StatsError::NonPositive("params"));
    }
    if !(bytes_per_param > 0.0) {
        return Err(StatsError::NonPositive("bytes_per_param"));
    }
    if rounds == 0 {
        return Err(StatsError::NonPositive("rounds"));
    }
    if clients_per_round == 0 {
        return Err(StatsError::NonPositive("clients_per_round"));
    }
    let one_way = params * bytes_per_param;
    let both = 2.0 * one_way;
    let total = both * rounds as f64 * clients_per_round as f64;
    let mb = both / 1e6;
    let gb = total / 1e9;
    let mut references = Vec::new();
    if params == REFERENCE_PARAMS {
        references.push(ReferenceCheck::new(
            "MB per client per round",
            REFERENCE_MB_PER_CLIENT_ROUND,
            mb,
        ));
        let reference_scale = both * REFERENCE_ROUNDS as f64 * REFERENCE_CLIENTS as f64 / 1e9;
        references.push(ReferenceCheck::new(
            &format!("GB over {REFERENCE_ROUNDS} rounds x {REFERENCE_CLIENTS} clients"),
            REFERENCE_TOTAL_GB,
            reference_scale,
        ));
    }
    Ok(CostReport {
        params,
        bytes_per_param,
        rounds,
        clients_per_round,
        bytes_up_per_round_per_client: one_way,
        bytes_down_per_round_per_client: one_way,
        bidirectional_bytes_per_round_per_client: both,
        total_bytes: total,
        mb_per_client_per_round: mb,
        total_gb: gb,
        references,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacsRow {
    pub client: String,
    pub count: u64,
    pub ops: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacsReport {
    pub macs_per_image: f64,
    pub rows: Vec<MacsRow>,
    pub total_count: u64,
    pub total_ops: f64,
}

impl MacsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One epoch of forward passes per client.
pub fn macs_report(names: &[&str], counts: &[u64], macs_per_image: f64) -> MacsReport {
    let total_count: u64 = counts.iter().sum();
    let rows = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| MacsRow {
            client: names
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("client-{i}")),
            count: c,
            ops: c as f64 * macs_per_image,
            fraction: if total_count == 0 {
                0.0
            } else {
                c as f64 / total_count as f64
            },
        })
        .collect();
    MacsReport {
        macs_per_image,
        rows,
        total_count,
        total_ops: total_count as f64 * macs_per_image,
    }
}

/// Corpus-epoch total divided over the listed images.
pub fn endo700k_macs_per_image() -> f64 {
    ENDO700K_TOTAL_OPS_TERA * 1e12 / ENDO700K_TOTAL_IMAGES as f64
}
