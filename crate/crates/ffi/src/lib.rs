//! C ABI over the simulator: opaque config and model handles, stateless
//! aggregation and statistics helpers, and the ablation sweep.
//!
//! Every fallible call returns a [`FedmaeStatus`]; the message for the last
//! failure on the calling thread is available from [`fedmae_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedmae::experiment::{self, ExperimentConfig, ExperimentError};
use fedmae::federation::{self, ClientUpdate, MedianMode};
use fedmae::mae::MaeArchitecture;
use fedmae::stats::{self, PairedSample, WilcoxonMode};
use fedmae::WeightVector;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedmaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Aborted = 4,
    Io = 5,
    Failed = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque experiment configuration.
pub struct FedmaeConfig {
    inner: ExperimentConfig,
}

/// Opaque model checkpoint.
pub struct FedmaeModel {
    arch: MaeArchitecture,
    weights: WeightVector,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FedmaeWilcoxon {
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    pub w: f64,
    pub p: f64,
    pub reject: bool,
    pub exact: bool,
    pub no_evidence: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FedmaeCost {
    pub bidirectional_bytes_per_round_per_client: f64,
    pub total_bytes: f64,
    pub mb_per_client_per_round: f64,
    pub total_gb: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: FedmaeStatus, msg: impl Into<String>) -> FedmaeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn from_experiment(e: ExperimentError) -> FedmaeStatus {
    let status = if e.is_config() {
        FedmaeStatus::Config
    } else if e.is_abort() {
        FedmaeStatus::Aborted
    } else if matches!(e, ExperimentError::Io { .. }) {
        FedmaeStatus::Io
    } else {
        FedmaeStatus::Failed
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> FedmaeStatus) -> FedmaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(FedmaeStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, FedmaeStatus> {
    if p.is_null() {
        return Err(fail(FedmaeStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        fail(
            FedmaeStatus::InvalidArgument,
            format!("{what} is not UTF-8"),
        )
    })
}

/// `n` rows of `dim` values each, as client updates with ids `0..n`.
unsafe fn updates_arg(
    weights: *const f64,
    n: usize,
    dim: usize,
    examples: *const usize,
) -> Result<Vec<ClientUpdate>, FedmaeStatus> {
    if weights.is_null() {
        return Err(fail(FedmaeStatus::NullPointer, "weights is null"));
    }
    if n == 0 || dim == 0 {
        return Err(fail(
            FedmaeStatus::InvalidArgument,
            "need at least one client and one dimension",
        ));
    }
    let flat = std::slice::from_raw_parts(weights, n * dim);
    let counts = if examples.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(examples, n))
    };
    Ok((0..n)
        .map(|i| ClientUpdate {
            client_id: i,
            weights: WeightVector::new(flat[i * dim..(i + 1) * dim].to_vec()),
            num_examples: counts.map_or(1, |c| c[i]),
            local_loss: 0.0,
            completed: true,
            grad_evals: 0,
            steps: 0,
        })
        .collect())
}

/// Copies the last error message on this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fedmae_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

#[no_mangle]
pub extern "C" fn fedmae_config_default() -> *mut FedmaeConfig {
    match ExperimentConfig::parse("") {
        Ok(inner) => Box::into_raw(Box::new(FedmaeConfig { inner })),
        Err(_) => ptr::null_mut(),
    }
}

/// Parses config text. On success `*out` receives a handle owned by the caller.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedmae_config_parse(
    text: *const c_char,
    out: *mut *mut FedmaeConfig,
) -> FedmaeStatus {
    guard(|| {
        if out.is_null() {
            return fail(FedmaeStatus::NullPointer, "out is null");
        }
        let text = match str_arg(text, "text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ExperimentConfig::parse(text) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(FedmaeConfig { inner }));
                FedmaeStatus::Ok
            }
            Err(e) => from_experiment(e),
        }
    })
}

/// Sets one key as a config line would; the config is unchanged on error.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fedmae_config_set(
    cfg: *mut FedmaeConfig,
    key: *const c_char,
    value: *const c_char,
) -> FedmaeStatus {
    guard(|| {
        let Some(cfg) = cfg.as_mut() else {
            return fail(FedmaeStatus::NullPointer, "cfg is null");
        };
        let (key, value) = match (str_arg(key, "key"), str_arg(value, "value")) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let mut next = cfg.inner.clone();
        match next.apply_override(key, value) {
            Ok(()) => {
                cfg.inner = next;
                FedmaeStatus::Ok
            }
            Err(e) => from_experiment(e),
        }
    })
}

/// Writes the canonical config text into `buf`. `*needed` receives the
/// size including the NUL; `BufferTooSmall` when it exceeds `len`.
///
/// # Safety
/// `cfg` must come from this library; `buf` must point to `len` writable
/// bytes or be null with `len == 0`; `needed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedmae_config_echo(
    cfg: *const FedmaeConfig,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> FedmaeStatus {
    guard(|| {
        let (Some(cfg), false) = (cfg.as_ref(), needed.is_null()) else {
            return fail(FedmaeStatus::NullPointer, "cfg or needed is null");
        };
        let text = cfg.inner.echo();
        *needed = text.len() + 1;
        if buf.is_null() || len < text.len() + 1 {
            return fail(
                FedmaeStatus::BufferTooSmall,
                format!("echo needs {} bytes", text.len() + 1),
            );
        }
        ptr::copy_nonoverlapping(text.as_ptr().cast::<c_char>(), buf, text.len());
        *buf.add(text.len()) = 0;
        FedmaeStatus::Ok
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedmae_config_free(cfg: *mut FedmaeConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs every configured method for every replication and writes the
/// report tree under `out_dir`. `Aborted` when any run failed; the other
/// rows are still written.
///
/// # Safety
/// `cfg` must come from this library; `out_dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fedmae_run_ablation(
    cfg: *const FedmaeConfig,
    out_dir: *const c_char,
) -> FedmaeStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else {
            return fail(FedmaeStatus::NullPointer, "cfg is null");
        };
        let out = match str_arg(out_dir, "out_dir") {
            Ok(o) => Path::new(o),
            Err(s) => return s,
        };
        let cfg = &cfg.inner;
        let result = experiment::write_echo(cfg, out)
            .and_then(|_| experiment::run_ablation(cfg, &cfg.methods))
            .and_then(|ab| experiment::emit_reports(cfg, &ab, out).map(|_| ab));
        match result {
            Ok(ab) => match ab.runs.iter().find_map(|r| r.outcome.as_ref().err()) {
                Some(e) => fail(FedmaeStatus::Aborted, e.clone()),
                None => FedmaeStatus::Ok,
            },
            Err(e) => from_experiment(e),
        }
    })
}

/// Loads a checkpoint written by the simulator.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedmae_model_load(
    path: *const c_char,
    out: *mut *mut FedmaeModel,
) -> FedmaeStatus {
    guard(|| {
        if out.is_null() {
            return fail(FedmaeStatus::NullPointer, "out is null");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => Path::new(p),
            Err(s) => return s,
        };
        match experiment::read_model(path) {
            Ok((arch, weights)) => {
                *out = Box::into_raw(Box::new(FedmaeModel { arch, weights }));
                FedmaeStatus::Ok
            }
            Err(e) => from_experiment(e),
        }
    })
}

/// # Safety
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn fedmae_model_param_count(model: *const FedmaeModel) -> usize {
    model.as_ref().map_or(0, |m| m.weights.len())
}

/// Image side length of the model, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn fedmae_model_image_size(model: *const FedmaeModel) -> usize {
    model.as_ref().map_or(0, |m| m.arch.image_size)
}

/// # Safety
/// `model` must be a live handle; `buf` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn fedmae_model_copy_params(
    model: *const FedmaeModel,
    buf: *mut f64,
    len: usize,
) -> FedmaeStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), buf.is_null()) else {
            return fail(FedmaeStatus::NullPointer, "model or buf is null");
        };
        if len < m.weights.len() {
            return fail(
                FedmaeStatus::BufferTooSmall,
                format!("need {} values", m.weights.len()),
            );
        }
        ptr::copy_nonoverlapping(m.weights.as_ptr(), buf, m.weights.len());
        FedmaeStatus::Ok
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedmae_model_free(model: *mut FedmaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Example-weighted mean of `n` row-major updates of length `dim`.
/// `examples` may be null for equal weights.
///
/// # Safety
/// `weights` must hold `n * dim` values, `examples` null or `n` values,
/// `out` `dim` writable values.
#[no_mangle]
pub unsafe extern "C" fn fedmae_aggregate_fedavg(
    weights: *const f64,
    n: usize,
    dim: usize,
    examples: *const usize,
    out: *mut f64,
) -> FedmaeStatus {
    guard(|| {
        if out.is_null() {
            return fail(FedmaeStatus::NullPointer, "out is null");
        }
        let ups = match updates_arg(weights, n, dim, examples) {
            Ok(u) => u,
            Err(s) => return s,
        };
        match federation::aggregate_fedavg(&ups) {
            Ok(w) => {
                ptr::copy_nonoverlapping(w.as_ptr(), out, dim);
                FedmaeStatus::Ok
            }
            Err(e) => fail(FedmaeStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Coordinate-wise median when `trim_fraction` is 0, trimmed mean otherwise.
///
/// # Safety
/// `weights` must hold `n * dim` values and `out` `dim` writable values.
#[no_mangle]
pub unsafe extern "C" fn fedmae_aggregate_median(
    weights: *const f64,
    n: usize,
    dim: usize,
    trim_fraction: f64,
    out: *mut f64,
) -> FedmaeStatus {
    guard(|| {
        if out.is_null() {
            return fail(FedmaeStatus::NullPointer, "out is null");
        }
        let ups = match updates_arg(weights, n, dim, ptr::null()) {
            Ok(u) => u,
            Err(s) => return s,
        };
        let mode = if trim_fraction == 0.0 {
            MedianMode::Median
        } else {
            MedianMode::TrimmedMean
        };
        match federation::aggregate_median(&ups, mode, trim_fraction) {
            Ok(w) => {
                ptr::copy_nonoverlapping(w.as_ptr(), out, dim);
                FedmaeStatus::Ok
            }
            Err(e) => fail(FedmaeStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Row index chosen by Krum with `f` tolerated Byzantine clients.
///
/// # Safety
/// `weights` must hold `n * dim` values; `selected` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedmae_krum_select(
    weights: *const f64,
    n: usize,
    dim: usize,
    f: usize,
    selected: *mut usize,
) -> FedmaeStatus {
    guard(|| {
        if selected.is_null() {
            return fail(FedmaeStatus::NullPointer, "selected is null");
        }
        let ups = match updates_arg(weights, n, dim, ptr::null()) {
            Ok(u) => u,
            Err(s) => return s,
        };
        match federation::krum_select(&ups, f) {
            Ok((id, _)) => {
                *selected = id;
                FedmaeStatus::Ok
            }
            Err(e) => fail(FedmaeStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Two-sided Wilcoxon signed-rank test on `n` paired scores.
///
/// # Safety
/// `a` and `b` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedmae_wilcoxon(
    a: *const f64,
    b: *const f64,
    n: usize,
    alpha: f64,
    out: *mut FedmaeWilcoxon,
) -> FedmaeStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(FedmaeStatus::NullPointer, "a, b or out is null");
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return fail(
                FedmaeStatus::InvalidArgument,
                format!("alpha {alpha} outside (0, 1)"),
            );
        }
        let (a, b) = (
            std::slice::from_raw_parts(a, n),
            std::slice::from_raw_parts(b, n),
        );
        let pairs: Vec<PairedSample> = (0..n)
            .map(|i| PairedSample {
                unit: i.to_string(),
                score_a: a[i],
                score_b: b[i],
            })
            .collect();
        let r = stats::wilcoxon_signed_rank(&pairs, alpha, WilcoxonMode::Auto);
        *out = FedmaeWilcoxon {
            n: r.n,
            w_plus: r.w_plus,
            w_minus: r.w_minus,
            w: r.w,
            p: r.p,
            reject: r.reject,
            exact: r.exact,
            no_evidence: r.no_evidence,
        };
        FedmaeStatus::Ok
    })
}

/// Per-round and total traffic for exchanging a model of `params` values.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedmae_comm_cost(
    params: f64,
    bytes_per_param: f64,
    rounds: usize,
    clients_per_round: usize,
    out: *mut FedmaeCost,
) -> FedmaeStatus {
    guard(|| {
        if out.is_null() {
            return fail(FedmaeStatus::NullPointer, "out is null");
        }
        match stats::comm_cost(params, bytes_per_param, rounds, clients_per_round) {
            Ok(r) => {
                *out = FedmaeCost {
                    bidirectional_bytes_per_round_per_client: r
                        .bidirectional_bytes_per_round_per_client,
                    total_bytes: r.total_bytes,
                    mb_per_client_per_round: r.mb_per_client_per_round,
                    total_gb: r.total_gb,
                };
                FedmaeStatus::Ok
            }
            Err(e) => fail(FedmaeStatus::InvalidArgument, e.to_string()),
        }
    })
}
