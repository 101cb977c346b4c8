//! Local optimizers, the sharpness-aware two-pass wrapper and the round
//! learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::weights::l2_norm;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("gradient norm is zero; perturbation undefined")]
    ZeroGradient,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("round {t} outside schedule of {total} rounds")]
    RoundOutOfRange { t: usize, total: usize },
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("loss evaluation failed: {0}")]
    Loss(String),
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub rho: f64,
    /// Scale the perturbation by parameter magnitude.
    pub adaptive: bool,
    /// Stabilizer added to |theta| in the adaptive transform.
    pub eta: f64,
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(OptimError::Invalid {
                field: "rho",
                reason: format!("{} must be > 0", self.rho),
            });
        }
        if !(self.eta > 0.0) {
            return Err(OptimError::Invalid {
                field: "eta",
                reason: format!("{} must be > 0", self.eta),
            });
        }
        Ok(())
    }
}

/// `rho * g / ||g||`.
pub fn sam_perturbation(grads: &[f64], rho: f64) -> Result<Vec<f64>> {
    let n = l2_norm(grads);
    if n == 0.0 {
        return Err(OptimError::ZeroGradient);
    }
    if !n.is_finite() {
        return Err(OptimError::NonFinite("gradient"));
    }
    Ok(grads.iter().map(|g| rho * g / n).collect())
}

/// Adaptive perturbation `rho * T^2 g / ||T g||` with `T = diag(|theta| + eta)`.
pub fn asam_perturbation(params: &[f64], grads: &[f64], rho: f64, eta: f64) -> Result<Vec<f64>> {
    let tg: Vec<f64> = params
        .iter()
        .zip(grads)
        .map(|(p, g)| (p.abs() + eta) * g)
        .collect();
    let n = l2_norm(&tg);
    if n == 0.0 {
        return Err(OptimError::ZeroGradient);
    }
    if !n.is_finite() {
        return Err(OptimError::NonFinite("gradient"));
    }
    Ok(params
        .iter()
        .zip(&tg)
        .map(|(p, t)| rho * (p.abs() + eta) * t / n)
        .collect())
}

/// A first-order update rule that owns its state.
pub trait Optimizer: Send {
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()>;
}

#[derive(Debug, Clone, Default)]
pub struct Sgd;

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(OptimError::NonFinite("gradient"));
        }
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= lr * g;
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v = beta v + g; theta -= lr v`.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub beta: f64,
    velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(beta: f64, len: usize) -> Self {
        Momentum {
            beta,
            velocity: vec![0.0; len],
        }
    }
}

impl Optimizer for Momentum {
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(OptimError::NonFinite("gradient"));
        }
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.beta * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(OptimError::NonFinite("gradient"));
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Adam with decoupled weight decay (0 gives plain Adam).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: AdamState,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            state: AdamState::new(len),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if self.weight_decay != 0.0 {
            for p in params.iter_mut() {
                *p *= 1.0 - lr * self.weight_decay;
            }
        }
        adam_step(
            &mut self.state,
            params,
            grads,
            lr,
            self.beta1,
            self.beta2,
            self.eps,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerOptimizer {
    Sgd,
    Momentum,
    Adamw,
}

impl InnerOptimizer {
    pub fn build(self, len: usize) -> Box<dyn Optimizer> {
        match self {
            InnerOptimizer::Sgd => Box::new(Sgd),
            InnerOptimizer::Momentum => Box::new(Momentum::new(0.9, len)),
            InnerOptimizer::Adamw => Box::new(Adam::new(len).with_weight_decay(0.05)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Loss at the unperturbed parameters.
    pub loss: f64,
    pub grad_evals: usize,
}

/// One optimizer step, sharpness-aware when `sam` is given.
///
/// The gradient is taken at `theta`, a perturbation is formed from it, the
/// gradient is taken again at `theta + eps`, and the inner optimizer applies
/// that second gradient to the original `theta`. A zero first gradient skips
/// the perturbation. With `rho == 0` the second pass is skipped entirely.
pub fn sam_step<F>(
    params: &mut [f64],
    mut loss_fn: F,
    opt: &mut dyn Optimizer,
    sam: Option<&SamConfig>,
    lr: f64,
) -> Result<StepOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (loss, g1) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(OptimError::NonFinite("loss"));
    }
    let Some(cfg) = sam.filter(|c| c.rho != 0.0) else {
        opt.step(params, &g1, lr)?;
        return Ok(StepOutcome {
            loss,
            grad_evals: 1,
        });
    };
    let eps = if cfg.adaptive {
        asam_perturbation(params, &g1, cfg.rho, cfg.eta)
    } else {
        sam_perturbation(&g1, cfg.rho)
    };
    let eps = match eps {
        Ok(e) => e,
        Err(OptimError::ZeroGradient) => {
            opt.step(params, &g1, lr)?;
            return Ok(StepOutcome {
                loss,
                grad_evals: 1,
            });
        }
        Err(e) => return Err(e),
    };
    let perturbed: Vec<f64> = params.iter().zip(&eps).map(|(p, e)| p + e).collect();
    let (l2, g2) = loss_fn(&perturbed)?;
    if !l2.is_finite() {
        return Err(OptimError::NonFinite("perturbed loss"));
    }
    opt.step(params, &g2, lr)?;
    Ok(StepOutcome {
        loss,
        grad_evals: 2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleShape {
    /// Linear decay from gamma1 to gamma2 within each cycle.
    Linear,
    /// gamma2 throughout the averaging phase.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub gamma1: f64,
    pub gamma2: f64,
    pub total_rounds: usize,
    pub cycle: usize,
    pub swa_start_fraction: f64,
    pub shape: CycleShape,
}

impl LrSchedule {
    pub fn constant(lr: f64, total_rounds: usize) -> Self {
        LrSchedule {
            gamma1: lr,
            gamma2: lr,
            total_rounds,
            cycle: 1,
            swa_start_fraction: 0.75,
            shape: CycleShape::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma2 > 0.0 && self.gamma1 >= self.gamma2) {
            return Err(OptimError::Invalid {
                field: "gamma",
                reason: format!(
                    "need gamma1 >= gamma2 > 0, got {} / {}",
                    self.gamma1, self.gamma2
                ),
            });
        }
        if self.cycle < 1 {
            return Err(OptimError::Invalid {
                field: "cycle",
                reason: "must be >= 1".into(),
            });
        }
        if !(self.swa_start_fraction > 0.0 && self.swa_start_fraction < 1.0) {
            return Err(OptimError::Invalid {
                field: "swa_start_fraction",
                reason: format!("{} outside (0, 1)", self.swa_start_fraction),
            });
        }
        Ok(())
    }

    /// Whether round `t` belongs to the averaging phase (`t >= f * T`).
    pub fn in_swa_phase(&self, t: usize) -> bool {
        t as f64 >= self.swa_start_fraction * self.total_rounds as f64
    }

    pub fn lr_for_round(&self, t: usize) -> Result<f64> {
        if t >= self.total_rounds {
            return Err(OptimError::RoundOutOfRange {
                t,
                total: self.total_rounds,
            });
        }
        if !self.in_swa_phase(t) {
            return Ok(self.gamma1);
        }
        Ok(match self.shape {
            CycleShape::Constant => self.gamma2,
            CycleShape::Linear if self.cycle > 1 => {
                let frac = (t % self.cycle) as f64 / (self.cycle - 1) as f64;
                self.gamma1 - (self.gamma1 - self.gamma2) * frac
            }
            CycleShape::Linear => self.gamma2,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn sam_perturbation_examples() {
        assert!(close(
            &sam_perturbation(&[3.0, 4.0], 0.1).unwrap(),
            &[0.06, 0.08],
            1e-15
        ));
        assert_eq!(
            sam_perturbation(&[1.0, 0.0, 0.0], 1.0).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        assert_eq!(
            sam_perturbation(&[0.0, 0.0], 1.0),
            Err(OptimError::ZeroGradient)
        );
    }

    #[test]
    fn asam_examples() {
        let g = [0.3, -1.7];
        assert_eq!(
            asam_perturbation(&[0.0, 0.0], &g, 0.2, 1.0).unwrap(),
            sam_perturbation(&g, 0.2).unwrap()
        );
        assert!(close(
            &asam_perturbation(&[1.0, 1.0], &[3.0, 4.0], 0.1, 0.0).unwrap(),
            &[0.06, 0.08],
            1e-15
        ));
        assert!(close(
            &asam_perturbation(&[2.0, 0.0], &[1.0, 1.0], 1.0, 0.0).unwrap(),
            &[2.0, 0.0],
            1e-15
        ));
        assert_eq!(
            asam_perturbation(&[0.0], &[1.0], 1.0, 0.0),
            Err(OptimError::ZeroGradient)
        );
    }

    fn half_square(p: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((0.5 * p[0] * p[0], vec![p[0]]))
    }

    #[test]
    fn sam_quadratic_hand_example() {
        let mut p = [2.0];
        let cfg = SamConfig {
            rho: 0.1,
            adaptive: false,
            eta: 0.01,
        };
        let out = sam_step(&mut p, half_square, &mut Sgd, Some(&cfg), 0.1).unwrap();
        assert!((p[0] - 1.79).abs() < 1e-12);
        assert_eq!(out.grad_evals, 2);
        assert_eq!(out.loss, 2.0);
    }

    #[test]
    fn linear_loss_sam_equals_sgd() {
        let lin = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((1.0, vec![0.5, -2.0])) };
        let cfg = SamConfig {
            rho: 0.3,
            adaptive: false,
            eta: 0.01,
        };
        let mut a = [1.0, 1.0];
        let mut b = [1.0, 1.0];
        sam_step(&mut a, lin, &mut Sgd, Some(&cfg), 0.1).unwrap();
        sam_step(&mut b, lin, &mut Sgd, None, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_gradient_falls_back_to_plain_step() {
        let mut p = [0.0];
        let cfg = SamConfig {
            rho: 0.1,
            adaptive: true,
            eta: 0.01,
        };
        let out = sam_step(&mut p, half_square, &mut Sgd, Some(&cfg), 0.1).unwrap();
        assert_eq!(p, [0.0]);
        assert_eq!(out.grad_evals, 1);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let bad = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![1.0])) };
        let mut p = [0.0];
        assert!(sam_step(&mut p, bad, &mut Sgd, None, 0.1).is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = LrSchedule {
            gamma1: 0.01,
            gamma2: 0.01,
            total_rounds: 20,
            cycle: 3,
            swa_start_fraction: 0.75,
            shape: CycleShape::Linear,
        };
        assert!((0..20).all(|t| s.lr_for_round(t).unwrap() == 0.01));
        let s = LrSchedule {
            gamma1: 0.1,
            gamma2: 0.01,
            total_rounds: 20,
            cycle: 4,
            swa_start_fraction: 0.75,
            shape: CycleShape::Linear,
        };
        assert_eq!(s.lr_for_round(5).unwrap(), 0.1);
        assert_eq!(s.lr_for_round(14).unwrap(), 0.1);
        assert!((s.lr_for_round(19).unwrap() - 0.01).abs() < 1e-15); // 19 mod 4 == 3
        assert_eq!(s.lr_for_round(16).unwrap(), 0.1); // 16 mod 4 == 0
        assert!(matches!(
            s.lr_for_round(20),
            Err(OptimError::RoundOutOfRange { .. })
        ));
        let c = LrSchedule {
            shape: CycleShape::Constant,
            ..s
        };
        assert_eq!(c.lr_for_round(16).unwrap(), 0.01);
        let one = LrSchedule { cycle: 1, ..s };
        assert_eq!(one.lr_for_round(16).unwrap(), 0.01);
    }

    #[test]
    fn schedule_validation() {
        let s = LrSchedule {
            gamma1: 0.01,
            gamma2: 0.1,
            total_rounds: 4,
            cycle: 1,
            swa_start_fraction: 0.75,
            shape: CycleShape::Linear,
        };
        assert!(s.validate().is_err());
        assert!(LrSchedule::constant(0.1, 4).validate().is_ok());
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut st = AdamState::new(2);
        let mut p = [1.5, -2.0];
        for _ in 0..100 {
            adam_step(&mut st, &mut p, &[0.0, 0.0], 0.01, 0.9, 0.999, 1e-8).unwrap();
        }
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn adam_first_step() {
        let mut st = AdamState::new(1);
        let mut p = [0.0];
        adam_step(&mut st, &mut p, &[1.0], 0.001, 0.9, 0.999, 1e-8).unwrap();
        assert!((p[0] + 0.001).abs() < 1e-9);
    }

    #[test]
    fn adam_constant_gradient_limit() {
        // With a constant gradient both bias-corrected moments converge to g and
        // g^2, so each step tends to lr * sign(g).
        let mut st = AdamState::new(2);
        let mut p = [0.0, 0.0];
        for _ in 0..9_999 {
            adam_step(&mut st, &mut p, &[0.3, -5.0], 0.01, 0.9, 0.999, 1e-8).unwrap();
        }
        let before = p;
        adam_step(&mut st, &mut p, &[0.3, -5.0], 0.01, 0.9, 0.999, 1e-8).unwrap();
        let d0 = before[0] - p[0];
        let d1 = before[1] - p[1];
        assert!((d0 - 0.01).abs() < 0.01 * 0.01);
        assert!((d1 + 0.01).abs() < 0.01 * 0.01);
        assert!(adam_step(&mut st, &mut p, &[f64::NAN, 0.0], 0.01, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn momentum_accumulates() {
        let mut m = Momentum::new(0.9, 1);
        let mut p = [0.0];
        m.step(&mut p, &[1.0], 1.0).unwrap();
        m.step(&mut p, &[1.0], 1.0).unwrap();
        assert!((p[0] + 2.9).abs() < 1e-12);
    }
}
