//! Temperature softmax, label smoothing and the response-based
//! distillation loss. Every loss returns its value together with the exact
//! gradient of that value with respect to the student's logits.
//!
//! All logarithms are natural. Logs of probabilities are clamped from below
//! at `ln(eps_log)`; the gradients account for the clamp, so a clamped term
//! contributes nothing to the gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default floor applied inside logarithms.
pub const EPS_LOG: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("{name} must lie in [0, 1], got {value}")]
    AlphaOutOfRange { name: &'static str, value: f64 },
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("logits must be finite")]
    NonFiniteLogits,
}

pub type Result<T> = std::result::Result<T, LossError>;

/// A probability vector: non-negative entries summing to one within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(probs, 1e-6)
    }

    /// As [`Distribution::new`] with an explicit tolerance on the sum; used
    /// for rows that were rounded to `f32` storage.
    pub fn with_tolerance(probs: Vec<f64>, tol: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(LossError::NotADistribution("empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(LossError::NotADistribution(format!("entry {p} is negative or not finite")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(LossError::NotADistribution(format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            probs: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn one_hot(class: usize, classes: usize) -> Result<Self> {
        if class >= classes {
            return Err(LossError::ClassOutOfRange { class, classes });
        }
        let mut probs = vec![0.0; classes];
        probs[class] = 1.0;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Hyper-parameters of the label-smoothing and distillation losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha_ls: f64,
    pub alpha_kd: f64,
    pub temperature: f64,
    /// Multiply the KL term by `T²` so its gradient scale does not vanish
    /// at high temperature.
    pub kl_t_squared: bool,
    pub eps_log: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_ls: 0.0,
            alpha_kd: 0.99,
            temperature: 9.0,
            kl_t_squared: true,
            eps_log: EPS_LOG,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("alpha_ls", self.alpha_ls), ("alpha_kd", self.alpha_kd)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(LossError::AlphaOutOfRange { name, value });
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(LossError::NonPositiveTemperature(self.temperature));
        }
        if !(self.eps_log > 0.0) {
            return Err(LossError::NotADistribution(format!("eps_log must be positive, got {}", self.eps_log)));
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.iter().all(|z| z.is_finite()) {
        Ok(())
    } else {
        Err(LossError::NonFiniteLogits)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(LossError::NonPositiveTemperature(t))
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::DimensionMismatch { left: a, right: b })
    }
}

/// `(softmax(z / T), log_softmax(z / T))`, max-subtracted for stability.
fn softmax_parts(logits: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|z| (z - max) / t).collect();
    let exps: Vec<f64> = shifted.iter().map(|s| s.exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_sum = sum.ln();
    (
        exps.iter().map(|e| e / sum).collect(),
        shifted.iter().map(|s| s - log_sum).collect(),
    )
}

/// `q_i = exp(z_i / T) / Σ_j exp(z_j / T)`.
pub fn softmax_t(logits: &[f64], t: f64) -> Result<Distribution> {
    check_temperature(t)?;
    check_logits(logits)?;
    if logits.is_empty() {
        return Err(LossError::NotADistribution("no logits".into()));
    }
    Ok(Distribution {
        probs: softmax_parts(logits, t).0,
    })
}

/// Label-smoothed target `(1 − α)·onehot(class) + α / C`.
pub fn ls_labels(class: usize, classes: usize, alpha_ls: f64) -> Result<Distribution> {
    if !(0.0..=1.0).contains(&alpha_ls) {
        return Err(LossError::AlphaOutOfRange {
            name: "alpha_ls",
            value: alpha_ls,
        });
    }
    if class >= classes {
        return Err(LossError::ClassOutOfRange { class, classes });
    }
    let base = alpha_ls / classes as f64;
    let mut probs = vec![base; classes];
    probs[class] = (1.0 - alpha_ls) + base;
    Ok(Distribution { probs })
}

/// `H(q, p) = −Σ q log max(p, eps)`.
pub fn cross_entropy(q: &Distribution, p: &Distribution) -> Result<f64> {
    same_len(q.len(), p.len())?;
    Ok(-q
        .probs
        .iter()
        .zip(&p.probs)
        .map(|(&qi, &pi)| if qi == 0.0 { 0.0 } else { qi * pi.max(EPS_LOG).ln() })
        .sum::<f64>())
}

/// `D_KL(a ‖ b) = Σ a log(a / b)` with both sides clamped at eps; never
/// negative.
pub fn kl_div(a: &Distribution, b: &Distribution) -> Result<f64> {
    same_len(a.len(), b.len())?;
    let s: f64 = a
        .probs
        .iter()
        .zip(&b.probs)
        .map(|(&ai, &bi)| {
            if ai == 0.0 {
                0.0
            } else {
                ai * (ai.max(EPS_LOG).ln() - bi.max(EPS_LOG).ln())
            }
        })
        .sum();
    Ok(s.max(0.0))
}

/// Shannon entropy in nats, `−Σ p log max(p, eps)`.
pub fn entropy(p: &Distribution) -> f64 {
    -p.probs
        .iter()
        .map(|&pi| if pi == 0.0 { 0.0 } else { pi * pi.max(EPS_LOG).ln() })
        .sum::<f64>()
}

/// `−Σ target · max(log p, ln eps)` for `p = softmax(z / T)`, with its exact
/// gradient with respect to `z`.
///
/// Writing `U` for the unclamped positions, the gradient is
/// `(p_j Σ_{i∈U} target_i − target_j [j ∈ U]) / T`.
fn soft_cross_entropy(target: &[f64], logits: &[f64], t: f64, eps_log: f64) -> LossValue {
    let (p, logp) = softmax_parts(logits, t);
    let floor = eps_log.ln();
    let mut value = 0.0;
    let mut mass = 0.0;
    let mut unclamped = vec![false; target.len()];
    for i in 0..target.len() {
        if logp[i] >= floor {
            unclamped[i] = true;
            mass += target[i];
            value -= target[i] * logp[i];
        } else {
            value -= target[i] * floor;
        }
    }
    let grad = (0..target.len())
        .map(|j| {
            let own = if unclamped[j] { target[j] } else { 0.0 };
            (p[j] * mass - own) / t
        })
        .collect();
    LossValue { value, grad }
}

/// `Σ a log max(a, eps)`, the constant part of `D_KL(a ‖ ·)`.
fn neg_entropy_clamped(a: &[f64], eps_log: f64) -> f64 {
    a.iter()
        .map(|&ai| if ai == 0.0 { 0.0 } else { ai * ai.max(eps_log).ln() })
        .sum()
}

/// Plain cross-entropy `H(q, softmax(z))` with its logit gradient.
pub fn cross_entropy_loss(q: &Distribution, logits: &[f64]) -> Result<LossValue> {
    same_len(q.len(), logits.len())?;
    check_logits(logits)?;
    Ok(soft_cross_entropy(&q.probs, logits, 1.0, EPS_LOG))
}

/// Label-smoothing loss `(1 − α)·H(q, p) + α·D_KL(u, p)` with
/// `p = softmax(z)`.
pub fn ls_loss(q: &Distribution, logits: &[f64], cfg: &LossConfig) -> Result<LossValue> {
    cfg.validate()?;
    same_len(q.len(), logits.len())?;
    check_logits(logits)?;
    let c = logits.len();
    let a = cfg.alpha_ls;
    let hard = soft_cross_entropy(&q.probs, logits, 1.0, cfg.eps_log);
    if a == 0.0 {
        return Ok(hard);
    }
    let u = vec![1.0 / c as f64; c];
    let smooth = soft_cross_entropy(&u, logits, 1.0, cfg.eps_log);
    let kl_u = (smooth.value + neg_entropy_clamped(&u, cfg.eps_log)).max(0.0);
    Ok(LossValue {
        value: (1.0 - a) * hard.value + a * kl_u,
        grad: hard
            .grad
            .iter()
            .zip(&smooth.grad)
            .map(|(h, s)| (1.0 - a) * h + a * s)
            .collect(),
    })
}

/// Distillation loss `(1 − α)·H(q, p) + α·s·D_KL(p_T^t, p_T)` where
/// `p = softmax(z)`, `p_T = softmax(z / T)`, `p_T^t` is the teacher response
/// already softened at `T`, and `s = T²` when `kl_t_squared` is set (else 1).
pub fn kd_loss(
    q_true: &Distribution,
    teacher_probs_t: &Distribution,
    logits: &[f64],
    cfg: &LossConfig,
) -> Result<LossValue> {
    cfg.validate()?;
    same_len(q_true.len(), logits.len())?;
    same_len(teacher_probs_t.len(), logits.len())?;
    check_logits(logits)?;
    let a = cfg.alpha_kd;
    let t = cfg.temperature;
    let scale = if cfg.kl_t_squared { t * t } else { 1.0 };

    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    if a < 1.0 {
        let hard = soft_cross_entropy(&q_true.probs, logits, 1.0, cfg.eps_log);
        value += (1.0 - a) * hard.value;
        for (g, h) in grad.iter_mut().zip(&hard.grad) {
            *g += (1.0 - a) * h;
        }
    }
    if a > 0.0 {
        let soft = soft_cross_entropy(&teacher_probs_t.probs, logits, t, cfg.eps_log);
        let kl = (soft.value + neg_entropy_clamped(&teacher_probs_t.probs, cfg.eps_log)).max(0.0);
        value += a * scale * kl;
        for (g, s) in grad.iter_mut().zip(&soft.grad) {
            *g += a * scale * s;
        }
    }
    Ok(LossValue { value, grad })
}
