//! Contrastive objectives with exact analytic gradients.
//!
//! Both losses share one kernel. For every anchor `t`, the other batch
//! elements `r != t` are split into positives `P(t)` and negatives `N(t)`,
//! with similarities `s_r = z_t . z_r / tau`. The anchor contributes
//!
//! ```text
//! w * -log( sum_P exp(s) / (sum_P exp(s) + sum_N exp(s)) )
//!   = w * softplus(lse_N(s) - lse_P(s))
//! ```
//!
//! which is evaluated with max-shifted log-sum-exps, so it stays finite for
//! similarities in the hundreds and is never negative.
//!
//! Supervised contrastive loss: positives are the same-label elements and
//! `w = 1/c` with `c = k + m - 1`, the `1/c` factor sitting outside the log.
//! NT-Xent: the single positive is the matched view and `w = 1`.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("need at least {needed} representations, got {got}")]
    TooFewItems { needed: usize, got: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(
        "every class must appear equally often; {class_count} classes with counts {min}..{max}"
    )]
    UnequalClassCounts {
        class_count: usize,
        min: usize,
        max: usize,
    },
    #[error("every class needs at least two members so that c = k+m-1 >= 1")]
    NoPositives,
    #[error("need at least two distinct classes")]
    SingleClass,
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("annealing step {step} exceeds total {total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("mean of an empty set of representations")]
    EmptyTask,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau_con: f64,
    pub tau_task: f64,
    pub tau_inst: f64,
    pub alpha0: f64,
    pub alpha_floor: f64,
    pub beta: f64,
    pub n_task: usize,
    pub n_inst: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_con: 5.0,
            tau_task: 7.0,
            tau_inst: 7.0,
            alpha0: 0.95,
            alpha_floor: 0.5,
            beta: 0.1,
            n_task: 10,
            n_inst: 10,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        for tau in [self.tau_con, self.tau_task, self.tau_inst] {
            check_tau(tau)?;
        }
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0) {
            return Err(LossError::InvalidConfig(format!(
                "alpha0 must lie in (0, 1], got {}",
                self.alpha0
            )));
        }
        if !(self.alpha_floor >= 0.0 && self.alpha_floor <= self.alpha0) {
            return Err(LossError::InvalidConfig(format!(
                "alpha_floor must lie in [0, alpha0], got {}",
                self.alpha_floor
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Loss value and one gradient per input representation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

impl LossOutput {
    fn zeros(count: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            grads: vec![vec![0.0; dim]; count],
        }
    }

    fn checked(self) -> Result<Self, LossError> {
        if !self.value.is_finite() {
            return Err(LossError::NonFinite("loss value"));
        }
        if self.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(LossError::NonFinite("loss gradient"));
        }
        Ok(self)
    }
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::InvalidTemperature(tau))
    }
}

fn common_dim(reps: &[Vec<f64>]) -> Result<usize, LossError> {
    let dim = reps.first().map_or(0, Vec::len);
    if reps.iter().any(|r| r.len() != dim) {
        return Err(LossError::LengthMismatch(
            "representations differ in dimension".into(),
        ));
    }
    Ok(dim)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Shared anchor loop; see the module docs.
fn contrastive_kernel(
    reps: &[Vec<f64>],
    tau: f64,
    weight: f64,
    is_positive: impl Fn(usize, usize) -> bool,
) -> LossOutput {
    let n = reps.len();
    let dim = reps.first().map_or(0, Vec::len);
    let mut out = LossOutput::zeros(n, dim);
    let mut sims = vec![0.0; n];
    for t in 0..n {
        for r in 0..n {
            sims[r] = if r == t {
                0.0
            } else {
                dot(&reps[t], &reps[r]) / tau
            };
        }
        let others = (0..n).filter(|&r| r != t);
        let pos = others
            .clone()
            .filter(|&r| is_positive(t, r))
            .map(|r| sims[r]);
        let neg = others
            .clone()
            .filter(|&r| !is_positive(t, r))
            .map(|r| sims[r]);
        let lse_pos = log_sum_exp(pos);
        let lse_neg = log_sum_exp(neg);
        if lse_neg == f64::NEG_INFINITY {
            // ratio is exactly 1
            continue;
        }
        let gap = lse_neg - lse_pos;
        out.value += weight * softplus(gap);

        // d/ds_r: -sigmoid(gap) * softmax_P(r) for positives,
        //          sigmoid(gap) * softmax_N(r) for negatives
        let mass = sigmoid(gap) * weight / tau;
        for r in others {
            let coef = if is_positive(t, r) {
                -mass * (sims[r] - lse_pos).exp()
            } else {
                mass * (sims[r] - lse_neg).exp()
            };
            if coef == 0.0 {
                continue;
            }
            let (zt, zr) = (&reps[t], &reps[r]);
            for j in 0..dim {
                out.grads[t][j] += coef * zr[j];
                out.grads[r][j] += coef * zt[j];
            }
        }
    }
    out
}

/// Supervised contrastive loss over a combined support+query batch.
///
/// The anchor is excluded from both sums. Every class must occur the same
/// number of times (`k + m`), at least twice, and at least two classes must
/// be present.
pub fn supcon_loss<L: Eq + Hash>(
    reps: &[Vec<f64>],
    labels: &[L],
    tau: f64,
) -> Result<LossOutput, LossError> {
    check_tau(tau)?;
    if reps.len() < 2 {
        return Err(LossError::TooFewItems {
            needed: 2,
            got: reps.len(),
        });
    }
    if labels.len() != reps.len() {
        return Err(LossError::LengthMismatch(format!(
            "{} representations, {} labels",
            reps.len(),
            labels.len()
        )));
    }
    common_dim(reps)?;

    let mut counts: HashMap<&L, usize> = HashMap::new();
    for l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    if counts.len() < 2 {
        return Err(LossError::SingleClass);
    }
    let min = *counts.values().min().unwrap();
    let max = *counts.values().max().unwrap();
    if min != max {
        return Err(LossError::UnequalClassCounts {
            class_count: counts.len(),
            min,
            max,
        });
    }
    let c = min - 1;
    if c == 0 {
        return Err(LossError::NoPositives);
    }

    contrastive_kernel(reps, tau, 1.0 / c as f64, |t, r| labels[t] == labels[r]).checked()
}

/// NT-Xent over `N` matched pairs `(originals[u], views[u])`.
///
/// The `2N` elements are laid out as all originals followed by all views,
/// and the returned gradients follow the same order. Each anchor's
/// negatives are every element except itself and its match.
pub fn ntxent_loss(
    originals: &[Vec<f64>],
    views: &[Vec<f64>],
    tau: f64,
) -> Result<LossOutput, LossError> {
    check_tau(tau)?;
    if originals.is_empty() {
        return Err(LossError::TooFewItems { needed: 1, got: 0 });
    }
    if originals.len() != views.len() {
        return Err(LossError::LengthMismatch(format!(
            "{} originals, {} views",
            originals.len(),
            views.len()
        )));
    }
    let n = originals.len();
    let batch: Vec<Vec<f64>> = originals.iter().chain(views).cloned().collect();
    common_dim(&batch)?;
    let matched = |e: usize| if e < n { e + n } else { e - n };
    contrastive_kernel(&batch, tau, 1.0, |t, r| r == matched(t)).checked()
}

/// Mean of a task's member representations.
pub fn task_representation(members: &[Vec<f64>]) -> Result<Vec<f64>, LossError> {
    let dim = common_dim(members)?;
    if members.is_empty() {
        return Err(LossError::EmptyTask);
    }
    let mut mean = vec![0.0; dim];
    for m in members {
        for (acc, x) in mean.iter_mut().zip(m) {
            *acc += x;
        }
    }
    let len = members.len() as f64;
    mean.iter_mut().for_each(|x| *x /= len);
    Ok(mean)
}

/// Linear decay of the supervised weight from `alpha0` to `alpha_floor`.
pub fn anneal_alpha(step: u64, total_steps: u64, cfg: &LossConfig) -> Result<f64, LossError> {
    if step > total_steps || total_steps == 0 {
        return Err(LossError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if step == total_steps {
        return Ok(cfg.alpha_floor);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(cfg.alpha0 + (cfg.alpha_floor - cfg.alpha0) * frac)
}

/// `alpha * con + (1 - alpha) * inst + beta * task`.
///
/// Gradients are concatenated in the order con, inst, task, each scaled by
/// its coefficient. A missing component contributes exactly zero.
pub fn total_loss(
    con: &LossOutput,
    inst: Option<&LossOutput>,
    task: Option<&LossOutput>,
    alpha: f64,
    beta: f64,
) -> LossOutput {
    let inst_w = 1.0 - alpha;
    let inst_v = inst.map_or(0.0, |l| l.value);
    let task_v = task.map_or(0.0, |l| l.value);
    let value = alpha * con.value + inst_w * inst_v + beta * task_v;

    let scaled = |l: &LossOutput, w: f64| -> Vec<Vec<f64>> {
        l.grads
            .iter()
            .map(|g| g.iter().map(|x| x * w).collect())
            .collect()
    };
    let mut grads = scaled(con, alpha);
    if let Some(l) = inst {
        grads.extend(scaled(l, inst_w));
    }
    if let Some(l) = task {
        grads.extend(scaled(l, beta));
    }
    LossOutput { value, grads }
}
