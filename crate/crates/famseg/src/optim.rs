//! Optimizers and learning-rate schedules: plain/momentum SGD, Adam, AdamW
//! with decoupled decay, batch-adaptive learning-rate clamping, and the
//! step/cosine/adadelta-style decay rules used by the phase schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FamError, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptKind {
    Sgd,
    Adam,
    AdamW,
}

impl OptKind {
    pub fn tag(self) -> &'static str {
        match self {
            OptKind::Sgd => "sgd",
            OptKind::Adam => "adam",
            OptKind::AdamW => "adamw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptKind::Sgd),
            "adam" => Some(OptKind::Adam),
            "adamw" => Some(OptKind::AdamW),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecayKind {
    Step,
    Cosine,
    /// Constant global rate with a per-parameter RMS-ratio adaptation
    /// (accumulated squared gradients vs accumulated squared updates)
    /// applied inside the optimizer in place of a schedule.
    Adadelta,
}

impl DecayKind {
    pub fn tag(self) -> &'static str {
        match self {
            DecayKind::Step => "step",
            DecayKind::Cosine => "cos",
            DecayKind::Adadelta => "adadelta",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "step" => Some(DecayKind::Step),
            "cos" | "cosine" => Some(DecayKind::Cosine),
            "adadelta" => Some(DecayKind::Adadelta),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Phase {
    pub opt: OptKind,
    pub epochs: usize,
    pub decay: DecayKind,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Schedule {
    pub phases: Vec<Phase>,
    pub init_lr: f64,
    pub min_lr: f64,
    pub lr_limit_max: f64,
    pub lr_limit_min: f64,
    pub batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            phases: vec![
                Phase { opt: OptKind::AdamW, epochs: 15, decay: DecayKind::Cosine },
                Phase { opt: OptKind::Sgd, epochs: 5, decay: DecayKind::Cosine },
            ],
            init_lr: 0.01,
            min_lr: 0.0001,
            lr_limit_max: 0.001,
            lr_limit_min: 0.0001,
            batch_size: 8,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(FamError::Config("schedule needs at least one phase".into()));
        }
        if self.phases.iter().any(|p| p.epochs == 0) {
            return Err(FamError::Config("every phase needs epochs >= 1".into()));
        }
        if !(self.init_lr >= self.min_lr && self.min_lr > 0.0) {
            return Err(FamError::Config("require init_lr >= min_lr > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(FamError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    /// Batch-adapted learning-rate bounds for this schedule.
    pub fn fitted_lr(&self) -> (f64, f64) {
        lr_fit(
            self.batch_size as f64,
            self.init_lr,
            self.min_lr,
            self.lr_limit_max,
            self.lr_limit_min,
        )
    }
}

/// Batch-adaptive clamping of the initial and minimum learning rates:
///
/// ```text
/// init_lr_fit = min(max(batch/64 * init_lr, lr_limit_min), lr_limit_max)
/// min_lr_fit  = min(max(batch/64 * min_lr, lr_limit_min/100), lr_limit_max/100)
/// ```
pub fn lr_fit(batch_size: f64, init_lr: f64, min_lr: f64, lr_limit_max: f64, lr_limit_min: f64) -> (f64, f64) {
    let scale = batch_size / 64.0;
    let init_fit = (scale * init_lr).max(lr_limit_min).min(lr_limit_max);
    let min_fit = (scale * min_lr).max(lr_limit_min / 100.0).min(lr_limit_max / 100.0);
    (init_fit, min_fit)
}

/// Global learning rate for `epoch` of `total_epochs` under the decay rule.
/// Step decay drops 10× at 60% and again at 85% of the phase; cosine anneals
/// from `lr_max` to `lr_min`; the adadelta-style rule keeps `lr_max` and
/// defers adaptation to the optimizer.
pub fn decay_lr(kind: DecayKind, epoch: usize, total_epochs: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(FamError::Invalid {
            op: "decay_lr",
            detail: format!("epoch {epoch} out of range 0..{total_epochs}"),
        });
    }
    Ok(match kind {
        DecayKind::Cosine => {
            let progress = epoch as f64 / total_epochs as f64;
            lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
        }
        DecayKind::Step => {
            let m1 = (total_epochs as f64 * 0.6).floor() as usize;
            let m2 = (total_epochs as f64 * 0.85).floor() as usize;
            let mut lr = lr_max;
            if epoch >= m1 {
                lr *= 0.1;
            }
            if epoch >= m2 {
                lr *= 0.1;
            }
            lr
        }
        DecayKind::Adadelta => lr_max,
    })
}

// ---------------------------------------------------------------------------
// single-array update rules

/// Plain (mu = 0) or momentum SGD: `b <- mu*b + g`, `theta <- theta - lr*b`.
pub fn sgd_step(theta: &mut [f64], grad: &[f64], buf: &mut [f64], lr: f64, mu: f64) {
    assert_eq!(theta.len(), grad.len());
    if mu == 0.0 {
        for (t, &g) in theta.iter_mut().zip(grad) {
            *t -= lr * g;
        }
    } else {
        for ((t, &g), b) in theta.iter_mut().zip(grad).zip(buf.iter_mut()) {
            *b = mu * *b + g;
            *t -= lr * *b;
        }
    }
}

/// One Adam step; `t` is the already-incremented step count used for bias
/// correction. Returns the applied update in `delta` when provided.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// AdamW: the Adam update plus decoupled decay `- lr * lambda * theta_t`
/// evaluated at the pre-update parameter value.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lambda: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let decay = lr * lambda * theta[i];
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps) + decay;
    }
}

// ---------------------------------------------------------------------------
// named-parameter optimizer

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, momentum: 0.9 }
    }
}

const ADADELTA_RHO: f64 = 0.95;
const ADADELTA_EPS: f64 = 1e-6;

/// Per-parameter optimizer state: first/second moments (or the SGD momentum
/// buffer in `m`), the shared step counter, and the RMS accumulators for the
/// adadelta-style decay rule.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub acc_grad: BTreeMap<String, Vec<f64>>,
    pub acc_update: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

pub struct Optimizer {
    pub kind: OptKind,
    pub hp: HyperParams,
    pub adaptive_rate: bool,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptKind, hp: HyperParams, decay: DecayKind) -> Self {
        Optimizer { kind, hp, adaptive_rate: decay == DecayKind::Adadelta, state: OptimizerState::default() }
    }

    /// Apply one update to every parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.state.t += 1;
        let t = self.state.t;
        let hp = self.hp.clone();
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| FamError::Incompatible(format!("gradient for unknown parameter `{name}`")))?;
            if param.data.len() != grad.len() {
                return Err(FamError::Shape {
                    op: "optimizer_step",
                    detail: format!("grad len {} vs param len {} for `{name}`", grad.len(), param.data.len()),
                });
            }
            let n = param.data.len();
            let before: Option<Vec<f64>> = if self.adaptive_rate { Some(param.data.clone()) } else { None };
            match self.kind {
                OptKind::Sgd => {
                    let buf = self.state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    sgd_step(&mut param.data, grad, buf, lr, hp.momentum);
                }
                OptKind::Adam => {
                    let mut m = self.state.m.remove(name).unwrap_or_else(|| vec![0.0; n]);
                    let mut v = self.state.v.remove(name).unwrap_or_else(|| vec![0.0; n]);
                    adam_step(&mut param.data, grad, &mut m, &mut v, t, lr, hp.beta1, hp.beta2, hp.eps);
                    self.state.m.insert(name.clone(), m);
                    self.state.v.insert(name.clone(), v);
                }
                OptKind::AdamW => {
                    let mut m = self.state.m.remove(name).unwrap_or_else(|| vec![0.0; n]);
                    let mut v = self.state.v.remove(name).unwrap_or_else(|| vec![0.0; n]);
                    adamw_step(
                        &mut param.data,
                        grad,
                        &mut m,
                        &mut v,
                        t,
                        lr,
                        hp.beta1,
                        hp.beta2,
                        hp.eps,
                        hp.weight_decay,
                    );
                    self.state.m.insert(name.clone(), m);
                    self.state.v.insert(name.clone(), v);
                }
            }
            if let Some(before) = before {
                // RMS-ratio rule: rescale the raw update per element by
                // sqrt(acc_update + eps) / sqrt(acc_grad + eps)
                let acc_g = self.state.acc_grad.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                let acc_u = self.state.acc_update.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                for i in 0..n {
                    acc_g[i] = ADADELTA_RHO * acc_g[i] + (1.0 - ADADELTA_RHO) * grad[i] * grad[i];
                    let raw = param.data[i] - before[i];
                    let ratio = ((acc_u[i] + ADADELTA_EPS).sqrt()) / ((acc_g[i] + ADADELTA_EPS).sqrt());
                    let update = raw * ratio;
                    acc_u[i] = ADADELTA_RHO * acc_u[i] + (1.0 - ADADELTA_RHO) * update * update;
                    param.data[i] = before[i] + update;
                }
            }
        }
        Ok(())
    }
}
