use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::heads::{HeadParams, ParamKind};

/// Optimization settings for distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            peak_lr: 1e-4,
            warmup_fraction: 0.10,
            total_steps: 1000,
            weight_decay: 0.01,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be at least 1"));
        }
        // zero is allowed: it freezes the head, which is handy for audits
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::config(format!("peak_lr must be non-negative, got {}", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        Ok(())
    }

    /// `round(warmup_fraction · total_steps)`, kept below `total_steps`.
    pub fn warmup_steps(&self) -> usize {
        let w = (self.warmup_fraction * self.total_steps as f64).round() as usize;
        w.min(self.total_steps.saturating_sub(1))
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at_step(step: usize, config: &TrainConfig) -> Result<f64> {
    let total = config.total_steps;
    if step > total {
        return Err(Error::contract(format!("lr_at_step: step {step} beyond total {total}")));
    }
    let warmup = config.warmup_steps();
    let peak = config.peak_lr;
    Ok(if step < warmup {
        peak * (step as f64 / warmup as f64)
    } else {
        peak * ((total - step) as f64 / (total - warmup) as f64)
    })
}

/// First and second moment estimates, one pair per head tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

/// One adaptive-moment update with decoupled weight decay.
///
/// Decay `w ← w·(1 − lr·λ)` touches weight matrices (including the residual
/// upcast) but never biases or α.
pub fn optimizer_step(
    params: &mut HeadParams,
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if grads.len() != tensors.len() {
        return Err(Error::contract(format!(
            "optimizer_step: {} gradients for {} tensors",
            grads.len(),
            tensors.len()
        )));
    }
    for (g, (_, w)) in grads.iter().zip(&tensors) {
        if g.shape() != w.shape() {
            return Err(Error::Shape {
                op: "optimizer_step",
                left: w.shape(),
                right: g.shape(),
            });
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let decay = 1.0 - lr * config.weight_decay;

    for (i, (kind, w)) in tensors.iter_mut().enumerate() {
        let decayed = *kind == ParamKind::Weight;
        let (m, v) = (state.m[i].values_mut(), state.v[i].values_mut());
        for (j, (wj, &gj)) in w.values_mut().iter_mut().zip(grads[i].values()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            if decayed {
                *wj *= decay;
            }
            *wj -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + config.eps);
        }
    }
    Ok(())
}
