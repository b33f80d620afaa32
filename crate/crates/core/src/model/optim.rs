//! Adam with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::params::{cast, Gradients, Real, Weights};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `lr(step) = base * (1 + cos(pi * step / total)) / 2`, constant at 0 once
/// `step >= total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        Self { base_lr, total_steps }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub m: Weights<F>,
    pub v: Weights<F>,
    /// Number of updates applied so far.
    pub step: u64,
    pub schedule: CosineSchedule,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(like: &Weights<F>, schedule: CosineSchedule) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
            schedule,
        }
    }

    /// Learning rate of the next update.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }
}

/// One Adam update at the scheduled learning rate, followed by decoupled
/// weight decay `w -= lr * weight_decay * w`.
pub fn adam_step<F: Real>(
    weights: &mut Weights<F>,
    grads: &Gradients<F>,
    state: &mut OptimizerState<F>,
    weight_decay: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let lr = state.current_lr();
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    let (b1, b2) = (cast::<F>(BETA1), cast::<F>(BETA2));
    let (one_b1, one_b2) = (cast::<F>(1.0 - BETA1), cast::<F>(1.0 - BETA2));
    let step_size = cast::<F>(lr / bc1);
    let bc2_sqrt = cast::<F>(bc2.sqrt());
    let eps = cast::<F>(ADAM_EPS);
    let decay = cast::<F>(lr * weight_decay);

    let params = weights.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in params.into_iter().zip(grads.0.tensors()).zip(ms).zip(vs) {
        if p.shape != g.shape {
            return Err(Error::Dimension(format!("gradient shape mismatch for {name}")));
        }
        for (((w, &gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let denom = vi.sqrt() / bc2_sqrt + eps;
            *w = *w - step_size * *mi / denom - decay * *w;
        }
    }
    Ok(())
}
