//! AdamW with decoupled weight decay and the warmup+cosine schedule.

use ndarray::Array2;

use super::params::ParamSet;
use crate::util::quantize_f32;
use crate::{Error, Result};

/// Optimizer state: one first/second-moment accumulator per parameter,
/// aligned with [`ParamSet`] ids.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWState {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let m = params.ids().map(|id| Array2::zeros(params.value(id).raw_dim())).collect();
        let v = params.ids().map(|id| Array2::zeros(params.value(id).raw_dim())).collect();
        AdamWState { m, v, step: 0, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One optimizer step over every parameter. Gradients are zeroed afterwards.
///
/// Updated values and moments are rounded to the nearest f32 before being
/// stored back, so a checkpoint written in f32 reloads to bit-identical
/// state and training replays exactly across save/resume.
pub fn adamw_step(params: &mut ParamSet, state: &mut AdamWState, lr: f64) -> Result<()> {
    if let Some(name) = params.find_nonfinite_grad() {
        return Err(Error::NonFiniteGrad { param: name.to_string() });
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for id in params.ids().collect::<Vec<_>>() {
        let i = id.index();
        let grad = params.grad(id).clone();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        azip_update(m, &grad, state.beta1);
        for (vv, g) in v.iter_mut().zip(grad.iter()) {
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * g * g;
        }
        let value = params.value_mut(id);
        for ((x, mm), vv) in value.iter_mut().zip(m.iter()).zip(v.iter()) {
            let m_hat = mm / bc1;
            let v_hat = vv / bc2;
            let step = lr * (m_hat / (v_hat.sqrt() + state.eps) + state.weight_decay * *x);
            *x = quantize_f32(*x - step);
        }
        m.mapv_inplace(quantize_f32);
        v.mapv_inplace(quantize_f32);
    }
    params.zero_grads();
    Ok(())
}

fn azip_update(m: &mut Array2<f64>, grad: &Array2<f64>, beta: f64) {
    for (mm, g) in m.iter_mut().zip(grad.iter()) {
        *mm = beta * *mm + (1.0 - beta) * g;
    }
}

/// Linear warmup to `max_lr`, cosine decay to `min_lr`, then flat.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub max_lr: f64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.min_lr > self.max_lr {
            return Err(Error::Config(format!(
                "min_lr {} exceeds max_lr {}",
                self.min_lr, self.max_lr
            )));
        }
        Ok(())
    }
}

pub fn lr_at(schedule: &LrSchedule, step: u64) -> f64 {
    if step < schedule.warmup_steps {
        return schedule.max_lr * step as f64 / schedule.warmup_steps as f64;
    }
    if step >= schedule.total_steps {
        return schedule.min_lr;
    }
    let span = (schedule.total_steps - schedule.warmup_steps) as f64;
    let progress = (step - schedule.warmup_steps) as f64 / span;
    let cos = (std::f64::consts::PI * progress).cos();
    schedule.min_lr + 0.5 * (schedule.max_lr - schedule.min_lr) * (1.0 + cos)
}
