//! Adam with the warmup / inverse-square-root learning-rate schedule.

use super::{ParamSet, Result, Tensor, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// Optimizer state for one `ParamSet`. Moment buffers are allocated lazily
/// shape-matched on the first step.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl OptimState {
    pub fn new(base_lr: f64, warmup_steps: u64) -> Self {
        OptimState {
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            base_lr,
            warmup_steps,
        }
    }

    /// Learning rate used by the *next* update (1-based step).
    pub fn next_lr(&self) -> f64 {
        lr_schedule(self.base_lr, self.step + 1, self.warmup_steps)
    }
}

/// base_lr * min(step^-0.5, step * warmup^-1.5); the two branches meet at
/// step == warmup.
pub fn lr_schedule(base_lr: f64, step: u64, warmup_steps: u64) -> f64 {
    let s = step as f64;
    let w = warmup_steps as f64;
    base_lr * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

/// One Adam update over every parameter; increments `state.step`.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    assert_eq!(grads.len(), params.len(), "gradient count mismatch");
    if state.first_moment.is_empty() {
        state.first_moment = params.zero_grads();
        state.second_moment = params.zero_grads();
    }
    for (idx, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(TensorError::NonFinite {
                context: format!("gradient of parameter {}", params.name(idx)),
            });
        }
    }
    state.step += 1;
    let t = state.step;
    let lr = lr_schedule(state.base_lr, t, state.warmup_steps);
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for idx in 0..params.len() {
        let g = &grads[idx];
        let m = &mut state.first_moment[idx];
        let v = &mut state.second_moment[idx];
        let p = params.get_mut(idx);
        for i in 0..p.data.len() {
            m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * g.data[i];
            v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * g.data[i] * g.data[i];
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
