//! AdamW with decoupled weight decay and the warmup-then-cosine schedule.

use crate::error::{Error, Result};

use super::matrix::Matrix;

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl OptimizerState {
    /// Zero moments for parameters of the given shapes, with the default
    /// hyperparameters β1 = 0.9, β2 = 0.999, ε = 1e-8 and no weight decay.
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        OptimizerState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            first: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update. `params` pairs each parameter with its name, which is
/// used to report non-finite gradients. Nothing is modified if any gradient
/// is rejected.
pub fn adamw_step(
    params: &mut [(String, &mut Matrix)],
    grads: &[Matrix],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        ));
    }
    for ((name, p), (g, m)) in params.iter().zip(grads.iter().zip(&state.first)) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("parameter `{name}` {:?}, gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (idx, (_, p)) in params.iter_mut().enumerate() {
        let g = grads[idx].data();
        let m = state.first[idx].data_mut();
        let v = state.second[idx].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + state.eps) + state.weight_decay * *w);
        }
    }
    Ok(())
}

/// Learning rate at `step`: linear ramp from 0 over `warmup_ratio · total`
/// steps, then cosine decay reaching 0 at `total`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Invalid("learning-rate schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Invalid(format!("step {step} beyond total {total_steps}")));
    }
    let total = total_steps as f64;
    let warmup = warmup_ratio * total;
    let s = step as f64;
    if s < warmup {
        return Ok(base_lr * s / warmup);
    }
    let span = total - warmup;
    if span <= 0.0 {
        return Ok(0.0);
    }
    let progress = (s - warmup) / span;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
