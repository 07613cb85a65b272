use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2-norm clip applied before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// First/second moment estimates per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied {
        grad_norm: f64,
    },
    /// Non-finite gradient; parameters and state untouched.
    Skipped,
}

/// Euclidean norm over all gradient elements.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<StepOutcome> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        log::warn!("non-finite gradient norm; skipping update");
        return Ok(StepOutcome::Skipped);
    }
    let scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let n = p.numel();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        for j in 0..n {
            let gj = g.data()[j].f64() * scale;
            let mj = cfg.beta1 * state.m[i].data()[j].f64() + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * state.v[i].data()[j].f64() + (1.0 - cfg.beta2) * gj * gj;
            let update = cfg.lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            m.push(T::c(mj));
            v.push(T::c(vj));
            x.push(T::c(p.data()[j].f64() - update));
        }
        state.m[i].set_values(m)?;
        state.v[i].set_values(v)?;
        p.set_values(x)?;
    }
    Ok(StepOutcome::Applied { grad_norm: norm })
}
