use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers for every parameter plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |_| Vec::new();
        let mut s = Self {
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        };
        for (i, p) in store.iter().enumerate() {
            s.m[i] = vec![0.0; p.value.numel()];
            s.v[i] = vec![0.0; p.value.numel()];
        }
        s
    }
}

/// Adam with decoupled weight decay, applied to every parameter's accumulated gradient.
///
/// Gradients are checked for finiteness before any parameter is touched.
pub fn adamw_step(store: &mut ParamStore, state: &mut AdamWState, cfg: &AdamWConfig) -> Result<()> {
    if cfg.lr < 0.0 || !cfg.lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be >= 0, got {}", cfg.lr)));
    }
    for p in store.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFiniteGrad(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let grad = store.grad(id).data().to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let value = store.value_mut(id).data_mut();
        for j in 0..value.len() {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            value[j] -= cfg.lr * cfg.weight_decay * value[j];
            value[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
