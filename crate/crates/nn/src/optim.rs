//! AdamW with decoupled weight decay.

use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamWState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

/// One AdamW update of a flat parameter buffer.
///
/// `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`, then with bias-corrected
/// `m̂, v̂`: `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ`. `step` is the 1-based index
/// of this update.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    cfg: &AdamWConfig,
    lr: f32,
    weight_decay: f32,
) {
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(step as i32);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(step as i32);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] as f64 / bc1;
        let v_hat = v[i] as f64 / bc2;
        let update = m_hat / (v_hat.sqrt() + cfg.eps as f64);
        let th = theta[i] as f64;
        theta[i] = (th - lr as f64 * update - lr as f64 * weight_decay as f64 * th) as f32;
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: AdamWState::default(),
        }
    }

    /// Applies one update to every trainable parameter using its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) {
        if self.state.m.len() != store.len() {
            self.state.m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.state.v = self.state.m.clone();
        }
        self.state.step += 1;
        let step = self.state.step;
        let cfg = self.config;
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let wd = if p.decay { cfg.weight_decay } else { 0.0 };
            let lr = lr * p.lr_scale;
            let grad = p.grad.data().to_vec();
            adamw_update(
                p.value.data_mut(),
                &grad,
                self.state.m[i].data_mut(),
                self.state.v[i].data_mut(),
                step,
                &cfg,
                lr,
                wd,
            );
        }
    }
}
