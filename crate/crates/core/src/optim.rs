use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::TensorMap;
use crate::nn::is_trainable;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Buffers (see [`is_trainable`]) and parameters
/// without a gradient are left untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut TensorMap<f64>, grads: &TensorMap<f64>) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            if !is_trainable(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

impl Adam {
    /// Clears the moment estimates of rows `rows` of a `[_, width]` parameter,
    /// used when those rows are re-initialized outside the optimizer.
    pub fn reset_rows(&mut self, name: &str, rows: &[usize], width: usize) {
        for state in [&mut self.m, &mut self.v] {
            if let Some(s) = state.get_mut(name) {
                for &r in rows {
                    s[r * width..(r + 1) * width].fill(0.0);
                }
            }
        }
    }
}

/// Rounds every value to the nearest f32, the precision parameters are
/// stored at.
pub fn round_to_f32(params: &mut TensorMap<f64>) {
    for t in params.values_mut() {
        *t = t.cast::<f32>().cast::<f64>();
    }
}

pub fn zeros_like(params: &TensorMap<f64>) -> TensorMap<f64> {
    params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect()
}
