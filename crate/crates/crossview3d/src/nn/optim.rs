//! AdamW with decoupled weight decay and global-norm gradient clipping.

use super::params::ParamStore;
use super::tensor::Tensor;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64, clip_norm: f64) -> Self {
        let m = (0..store.len())
            .map(|i| Tensor::zeros(&store.tensor_at(i).shape))
            .collect();
        let v = (0..store.len())
            .map(|i| Tensor::zeros(&store.tensor_at(i).shape))
            .collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm,
            step: 0,
            m,
            v,
        }
    }

    /// Applies one update. `grads` is aligned with the store's parameter
    /// order; `None` entries (parameters untouched this step) are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [Option<Tensor>]) {
        assert_eq!(grads.len(), store.len());
        if self.clip_norm > 0.0 {
            let sq: f64 = grads
                .iter()
                .flatten()
                .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
                .sum();
            let norm = sq.sqrt();
            if norm > self.clip_norm {
                let s = self.clip_norm / norm;
                for g in grads.iter_mut().flatten() {
                    for v in g.data.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.tensor_at_mut(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * g.data[j];
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * g.data[j] * g.data[j];
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= self.lr * (mhat / (vhat.sqrt() + self.eps))
                    + self.lr * self.weight_decay * p.data[j];
            }
        }
    }
}
