//! Adam optimizer over a [`QNetwork`]'s parameter tensors.

use serde::{Deserialize, Serialize};

use super::network::QNetwork;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: QNetwork,
    pub v: QNetwork,
}

impl Adam {
    pub fn new(like: &QNetwork, learning_rate: f64) -> Self {
        let sizes = like.sizes();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: QNetwork::zeros(&sizes),
            v: QNetwork::zeros(&sizes),
        }
    }

    pub fn apply(&mut self, params: &mut QNetwork, grad: &QNetwork) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let grads = grad.tensors();
        for (((p, m), v), g) in
            params.tensors_mut().into_iter().zip(self.m.tensors_mut()).zip(self.v.tensors_mut()).zip(grads)
        {
            for i in 0..p.len() {
                let gi = g[i];
                if gi == 0.0 && m[i] == 0.0 && v[i] == 0.0 {
                    continue;
                }
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
