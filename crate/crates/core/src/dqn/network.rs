//! Fully connected Q-network with rectifier hidden layers and a linear
//! output layer, plus hand-written backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Dense layer `y = W x + b`. Weights are stored input-major:
/// `weights[i * outputs + j]` connects input `i` to output `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    /// Weight connecting input `i` to output `j`.
    pub fn weight(&self, j: usize, i: usize) -> f64 {
        self.weights[i * self.outputs + j]
    }

    pub fn set_weight(&mut self, j: usize, i: usize, value: f64) {
        self.weights[i * self.outputs + j] = value;
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            // Inputs are mostly sparse one-hot features or rectified units.
            if xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.outputs..(i + 1) * self.outputs];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

/// Which TD loss to minimise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    /// Huber with threshold 1.
    Huber,
}

impl LossKind {
    fn value_and_slope(self, err: f64) -> (f64, f64) {
        match self {
            LossKind::Mse => (err * err, 2.0 * err),
            LossKind::Huber => {
                if err.abs() <= 1.0 {
                    (0.5 * err * err, err)
                } else {
                    (err.abs() - 0.5, err.signum())
                }
            }
        }
    }
}

/// One regression example: push `Q(input)[action]` towards `target`.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub input: &'a [f64],
    pub action: usize,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    pub layers: Vec<Dense>,
}

impl QNetwork {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "a network needs at least an input and an output size");
        Self { layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() }
    }

    /// Uniform `+-sqrt(6 / (fan_in + fan_out))` hidden weights, zero
    /// biases and a zero output layer, so an untrained network predicts 0
    /// everywhere.
    pub fn init(sizes: &[usize], rng: &mut SimRng) -> Self {
        let mut net = Self::zeros(sizes);
        let last = net.layers.len() - 1;
        for layer in &mut net.layers[..last] {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-limit..limit);
            }
        }
        net
    }

    /// Uniform init on every layer including the output.
    pub fn init_all_layers(sizes: &[usize], rng: &mut SimRng) -> Self {
        let mut net = Self::zeros(sizes);
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-limit..limit);
            }
        }
        net
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in declared order: `W1, b1, W2, b2, ...`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("network parameters".into()))
        }
    }

    /// Action values `W3 relu(W2 relu(W1 x + b1) + b2) + b3`.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_dim());
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, &mut next);
            if k < last {
                next.iter_mut().for_each(|z| *z = z.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Activations after each layer (rectified for hidden layers).
    fn forward_trace(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward(&acts[k], &mut out);
            if k < last {
                out.iter_mut().for_each(|z| *z = z.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    /// Mean TD loss over `samples` without gradients.
    pub fn loss(&self, samples: &[Sample<'_>], kind: LossKind) -> f64 {
        samples.iter().map(|s| kind.value_and_slope(self.forward(s.input)[s.action] - s.target).0).sum::<f64>()
            / samples.len() as f64
    }

    /// Mean loss and its gradient, taken only through the selected action
    /// value of each sample.
    pub fn loss_and_gradient(&self, samples: &[Sample<'_>], kind: LossKind) -> (f64, QNetwork) {
        let mut grad = QNetwork::zeros(&self.sizes());
        let n = samples.len() as f64;
        let mut total = 0.0;
        for s in samples {
            let acts = self.forward_trace(s.input);
            let q = acts.last().expect("network has layers")[s.action];
            let (l, slope) = kind.value_and_slope(q - s.target);
            total += l;

            let mut delta = vec![0.0; self.output_dim()];
            delta[s.action] = slope / n;
            for k in (0..self.layers.len()).rev() {
                let layer = &self.layers[k];
                let g = &mut grad.layers[k];
                let input = &acts[k];
                for (gb, &d) in g.bias.iter_mut().zip(&delta) {
                    *gb += d;
                }
                for (i, &xi) in input.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let row = &mut g.weights[i * layer.outputs..(i + 1) * layer.outputs];
                    for (gw, &d) in row.iter_mut().zip(&delta) {
                        *gw += xi * d;
                    }
                }
                if k > 0 {
                    // Rectifier derivative: input[i] > 0 exactly when its
                    // pre-activation was positive.
                    let prev: Vec<f64> = (0..layer.inputs)
                        .map(|i| {
                            if input[i] > 0.0 {
                                let row = &layer.weights[i * layer.outputs..(i + 1) * layer.outputs];
                                row.iter().zip(&delta).map(|(w, d)| w * d).sum()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    delta = prev;
                }
            }
        }
        (total / n, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn zero_network_outputs_zero() {
        let net = QNetwork::zeros(&[208, 160, 160, 3]);
        let mut x = vec![0.0; 208];
        x[5] = 1.0;
        x[100] = 1.0;
        assert_eq!(net.forward(&x), vec![0.0, 0.0, 0.0]);
        assert_eq!(net.num_params(), 208 * 160 + 160 + 160 * 160 + 160 + 160 * 3 + 3);
    }

    #[test]
    fn random_network_is_finite_with_three_outputs() {
        let mut rng = rng_from_seed(1);
        let net = QNetwork::init_all_layers(&[208, 160, 160, 3], &mut rng);
        let x: Vec<f64> = (0..208).map(|i| if i % 16 == 3 { 1.0 } else { 0.0 }).collect();
        let q = net.forward(&x);
        assert_eq!(q.len(), 3);
        assert!(q.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn hand_computed_miniature() {
        // 2 -> 2 -> 2 -> 3 with W1 = 0, b1 = 1, W2 = [[2,0],[0,1]],
        // b2 = (-0.5, 0.25), W3 = [[1,0],[0,1],[1,-1]], b3 = (0, 1, 0.5).
        // h1 = relu(1, 1) = (1, 1); h2 = relu(1.5, 1.25);
        // out = (1.5, 1.25 + 1, 1.5 - 1.25 + 0.5) = (1.5, 2.25, 0.75).
        let mut net = QNetwork::zeros(&[2, 2, 2, 3]);
        net.layers[0].bias = vec![1.0, 1.0];
        net.layers[1].set_weight(0, 0, 2.0);
        net.layers[1].set_weight(1, 1, 1.0);
        net.layers[1].bias = vec![-0.5, 0.25];
        net.layers[2].set_weight(0, 0, 1.0);
        net.layers[2].set_weight(1, 1, 1.0);
        net.layers[2].set_weight(2, 0, 1.0);
        net.layers[2].set_weight(2, 1, -1.0);
        net.layers[2].bias = vec![0.0, 1.0, 0.5];
        assert_eq!(net.forward(&[0.3, -7.0]), vec![1.5, 2.25, 0.75]);

        // Negative pre-activation is rectified away.
        net.layers[1].bias = vec![-3.0, 0.25];
        assert_eq!(net.forward(&[0.0, 0.0]), vec![0.0, 2.25, -0.75]);
    }

    #[test]
    fn gradient_matches_finite_differences_on_small_net() {
        let mut rng = rng_from_seed(7);
        let mut net = QNetwork::init_all_layers(&[6, 5, 4, 3], &mut rng);
        for t in net.tensors_mut() {
            for x in t.iter_mut() {
                *x += rng.gen_range(-0.1..0.1);
            }
        }
        let inputs: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let samples: Vec<Sample> = inputs
            .iter()
            .enumerate()
            .map(|(k, x)| Sample { input: x, action: k % 3, target: rng.gen_range(-2.0..2.0) })
            .collect();
        for kind in [LossKind::Mse, LossKind::Huber] {
            let (_, grad) = net.loss_and_gradient(&samples, kind);
            let h = 1e-5;
            for (ti, g) in grad.tensors().iter().enumerate() {
                for (pi, &analytic) in g.iter().enumerate() {
                    let mut plus = net.clone();
                    plus.tensors_mut()[ti][pi] += h;
                    let mut minus = net.clone();
                    minus.tensors_mut()[ti][pi] -= h;
                    let numeric = (plus.loss(&samples, kind) - minus.loss(&samples, kind)) / (2.0 * h);
                    let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
                    assert!(rel < 1e-4, "{kind:?} tensor {ti} param {pi}: {analytic} vs {numeric}");
                }
            }
        }
    }
}
