use serde::{Deserialize, Serialize};

use super::mlp::Mlp;

/// Bias-corrected Adam moments for one [`Mlp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        let sizes: Vec<usize> = net
            .layers()
            .iter()
            .flat_map(|l| [l.weight.as_slice().len(), l.bias.len()])
            .collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, net: &mut Mlp) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let update = |params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64]| {
            debug_assert_eq!(params.len(), m.len());
            for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for (idx, layer) in net.layers_mut().iter_mut().enumerate() {
            let (mw, mb) = self.first[2 * idx..2 * idx + 2].split_at_mut(1);
            let (vw, vb) = self.second[2 * idx..2 * idx + 2].split_at_mut(1);
            if let Some(g) = layer.grad_weight.as_ref() {
                update(layer.weight.as_mut_slice(), g.as_slice(), &mut mw[0], &mut vw[0]);
            }
            if let Some(g) = layer.grad_bias.as_ref() {
                update(&mut layer.bias, g, &mut mb[0], &mut vb[0]);
            }
        }
        net.zero_grad();
    }
}
