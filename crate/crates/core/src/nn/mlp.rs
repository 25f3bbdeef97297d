use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{MtdmlError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    Softplus,
}

/// Numerically stable `ln(1 + e^z)`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    (-z.abs()).exp().ln_1p() + z.max(0.0)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
            Activation::Softplus => sigmoid(z),
        }
    }
}

/// Layer widths from input to output, with one activation per weight layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        let spec = MlpSpec {
            layer_widths,
            activations,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `hidden` activation on every layer but the last, which gets `output`.
    pub fn uniform(layer_widths: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        let n = layer_widths.len().saturating_sub(1);
        let activations = (0..n)
            .map(|i| if i + 1 == n { output } else { hidden })
            .collect();
        Self::new(layer_widths, activations)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(MtdmlError::Config(
                "an MLP needs an input width and at least one layer".into(),
            ));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(MtdmlError::Config("MLP widths must be >= 1".into()));
        }
        if self.activations.len() != self.layer_widths.len() - 1 {
            return Err(MtdmlError::dim(
                "MlpSpec activations",
                self.layer_widths.len() - 1,
                self.activations.len(),
            ));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }
}

/// One affine layer, `z = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    #[serde(skip)]
    pub grad_weight: Option<Tensor2>,
    #[serde(skip)]
    pub grad_bias: Option<Vec<f64>>,
}

impl Layer {
    fn new(weight: Tensor2, bias: Vec<f64>) -> Self {
        let grad_weight = Some(Tensor2::zeros(weight.rows(), weight.cols()));
        let grad_bias = Some(vec![0.0; bias.len()]);
        Layer {
            weight,
            bias,
            grad_weight,
            grad_bias,
        }
    }

    pub fn grad_weight(&self) -> &Tensor2 {
        self.grad_weight.as_ref().expect("gradient buffers allocated")
    }

    pub fn grad_bias(&self) -> &[f64] {
        self.grad_bias.as_ref().expect("gradient buffers allocated")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MlpRepr {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Dense feed-forward network with per-layer gradient buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr", into = "MlpRepr")]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = MtdmlError;

    fn try_from(repr: MlpRepr) -> Result<Self> {
        Mlp::from_layers(
            repr.spec,
            repr.layers
                .into_iter()
                .map(|l| (l.weight, l.bias))
                .collect(),
        )
    }
}

impl From<Mlp> for MlpRepr {
    fn from(m: Mlp) -> Self {
        MlpRepr {
            spec: m.spec,
            layers: m.layers,
        }
    }
}

/// Values retained by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    inputs: Vec<Tensor2>,
    pre: Vec<Tensor2>,
}

impl MlpCache {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Tensor2::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..=limit));
                Layer::new(weight, vec![0.0; fan_out])
            })
            .collect();
        Ok(Mlp { spec, layers })
    }

    pub fn from_layers(spec: MlpSpec, params: Vec<(Tensor2, Vec<f64>)>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.activations.len() {
            return Err(MtdmlError::dim("Mlp layers", spec.activations.len(), params.len()));
        }
        let mut layers = Vec::with_capacity(params.len());
        for (w, (weight, bias)) in spec.layer_widths.windows(2).zip(params) {
            if weight.shape() != (w[0], w[1]) || bias.len() != w[1] {
                return Err(MtdmlError::dim(
                    "Mlp layer shape",
                    format!("{}x{} + {}", w[0], w[1], w[1]),
                    format!("{}x{} + {}", weight.rows(), weight.cols(), bias.len()),
                ));
            }
            if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) {
                return Err(MtdmlError::numeric("Mlp parameters"));
            }
            layers.push(Layer::new(weight, bias));
        }
        Ok(Mlp { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    fn check_input(&self, x: &Tensor2) -> Result<()> {
        if x.cols() != self.input_width() {
            return Err(MtdmlError::dim("mlp input columns", self.input_width(), x.cols()));
        }
        Ok(())
    }

    fn affine(layer: &Layer, x: &Tensor2) -> Result<Tensor2> {
        let mut z = x.matmul(&layer.weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    pub fn forward(&self, x: &Tensor2) -> Result<(Tensor2, MlpCache)> {
        self.check_input(x)?;
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut a = x.clone();
        for (layer, &act) in self.layers.iter().zip(&self.spec.activations) {
            let z = Self::affine(layer, &a)?;
            let next = z.map(|v| act.apply(v));
            cache.inputs.push(a);
            cache.pre.push(z);
            a = next;
        }
        Ok((a, cache))
    }

    /// Forward pass without retaining a cache.
    pub fn predict(&self, x: &Tensor2) -> Result<Tensor2> {
        self.check_input(x)?;
        let mut a = x.clone();
        for (layer, &act) in self.layers.iter().zip(&self.spec.activations) {
            let z = Self::affine(layer, &a)?;
            a = z.map(|v| act.apply(v));
        }
        Ok(a)
    }

    /// Accumulates parameter gradients and returns the gradient with respect to the input.
    pub fn backward(&mut self, cache: &MlpCache, d_out: &Tensor2) -> Result<Tensor2> {
        if cache.inputs.len() != self.layers.len() || cache.pre.len() != self.layers.len() {
            return Err(MtdmlError::State(
                "backward called without a matching forward cache".into(),
            ));
        }
        let last = cache.pre.last().expect("non-empty");
        if d_out.shape() != last.shape() {
            return Err(MtdmlError::dim(
                "mlp backward d_out",
                format!("{:?}", last.shape()),
                format!("{:?}", d_out.shape()),
            ));
        }
        let mut grad = d_out.clone();
        for (idx, layer) in self.layers.iter_mut().enumerate().rev() {
            let act = self.spec.activations[idx];
            let dz = grad.zip_with(&cache.pre[idx], "mlp backward", |g, z| g * act.derivative(z))?;
            let gw = cache.inputs[idx].matmul_tn(&dz)?;
            let gb = dz.sum_rows();
            let grad_weight = layer
                .grad_weight
                .get_or_insert_with(|| Tensor2::zeros(gw.rows(), gw.cols()));
            for (acc, v) in grad_weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                *acc += v;
            }
            let grad_bias = layer.grad_bias.get_or_insert_with(|| vec![0.0; gb.len()]);
            for (acc, v) in grad_bias.iter_mut().zip(&gb) {
                *acc += v;
            }
            grad = dz.matmul_nt(&layer.weight)?;
        }
        Ok(grad)
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            let (r, c) = layer.weight.shape();
            match layer.grad_weight.as_mut() {
                Some(g) => g.as_mut_slice().iter_mut().for_each(|v| *v = 0.0),
                None => layer.grad_weight = Some(Tensor2::zeros(r, c)),
            }
            match layer.grad_bias.as_mut() {
                Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                None => layer.grad_bias = Some(vec![0.0; c]),
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer, weights then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(MtdmlError::dim("set_params_flat", self.param_count(), values.len()));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&values[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Gradients in the same order as [`Mlp::params_flat`].
    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            match &l.grad_weight {
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => out.extend(std::iter::repeat_n(0.0, l.weight.as_slice().len())),
            }
            match &l.grad_bias {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, l.bias.len())),
            }
        }
        out
    }
}
