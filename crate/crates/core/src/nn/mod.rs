//! Minimal multilayer perceptron with manual backpropagation.
//!
//! Hidden layers use a ReLU6 clamp, `min(max(x, 0), 6)`, so that activations
//! stay bounded no matter which hidden layers a subnet keeps or skips. The
//! output layer is linear and produces logits.

mod loss;
mod optim;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

pub use loss::{cross_entropy, kl_divergence, log_softmax, softmax};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `inputs x outputs`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(Error::Shape(format!(
                "bias length {} does not match {} output columns",
                bias.len(),
                weights.ncols()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and bias.
    pub fn init_uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((inputs, outputs), || {
            rng.random_range(-bound..=bound)
        });
        let bias = Array1::from_shape_simple_fn(outputs, || rng.random_range(-bound..=bound));
        Self { weights, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.outputs())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu6,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu6 => x.clamp(0.0, 6.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Gradients share the layer layout of the model they were computed for.
pub type Gradients = Vec<DenseLayer>;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
    /// Applied after every layer except the last.
    pub hidden_activation: Activation,
}

/// Intermediate values recorded by [`MlpModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each hidden layer.
    pre_activations: Vec<Array2<f64>>,
    fingerprint: u64,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }

    /// Post-activation outputs of the hidden layers.
    pub fn hidden_activations(&self) -> &[Array2<f64>] {
        &self.inputs[1..]
    }
}

impl MlpModel {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("model needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} features but layer {} expects {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weights.ncols() != layer.bias.len() {
                return Err(Error::Shape(format!("layer {i}: bias/weight mismatch")));
            }
        }
        Ok(Self {
            layers,
            hidden_activation: Activation::Relu6,
        })
    }

    /// Randomly initialized model with the given widths, e.g. `[in, h1, h2, classes]`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Shape("need at least input and output widths".into()));
        }
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer::init_uniform(w[0], w[1], rng))
            .collect();
        Self::new(layers)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.layers.iter().map(DenseLayer::zeros_like).collect()
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weights.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over shapes and parameter bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for layer in &self.layers {
            mix(layer.inputs() as u64);
            mix(layer.outputs() as u64);
            for v in layer.weights.iter().chain(layer.bias.iter()) {
                mix(v.to_bits());
            }
        }
        h
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if inputs.nrows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if inputs.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                inputs.ncols(),
                self.in_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut x = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weights);
            z += &layer.bias;
            layer_inputs.push(x);
            if i == last {
                x = z;
            } else {
                let act = self.hidden_activation;
                x = z.mapv(|v| act.apply(v));
                pre_activations.push(z);
            }
        }
        let cache = ForwardCache {
            inputs: layer_inputs,
            pre_activations,
            fingerprint: self.fingerprint(),
        };
        Ok((x, cache))
    }

    /// Logits only.
    pub fn predict(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                inputs.ncols(),
                self.in_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut x = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weights);
            z += &layer.bias;
            if i != last {
                let act = self.hidden_activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            x = z;
        }
        Ok(x)
    }

    /// Backpropagates a gradient with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: ArrayView2<f64>) -> Result<Gradients> {
        if cache.fingerprint != self.fingerprint() || cache.inputs.len() != self.layers.len() {
            return Err(Error::Contract(
                "forward cache was produced by a different model state".into(),
            ));
        }
        if grad_logits.dim() != (cache.batch_size(), self.classes()) {
            return Err(Error::Shape(format!(
                "logit gradient is {:?}, expected ({}, {})",
                grad_logits.dim(),
                cache.batch_size(),
                self.classes()
            )));
        }
        let mut grads: Vec<DenseLayer> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let weights = cache.inputs[i].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut upstream = delta.dot(&layer.weights.t());
                let act = self.hidden_activation;
                ndarray::Zip::from(&mut upstream)
                    .and(&cache.pre_activations[i - 1])
                    .for_each(|g, &z| *g *= act.derivative(z));
                delta = upstream;
            }
            grads.push(DenseLayer { weights, bias });
        }
        grads.reverse();
        Ok(grads)
    }

    /// Mean cross-entropy loss and its gradient.
    pub fn backward_ce(&self, cache: &ForwardCache, logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Gradients)> {
        let (loss, grad) = cross_entropy(logits.view(), labels)?;
        Ok((loss, self.backward(cache, grad.view())?))
    }
}
