use super::{DenseLayer, Gradients, MlpModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum { momentum },
            learning_rate,
            weight_decay,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::adam(),
            learning_rate,
            weight_decay: 0.0,
        }
    }
}

/// Per-model optimizer buffers. Never shared between models.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    first: Vec<DenseLayer>,
    second: Vec<DenseLayer>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, model: &MlpModel) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(Error::Contract(format!(
                "learning rate must be positive, got {}",
                config.learning_rate
            )));
        }
        let first = model.zero_gradients();
        let second = match config.kind {
            OptimizerKind::Adam { .. } => model.zero_gradients(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Ok(Self {
            config,
            step: 0,
            first,
            second,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// SGD: `buf = momentum * buf + g; w -= lr * (buf + wd * w)`.
    /// Adam: bias-corrected moments with L2 weight decay folded into the gradient.
    pub fn apply(&mut self, layers: &mut [DenseLayer], grads: &Gradients) -> Result<()> {
        if layers.len() != grads.len() || layers.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "{} layers, {} gradients, {} optimizer buffers",
                layers.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for ((layer, grad), buf) in layers.iter().zip(grads).zip(&self.first) {
            if layer.weights.dim() != grad.weights.dim() || layer.weights.dim() != buf.weights.dim() {
                return Err(Error::Shape("gradient shape does not mirror model".into()));
            }
        }
        self.step += 1;
        let lr = self.config.learning_rate;
        let wd = self.config.weight_decay;
        match self.config.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for ((layer, grad), buf) in layers.iter_mut().zip(grads).zip(&mut self.first) {
                    sgd_step(
                        layer.weights.iter_mut().chain(layer.bias.iter_mut()),
                        grad.weights.iter().chain(grad.bias.iter()),
                        buf.weights.iter_mut().chain(buf.bias.iter_mut()),
                        lr,
                        momentum,
                        wd,
                    );
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for (((layer, grad), m), v) in layers
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
                    let gs = grad.weights.iter().chain(grad.bias.iter());
                    let ms = m.weights.iter_mut().chain(m.bias.iter_mut());
                    let vs = v.weights.iter_mut().chain(v.bias.iter_mut());
                    for (((w, &g), m), v) in params.zip(gs).zip(ms).zip(vs) {
                        let g = g + wd * *w;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn apply_to_model(&mut self, model: &mut MlpModel, grads: &Gradients) -> Result<()> {
        self.apply(&mut model.layers, grads)
    }
}

fn sgd_step<'a>(
    params: impl Iterator<Item = &'a mut f64>,
    grads: impl Iterator<Item = &'a f64>,
    buffers: impl Iterator<Item = &'a mut f64>,
    lr: f64,
    momentum: f64,
    wd: f64,
) {
    for ((w, &g), b) in params.zip(grads).zip(buffers) {
        *b = momentum * *b + g;
        *w -= lr * (*b + wd * *w);
    }
}
