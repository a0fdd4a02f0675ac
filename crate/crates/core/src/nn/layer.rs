use serde::{Deserialize, Serialize};

use crate::tensor::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::None => v,
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    #[serde(default = "default_bn_eps")]
    pub eps: f64,
}

fn default_bn_eps() -> f64 {
    1e-5
}

impl BatchNormParams {
    pub fn identity(units: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; units],
            beta: vec![0.0; units],
            running_mean: vec![0.0; units],
            running_var: vec![1.0; units],
            eps: default_bn_eps(),
        }
    }

    /// Per-unit multiplier applied at inference.
    pub fn scale(&self, unit: usize) -> f64 {
        self.gamma[unit] / (self.running_var[unit] + self.eps).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Flatten {
        units: usize,
    },
    /// `weights` is row-major with shape `(out_units, in_units)`.
    Dense {
        in_units: usize,
        out_units: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    BatchNorm1d(BatchNormParams),
    Dropout {
        units: usize,
        rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub activation: Activation,
}

impl Layer {
    pub fn flatten(units: usize) -> Self {
        Layer {
            kind: LayerKind::Flatten { units },
            activation: Activation::None,
        }
    }

    pub fn dense(in_units: usize, weights: Vec<f64>, bias: Vec<f64>, activation: Activation) -> Self {
        Layer {
            kind: LayerKind::Dense {
                in_units,
                out_units: bias.len(),
                weights,
                bias,
            },
            activation,
        }
    }

    pub fn batch_norm(params: BatchNormParams, activation: Activation) -> Self {
        Layer {
            kind: LayerKind::BatchNorm1d(params),
            activation,
        }
    }

    pub fn dropout(units: usize, rate: f64) -> Self {
        Layer {
            kind: LayerKind::Dropout { units, rate },
            activation: Activation::None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Flatten { .. } => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::BatchNorm1d(_) => "batchnorm1d",
            LayerKind::Dropout { .. } => "dropout",
        }
    }

    pub fn in_units(&self) -> usize {
        match &self.kind {
            LayerKind::Flatten { units } | LayerKind::Dropout { units, .. } => *units,
            LayerKind::Dense { in_units, .. } => *in_units,
            LayerKind::BatchNorm1d(p) => p.gamma.len(),
        }
    }

    pub fn out_units(&self) -> usize {
        match &self.kind {
            LayerKind::Flatten { units } | LayerKind::Dropout { units, .. } => *units,
            LayerKind::Dense { out_units, .. } => *out_units,
            LayerKind::BatchNorm1d(p) => p.gamma.len(),
        }
    }

    pub fn num_params(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { weights, bias, .. } => weights.len() + bias.len(),
            LayerKind::BatchNorm1d(p) => 2 * p.gamma.len(),
            _ => 0,
        }
    }

    /// Weight on the model edge `src -> dst` through this layer, if the edge exists.
    /// Element-wise layers only connect a unit to itself.
    pub fn edge_weight(&self, src: usize, dst: usize) -> Option<f64> {
        if src >= self.in_units() || dst >= self.out_units() {
            return None;
        }
        match &self.kind {
            LayerKind::Dense {
                in_units, weights, ..
            } => Some(weights[dst * in_units + src]),
            LayerKind::Flatten { .. } | LayerKind::Dropout { .. } => (src == dst).then_some(1.0),
            LayerKind::BatchNorm1d(p) => (src == dst).then(|| p.scale(src)),
        }
    }

    /// Inference-mode forward of one sample, activation included.
    pub fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match &self.kind {
            LayerKind::Flatten { .. } | LayerKind::Dropout { .. } => out.extend_from_slice(input),
            LayerKind::Dense {
                in_units,
                weights,
                bias,
                ..
            } => {
                out.extend(
                    weights
                        .chunks_exact(*in_units)
                        .zip(bias)
                        .map(|(row, b)| b + dot(row, input)),
                );
            }
            LayerKind::BatchNorm1d(p) => {
                out.extend(input.iter().enumerate().map(|(i, &x)| {
                    p.gamma[i] * (x - p.running_mean[i]) / (p.running_var[i] + p.eps).sqrt() + p.beta[i]
                }));
            }
        }
        if self.activation != Activation::None {
            for v in out.iter_mut() {
                *v = self.activation.apply(*v);
            }
        }
    }
}
