use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layer::{Activation, BatchNormParams, Layer, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Post-activation output of every layer for one inference, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub per_layer: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn layer(&self, index: usize) -> &[f64] {
        self.per_layer[index].data()
    }

    pub fn logits(&self) -> &[f64] {
        self.per_layer.last().map(|t| t.data()).unwrap_or(&[])
    }
}

/// Called after each layer's activation with that layer's outputs. Implementors may
/// rewrite values in place; later layers consume the rewritten values.
pub trait ActivationHook {
    fn after_layer(&self, layer: usize, values: &mut [f64]);
}

pub struct NoHook;

impl ActivationHook for NoHook {
    fn after_layer(&self, _layer: usize, _values: &mut [f64]) {}
}

/// Layered feed-forward classifier. Each unit feeds only the next layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_dim: usize,
    num_classes: usize,
    layers: Vec<Layer>,
}

impl Model {
    pub fn new(input_dim: usize, num_classes: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::config("model input_dim must be positive"));
        }
        if num_classes < 2 {
            return Err(Error::config("model needs at least two classes"));
        }
        if layers.is_empty() {
            return Err(Error::config("model has no layers"));
        }
        let mut width = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_units() != width {
                return Err(Error::Dimension {
                    context: "layer input width",
                    expected: width,
                    got: layer.in_units(),
                });
            }
            match &layer.kind {
                LayerKind::Dense {
                    in_units,
                    out_units,
                    weights,
                    bias,
                } => {
                    if weights.len() != in_units * out_units || bias.len() != *out_units || *out_units == 0 {
                        return Err(Error::config(format!("dense layer {i} has inconsistent parameter shapes")));
                    }
                }
                LayerKind::BatchNorm1d(p) => {
                    let n = p.gamma.len();
                    if p.beta.len() != n || p.running_mean.len() != n || p.running_var.len() != n {
                        return Err(Error::config(format!("batchnorm layer {i} has inconsistent parameter shapes")));
                    }
                    if p.running_var.iter().any(|&v| !(v > 0.0)) || !(p.eps >= 0.0) {
                        return Err(Error::config(format!("batchnorm layer {i} needs positive running variance")));
                    }
                }
                LayerKind::Dropout { rate, .. } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::config(format!("dropout layer {i} rate must lie in [0, 1)")));
                    }
                }
                LayerKind::Flatten { .. } => {}
            }
            width = layer.out_units();
        }
        if width != num_classes {
            return Err(Error::Dimension {
                context: "final layer width vs num_classes",
                expected: num_classes,
                got: width,
            });
        }
        Ok(Model {
            input_dim,
            num_classes,
            layers,
        })
    }

    /// Dense ReLU stack with a linear logits layer, optionally preceded by a flatten layer.
    /// Weights and biases are drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn dense_stack(input_dim: usize, hidden: &[usize], num_classes: usize, flatten: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        if flatten {
            layers.push(Layer::flatten(input_dim));
        }
        let mut fan_in = input_dim;
        let widths = hidden.iter().copied().chain(std::iter::once(num_classes));
        let n_hidden = hidden.len();
        for (i, out) in widths.enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weights = (0..out * fan_in).map(|_| rng.random_range(-bound..=bound)).collect();
            let bias = (0..out).map(|_| rng.random_range(-bound..=bound)).collect();
            let act = if i < n_hidden { Activation::Relu } else { Activation::None };
            layers.push(Layer::dense(fan_in, weights, bias, act));
            fan_in = out;
        }
        Model::new(input_dim, num_classes, layers)
    }

    /// flatten(784) -> Dense(350) ReLU -> Dense(50) ReLU -> logits.
    pub fn mnist_dnn(num_classes: usize, seed: u64) -> Result<Self> {
        Model::dense_stack(784, &[350, 50], num_classes, true, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Width of every graph layer: index 0 is the input, index `l + 1` is model layer `l`.
    pub fn graph_widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.layers.iter().map(Layer::out_units))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                context: "model input",
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ActivationTrace)> {
        self.forward_hooked(x, &NoHook)
    }

    pub fn forward_tensor(&self, x: &Tensor) -> Result<(Tensor, ActivationTrace)> {
        let (logits, trace) = self.forward(x.data())?;
        Ok((Tensor::vector(logits)?, trace))
    }

    pub fn forward_hooked(&self, x: &[f64], hook: &dyn ActivationHook) -> Result<(Vec<f64>, ActivationTrace)> {
        self.check_input(x)?;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        let mut next = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&current, &mut next);
            hook.after_layer(i, &mut next);
            std::mem::swap(&mut current, &mut next);
            per_layer.push(Tensor::new(vec![current.len()], current.clone())?);
        }
        Ok((current, ActivationTrace { per_layer }))
    }

    /// Logits only, without recording a trace.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.run_layers(0, x.to_vec(), &NoHook))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Continues a forward pass from `values`, the (possibly patched) output of
    /// layer `after_layer`, through the remaining layers. Returns the logits.
    pub fn resume(&self, after_layer: usize, values: Vec<f64>, hook: &dyn ActivationHook) -> Vec<f64> {
        self.run_layers(after_layer + 1, values, hook)
    }

    fn run_layers(&self, start: usize, mut current: Vec<f64>, hook: &dyn ActivationHook) -> Vec<f64> {
        let mut next = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            layer.forward(&current, &mut next);
            hook.after_layer(i, &mut next);
            std::mem::swap(&mut current, &mut next);
        }
        current
    }

    /// Weight of the model DAG edge between graph nodes `(layer, src)` and `(layer + 1, dst)`.
    pub fn edge_weight(&self, src_graph_layer: usize, src: usize, dst: usize) -> Option<f64> {
        self.layers.get(src_graph_layer)?.edge_weight(src, dst)
    }

    /// Flattened trainable parameters, in layer order (weights then bias / gamma then beta).
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            match &layer.kind {
                LayerKind::Dense { weights, bias, .. } => {
                    out.extend_from_slice(weights);
                    out.extend_from_slice(bias);
                }
                LayerKind::BatchNorm1d(p) => {
                    out.extend_from_slice(&p.gamma);
                    out.extend_from_slice(&p.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Dimension {
                context: "parameter vector",
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut rest = params;
        let mut take = |dst: &mut Vec<f64>| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for layer in &mut self.layers {
            match &mut layer.kind {
                LayerKind::Dense { weights, bias, .. } => {
                    take(weights);
                    take(bias);
                }
                LayerKind::BatchNorm1d(p) => {
                    take(&mut p.gamma);
                    take(&mut p.beta);
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// SHA-256 hex digest of the canonical JSON document.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelDoc::from(self)).expect("model document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        doc.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Model::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    version: u32,
    input_dim: usize,
    num_classes: usize,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    kind: String,
    activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    units: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn_params: Option<BatchNormParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rate: Option<f64>,
}

impl From<&Model> for ModelDoc {
    fn from(m: &Model) -> Self {
        let layers = m
            .layers
            .iter()
            .map(|layer| {
                let mut doc = LayerDoc {
                    kind: layer.kind_name().to_string(),
                    activation: layer.activation,
                    units: None,
                    weights: None,
                    bias: None,
                    bn_params: None,
                    rate: None,
                };
                match &layer.kind {
                    LayerKind::Flatten { units } => doc.units = Some(*units),
                    LayerKind::Dense {
                        in_units,
                        weights,
                        bias,
                        ..
                    } => {
                        doc.weights = Some(weights.chunks_exact(*in_units).map(<[f64]>::to_vec).collect());
                        doc.bias = Some(bias.clone());
                    }
                    LayerKind::BatchNorm1d(p) => doc.bn_params = Some(p.clone()),
                    LayerKind::Dropout { units, rate } => {
                        doc.units = Some(*units);
                        doc.rate = Some(*rate);
                    }
                }
                doc
            })
            .collect();
        ModelDoc {
            version: MODEL_FORMAT_VERSION,
            input_dim: m.input_dim,
            num_classes: m.num_classes,
            layers,
        }
    }
}

impl TryFrom<ModelDoc> for Model {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Self> {
        if doc.version != MODEL_FORMAT_VERSION {
            return Err(Error::format(format!("unsupported model format version {}", doc.version)));
        }
        let mut width = doc.input_dim;
        let mut layers = Vec::with_capacity(doc.layers.len());
        for (i, l) in doc.layers.into_iter().enumerate() {
            let missing = |field: &str| Error::format(format!("layer {i} ({}) is missing `{field}`", l.kind));
            let layer = match l.kind.as_str() {
                "flatten" => Layer {
                    kind: LayerKind::Flatten {
                        units: l.units.unwrap_or(width),
                    },
                    activation: l.activation,
                },
                "dense" => {
                    let rows = l.weights.ok_or_else(|| missing("weights"))?;
                    let bias = l.bias.ok_or_else(|| missing("bias"))?;
                    let in_units = rows.first().map(Vec::len).unwrap_or(0);
                    if rows.iter().any(|r| r.len() != in_units) {
                        return Err(Error::format(format!("layer {i} has ragged weight rows")));
                    }
                    Layer::dense(in_units, rows.concat(), bias, l.activation)
                }
                "batchnorm1d" => Layer::batch_norm(l.bn_params.ok_or_else(|| missing("bn_params"))?, l.activation),
                "dropout" => Layer {
                    kind: LayerKind::Dropout {
                        units: l.units.unwrap_or(width),
                        rate: l.rate.unwrap_or(0.0),
                    },
                    activation: l.activation,
                },
                other => return Err(Error::format(format!("unknown layer kind `{other}`"))),
            };
            width = layer.out_units();
            layers.push(layer);
        }
        Model::new(doc.input_dim, doc.num_classes, layers)
    }
}
