//! Reverse-mode gradients for [`Model`], batched so that batch-norm can use
//! batch statistics during training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layer::{Activation, LayerKind};
use super::loss::softmax_cross_entropy;
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::{axpy, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;

/// Gradient buffers shaped like the model's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

/// Dense: `weights` then `bias`. Batch-norm: gamma in `weights`, beta in `bias`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Dense { weights, bias, .. } => LayerGrad {
                    weights: vec![0.0; weights.len()],
                    bias: vec![0.0; bias.len()],
                },
                LayerKind::BatchNorm1d(p) => LayerGrad {
                    weights: vec![0.0; p.gamma.len()],
                    bias: vec![0.0; p.beta.len()],
                },
                _ => LayerGrad::default(),
            })
            .collect();
        Gradients { layers }
    }

    /// Same ordering as [`Model::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(&g.bias).copied())
            .collect()
    }
}

#[derive(Default)]
struct LayerCache {
    /// Training-mode batch-norm: normalized inputs and per-unit 1/sqrt(var + eps).
    bn: Option<(Vec<f64>, Vec<f64>)>,
    /// Batch statistics (mean, unbiased var) for the running-average update.
    bn_stats: Option<(Vec<f64>, Vec<f64>)>,
    dropout_mask: Option<Vec<f64>>,
}

pub(crate) struct BatchPass {
    batch: usize,
    /// `acts[0]` is the input batch, `acts[l + 1]` the output of layer `l`; row-major.
    acts: Vec<Vec<f64>>,
    caches: Vec<LayerCache>,
}

impl BatchPass {
    pub(crate) fn logits(&self) -> &[f64] {
        self.acts.last().expect("pass has at least the input")
    }
}

pub(crate) enum Mode<'a> {
    Inference,
    Training(&'a mut ChaCha8Rng),
}

impl Model {
    pub(crate) fn forward_batch(&self, xs: &[f64], batch: usize, mut mode: Mode<'_>) -> BatchPass {
        debug_assert_eq!(xs.len(), batch * self.input_dim());
        let mut acts = Vec::with_capacity(self.layers().len() + 1);
        let mut caches = Vec::with_capacity(self.layers().len());
        acts.push(xs.to_vec());
        let mut row = Vec::new();
        for layer in self.layers() {
            let input = acts.last().unwrap();
            let (nin, nout) = (layer.in_units(), layer.out_units());
            let mut out = Vec::with_capacity(batch * nout);
            let mut cache = LayerCache::default();
            match (&layer.kind, &mut mode) {
                (LayerKind::BatchNorm1d(p), Mode::Training(_)) => {
                    let (mean, var) = column_stats(input, batch, nin);
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
                    let mut xhat = Vec::with_capacity(batch * nin);
                    for x in input.chunks_exact(nin) {
                        for i in 0..nin {
                            let h = (x[i] - mean[i]) * inv_std[i];
                            xhat.push(h);
                            out.push(layer.activation.apply(p.gamma[i] * h + p.beta[i]));
                        }
                    }
                    let unbiased = if batch > 1 {
                        var.iter().map(|v| v * batch as f64 / (batch - 1) as f64).collect()
                    } else {
                        var.clone()
                    };
                    cache.bn = Some((xhat, inv_std));
                    cache.bn_stats = Some((mean, unbiased));
                }
                (LayerKind::Dropout { rate, .. }, Mode::Training(rng)) if *rate > 0.0 => {
                    let keep = 1.0 - rate;
                    let mask: Vec<f64> = (0..batch * nin)
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    out.extend(input.iter().zip(&mask).map(|(x, m)| layer.activation.apply(x * m)));
                    cache.dropout_mask = Some(mask);
                }
                _ => {
                    for x in input.chunks_exact(nin) {
                        layer.forward(x, &mut row);
                        out.extend_from_slice(&row);
                    }
                }
            }
            acts.push(out);
            caches.push(cache);
        }
        BatchPass { batch, acts, caches }
    }

    /// Backpropagates `dlogits` (row-major, one row per sample). Accumulates parameter
    /// gradients into `grads` when given; returns the input gradient when `want_input`.
    pub(crate) fn backward_batch(
        &self,
        pass: &BatchPass,
        dlogits: Vec<f64>,
        mut grads: Option<&mut Gradients>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let batch = pass.batch;
        let mut delta = dlogits;
        for (l, layer) in self.layers().iter().enumerate().rev() {
            let input = &pass.acts[l];
            let output = &pass.acts[l + 1];
            let (nin, nout) = (layer.in_units(), layer.out_units());
            if layer.activation == Activation::Relu {
                for (d, &y) in delta.iter_mut().zip(output) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let need_dx = l > 0 || want_input;
            let cache = &pass.caches[l];
            let mut dx = if need_dx { vec![0.0; batch * nin] } else { Vec::new() };
            match &layer.kind {
                LayerKind::Dense { weights, .. } => {
                    for b in 0..batch {
                        let d = &delta[b * nout..(b + 1) * nout];
                        let x = &input[b * nin..(b + 1) * nin];
                        if let Some(g) = grads.as_deref_mut() {
                            let lg = &mut g.layers[l];
                            for (j, &dj) in d.iter().enumerate() {
                                if dj != 0.0 {
                                    axpy(dj, x, &mut lg.weights[j * nin..(j + 1) * nin]);
                                }
                                lg.bias[j] += dj;
                            }
                        }
                        if need_dx {
                            let dxb = &mut dx[b * nin..(b + 1) * nin];
                            for (j, &dj) in d.iter().enumerate() {
                                if dj != 0.0 {
                                    axpy(dj, &weights[j * nin..(j + 1) * nin], dxb);
                                }
                            }
                        }
                    }
                }
                LayerKind::BatchNorm1d(p) => match &cache.bn {
                    Some((xhat, inv_std)) => {
                        let n = batch as f64;
                        let mut sum_dxhat = vec![0.0; nin];
                        let mut sum_dxhat_xhat = vec![0.0; nin];
                        for b in 0..batch {
                            for i in 0..nin {
                                let k = b * nin + i;
                                let dxh = delta[k] * p.gamma[i];
                                sum_dxhat[i] += dxh;
                                sum_dxhat_xhat[i] += dxh * xhat[k];
                                if let Some(g) = grads.as_deref_mut() {
                                    g.layers[l].weights[i] += delta[k] * xhat[k];
                                    g.layers[l].bias[i] += delta[k];
                                }
                            }
                        }
                        if need_dx {
                            for b in 0..batch {
                                for i in 0..nin {
                                    let k = b * nin + i;
                                    let dxh = delta[k] * p.gamma[i];
                                    dx[k] = inv_std[i] / n * (n * dxh - sum_dxhat[i] - xhat[k] * sum_dxhat_xhat[i]);
                                }
                            }
                        }
                    }
                    None => {
                        for b in 0..batch {
                            for i in 0..nin {
                                let k = b * nin + i;
                                let inv = 1.0 / (p.running_var[i] + p.eps).sqrt();
                                if let Some(g) = grads.as_deref_mut() {
                                    g.layers[l].weights[i] += delta[k] * (input[k] - p.running_mean[i]) * inv;
                                    g.layers[l].bias[i] += delta[k];
                                }
                                if need_dx {
                                    dx[k] = delta[k] * p.gamma[i] * inv;
                                }
                            }
                        }
                    }
                },
                LayerKind::Dropout { .. } | LayerKind::Flatten { .. } => {
                    if need_dx {
                        match &cache.dropout_mask {
                            Some(mask) => {
                                for ((o, d), m) in dx.iter_mut().zip(&delta).zip(mask) {
                                    *o = d * m;
                                }
                            }
                            None => dx.copy_from_slice(&delta),
                        }
                    }
                }
            }
            if !need_dx {
                return None;
            }
            delta = dx;
        }
        Some(delta)
    }

    /// Folds the batch statistics of a training pass into the running averages.
    pub(crate) fn update_running_stats(&mut self, pass: &BatchPass) {
        for (layer, cache) in self.layers_mut().iter_mut().zip(&pass.caches) {
            if let (LayerKind::BatchNorm1d(p), Some((mean, var))) = (&mut layer.kind, &cache.bn_stats) {
                for i in 0..p.gamma.len() {
                    p.running_mean[i] = (1.0 - BN_MOMENTUM) * p.running_mean[i] + BN_MOMENTUM * mean[i];
                    p.running_var[i] = (1.0 - BN_MOMENTUM) * p.running_var[i] + BN_MOMENTUM * var[i];
                }
            }
        }
    }
}

fn column_stats(xs: &[f64], batch: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = batch as f64;
    let mut mean = vec![0.0; width];
    for row in xs.chunks_exact(width) {
        axpy(1.0, row, &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for row in xs.chunks_exact(width) {
        for i in 0..width {
            let d = row[i] - mean[i];
            var[i] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

fn check_label(model: &Model, label: usize) -> Result<()> {
    if label >= model.num_classes() {
        return Err(Error::domain(format!(
            "label {label} out of range for {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

fn check_input(model: &Model, x: &[f64]) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(Error::Dimension {
            context: "model input",
            expected: model.input_dim(),
            got: x.len(),
        });
    }
    Ok(())
}

/// Inference-mode cross-entropy and its parameter gradient for one sample.
pub fn loss_and_gradients(model: &Model, x: &[f64], label: usize) -> Result<(f64, Gradients)> {
    check_input(model, x)?;
    check_label(model, label)?;
    let pass = model.forward_batch(x, 1, Mode::Inference);
    let (loss, dlogits) = softmax_cross_entropy(pass.logits(), label)?;
    let mut grads = Gradients::zeros_like(model);
    model.backward_batch(&pass, dlogits, Some(&mut grads), false);
    Ok((loss, grads))
}

/// Inference-mode cross-entropy and its gradient with respect to the input.
pub fn loss_and_input_gradient(model: &Model, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    check_input(model, x)?;
    check_label(model, label)?;
    let pass = model.forward_batch(x, 1, Mode::Inference);
    let (loss, dlogits) = softmax_cross_entropy(pass.logits(), label)?;
    let dx = model
        .backward_batch(&pass, dlogits, None, true)
        .expect("input gradient requested");
    Ok((loss, dx))
}

/// Gradient of the cross-entropy loss with respect to the input.
pub fn grad_input(model: &Model, x: &Tensor, label: usize) -> Result<Tensor> {
    let (_, dx) = loss_and_input_gradient(model, x.data(), label)?;
    Tensor::new(x.shape().to_vec(), dx)
}

/// Summed training-mode loss over a batch plus its parameter gradient.
pub(crate) fn train_batch_gradients(
    model: &Model,
    xs: &[f64],
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients, BatchPass)> {
    let batch = labels.len();
    let pass = model.forward_batch(xs, batch, Mode::Training(rng));
    let k = model.num_classes();
    let mut dlogits = Vec::with_capacity(batch * k);
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        check_label(model, y)?;
        let (l, d) = softmax_cross_entropy(&pass.logits()[b * k..(b + 1) * k], y)?;
        loss += l;
        dlogits.extend(d);
    }
    let mut grads = Gradients::zeros_like(model);
    model.backward_batch(&pass, dlogits, Some(&mut grads), false);
    Ok((loss, grads, pass))
}

/// Summed training-mode loss of a batch (no dropout randomness is consumed when the
/// model has no active dropout). Used by gradient checks.
pub fn train_batch_loss(model: &Model, xs: &[f64], labels: &[usize], rng: &mut ChaCha8Rng) -> Result<f64> {
    let pass = model.forward_batch(xs, labels.len(), Mode::Training(rng));
    let k = model.num_classes();
    labels.iter().enumerate().try_fold(0.0, |acc, (b, &y)| {
        let (l, _) = softmax_cross_entropy(&pass.logits()[b * k..(b + 1) * k], y)?;
        Ok(acc + l)
    })
}

/// Parameter gradient of [`train_batch_loss`].
pub fn train_batch_param_gradient(model: &Model, xs: &[f64], labels: &[usize], rng: &mut ChaCha8Rng) -> Result<Gradients> {
    Ok(train_batch_gradients(model, xs, labels, rng)?.1)
}
