use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backprop::{train_batch_gradients, Gradients, Mode};
use super::layer::LayerKind;
use super::model::Model;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.005,
            batch_size: 32,
            epochs: 10,
            seed: 0,
        }
    }
}

/// Mean training loss of each epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
}

/// Mini-batch SGD on summed cross-entropy: `theta <- theta - lr * sum_batch grad`.
/// Shuffling and dropout masks are drawn from a generator seeded with `cfg.seed`.
pub fn train_sgd(model: &mut Model, data: &Dataset, cfg: &SgdConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || cfg.batch_size == 0 {
        return Err(Error::config("learning rate must be finite and >= 0, batch size >= 1"));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::Dimension {
            context: "training data",
            expected: model.input_dim(),
            got: data.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let mut xs = Vec::with_capacity(cfg.batch_size * data.dim());
    let mut ys = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            xs.clear();
            ys.clear();
            for &i in chunk {
                xs.extend_from_slice(data.sample(i));
                ys.push(data.label(i));
            }
            let (loss, grads, pass) = train_batch_gradients(model, &xs, &ys, &mut rng)?;
            total += loss;
            apply_step(model, &grads, cfg.lr);
            model.update_running_stats(&pass);
        }
        report.epoch_loss.push(total / data.len() as f64);
    }
    Ok(report)
}

fn apply_step(model: &mut Model, grads: &Gradients, lr: f64) {
    for (layer, g) in model.layers_mut().iter_mut().zip(&grads.layers) {
        let (w, b) = match &mut layer.kind {
            LayerKind::Dense { weights, bias, .. } => (weights, bias),
            LayerKind::BatchNorm1d(p) => (&mut p.gamma, &mut p.beta),
            _ => continue,
        };
        w.iter_mut().zip(&g.weights).for_each(|(p, d)| *p -= lr * d);
        b.iter_mut().zip(&g.bias).for_each(|(p, d)| *p -= lr * d);
    }
}

const EVAL_BATCH: usize = 256;

/// Predicted labels for every sample, computed in inference mode.
pub fn predict_all(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    if data.dim() != model.input_dim() {
        return Err(Error::Dimension {
            context: "evaluation data",
            expected: model.input_dim(),
            got: data.dim(),
        });
    }
    let k = model.num_classes();
    let mut out = Vec::with_capacity(data.len());
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(EVAL_BATCH) {
        let xs = &data.features()[chunk[0] * data.dim()..(chunk[chunk.len() - 1] + 1) * data.dim()];
        let pass = model.forward_batch(xs, chunk.len(), Mode::Inference);
        out.extend(pass.logits().chunks_exact(k).map(argmax));
    }
    Ok(out)
}

/// Fraction of samples classified correctly, in `[0, 1]`.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("accuracy of an empty dataset is undefined"));
    }
    let preds = predict_all(model, data)?;
    let hits = preds.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::{Activation, Layer};

    /// Two-logit model with logits (0, w*x + b): softmax over them is the logistic σ(wx+b).
    fn logistic(w: f64, b: f64) -> Model {
        Model::new(1, 2, vec![Layer::dense(1, vec![0.0, w], vec![0.0, b], Activation::None)]).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut m = Model::dense_stack(3, &[4], 2, false, 1).unwrap();
        let before = m.parameters();
        let d = Dataset::new(3, 2, vec![0.1, 0.2, 0.3, 0.9, 0.8, 0.7], vec![0, 1]).unwrap();
        train_sgd(&mut m, &d, &SgdConfig { lr: 0.0, batch_size: 1, epochs: 2, seed: 0 }).unwrap();
        assert_eq!(m.parameters(), before);
    }

    #[test]
    fn single_step_matches_logistic_update() {
        let (w, b, x, y, lr) = (0.7, -0.2, 1.5, 1usize, 0.1);
        let mut m = logistic(w, b);
        let d = Dataset::new(1, 2, vec![x], vec![y]).unwrap();
        train_sgd(&mut m, &d, &SgdConfig { lr, batch_size: 1, epochs: 1, seed: 0 }).unwrap();
        let s = 1.0 / (1.0 + (-(w * x + b)).exp());
        let g = s - y as f64;
        let p = m.parameters();
        // layout: weights [w0, w1], bias [b0, b1]; class-0 logit stays frozen at 0 input
        assert!((p[1] - (w - lr * g * x)).abs() < 1e-12);
        assert!((p[3] - (b - lr * g)).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let mut m = logistic(1.0, 0.0);
        let d = Dataset::new(1, 2, vec![], vec![]).unwrap();
        assert!(matches!(train_sgd(&mut m, &d, &SgdConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        use crate::data::{gen_synthetic, BlobSpec, DatasetSpec};
        let d = gen_synthetic(&DatasetSpec::SyntheticBlobs(BlobSpec {
            num_samples: 200,
            dim: 2,
            num_classes: 2,
            separation: 1.0,
            noise: 0.05,
            support: 2,
            seed: 3,
        }))
        .unwrap();
        let mut m = Model::dense_stack(2, &[8], 2, false, 5).unwrap();
        train_sgd(&mut m, &d, &SgdConfig { lr: 0.05, batch_size: 8, epochs: 20, seed: 1 }).unwrap();
        assert!(accuracy(&m, &d).unwrap() >= 0.95);
    }

    #[test]
    fn batched_predictions_match_single_forward() {
        let m = Model::dense_stack(3, &[5, 4], 3, true, 9).unwrap();
        let feats: Vec<f64> = (0..300 * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let d = Dataset::new(3, 3, feats, vec![0; 300]).unwrap();
        let preds = predict_all(&m, &d).unwrap();
        for (i, p) in preds.iter().enumerate() {
            assert_eq!(*p, m.predict(d.sample(i)).unwrap());
        }
    }
}
