//! Adversarial input generators: FGSM, PGD, SPSA (gradient-free) and an additive
//! bit-flip attack for binary features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{loss_and_input_gradient, softmax, Model, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Spsa,
    BitFlip,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Spsa => "spsa",
            AttackKind::BitFlip => "bit_flip",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "spsa" => Ok(AttackKind::Spsa),
            "bit_flip" | "bitflip" => Ok(AttackKind::BitFlip),
            other => Err(Error::config(format!("unknown attack '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L-infinity budget.
    pub eps: f64,
    /// PGD/SPSA iterations.
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    pub spsa_samples: usize,
    pub spsa_radius: f64,
    pub flip_budget: usize,
    /// Class the bit-flip attack tries to reach.
    pub benign_class: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::pgd(0.3)
    }
}

impl AttackConfig {
    /// 40 steps of size `eps / 10`.
    pub fn pgd(eps: f64) -> Self {
        AttackConfig {
            eps,
            steps: 40,
            step_size: eps / 10.0,
            seed: 0,
            spsa_samples: 64,
            spsa_radius: 0.01,
            flip_budget: 10,
            benign_class: 0,
        }
    }

    /// 100 iterations, 64 Rademacher pairs, radius 0.01.
    pub fn spsa(eps: f64) -> Self {
        AttackConfig {
            steps: 100,
            ..AttackConfig::pgd(eps)
        }
    }

    pub fn validate(&self, kind: AttackKind) -> Result<()> {
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(Error::config("eps must be finite and non-negative"));
        }
        if matches!(kind, AttackKind::Pgd | AttackKind::Spsa) {
            if self.steps == 0 {
                return Err(Error::config("iterative attacks need at least one step"));
            }
            if !(self.step_size.is_finite() && self.step_size >= 0.0) || self.step_size > self.eps {
                return Err(Error::config(format!(
                    "step size {} must lie in [0, eps = {}]",
                    self.step_size, self.eps
                )));
            }
        }
        if kind == AttackKind::Spsa {
            if self.spsa_samples == 0 {
                return Err(Error::config("spsa_samples must be at least 1"));
            }
            if !(self.spsa_radius.is_finite() && self.spsa_radius > 0.0) {
                return Err(Error::config("spsa_radius must be positive"));
            }
        }
        Ok(())
    }
}

/// Provenance of an adversarial dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMeta {
    pub attack: String,
    pub eps: f64,
    pub steps: usize,
    pub seed: u64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clip(x + eps * sign(grad_x L), 0, 1)`.
pub fn fgsm(model: &Model, x: &[f64], y: usize, eps: f64) -> Result<Vec<f64>> {
    let (_, g) = loss_and_input_gradient(model, x, y)?;
    Ok(x.iter().zip(&g).map(|(&v, &d)| (v + eps * sign(d)).clamp(0.0, 1.0)).collect())
}

/// Keeps `x + delta` inside both the eps-ball around `x` and the unit box.
fn project(x: &[f64], adv: &mut [f64], eps: f64) {
    for (a, &v) in adv.iter_mut().zip(x) {
        *a = a.clamp(v - eps, v + eps).clamp(0.0, 1.0);
    }
}

/// Projected sign-gradient ascent from `delta = 0`.
pub fn pgd(model: &Model, x: &[f64], y: usize, cfg: &AttackConfig) -> Result<Vec<f64>> {
    cfg.validate(AttackKind::Pgd)?;
    let mut adv = x.to_vec();
    for _ in 0..cfg.steps {
        let (_, g) = loss_and_input_gradient(model, &adv, y)?;
        adv.iter_mut().zip(&g).for_each(|(a, &d)| *a += cfg.step_size * sign(d));
        project(x, &mut adv, cfg.eps);
    }
    Ok(adv)
}

/// Simultaneous-perturbation estimate of `grad f(x)`: the average over `samples`
/// Rademacher directions `d` of `(f(x + c d) - f(x - c d)) / (2c) * d`.
pub fn spsa_gradient(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    samples: usize,
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut dir = vec![0.0; x.len()];
    let mut plus = vec![0.0; x.len()];
    let mut minus = vec![0.0; x.len()];
    for _ in 0..samples {
        for i in 0..x.len() {
            dir[i] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            plus[i] = x[i] + radius * dir[i];
            minus[i] = x[i] - radius * dir[i];
        }
        let slope = (f(&plus) - f(&minus)) / (2.0 * radius);
        grad.iter_mut().zip(&dir).for_each(|(g, d)| *g += slope * d);
    }
    grad.iter_mut().for_each(|g| *g /= samples as f64);
    grad
}

fn query_loss(model: &Model, x: &[f64], y: usize) -> f64 {
    let logits = model.logits(x).expect("dimension checked by caller");
    -softmax(&logits)[y].max(PROB_FLOOR).ln()
}

/// Projected sign steps on an SPSA gradient estimate. Only queries logits.
pub fn spsa_attack(model: &Model, x: &[f64], y: usize, cfg: &AttackConfig) -> Result<Vec<f64>> {
    cfg.validate(AttackKind::Spsa)?;
    if x.len() != model.input_dim() {
        return Err(Error::Dimension {
            context: "attack input",
            expected: model.input_dim(),
            got: x.len(),
        });
    }
    if y >= model.num_classes() {
        return Err(Error::domain(format!("label {y} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adv = x.to_vec();
    for _ in 0..cfg.steps {
        let g = spsa_gradient(|p| query_loss(model, p, y), &adv, cfg.spsa_samples, cfg.spsa_radius, &mut rng);
        adv.iter_mut().zip(&g).for_each(|(a, &d)| *a += cfg.step_size * sign(d));
        project(x, &mut adv, cfg.eps);
    }
    Ok(adv)
}

/// Greedy additive attack on binary features: while the prediction is not
/// `benign_class` and budget remains, set the 0-bit whose flip most increases
/// the loss of the current prediction (lowest index on ties).
pub fn bit_flip(model: &Model, x: &[f64], flip_budget: usize, benign_class: usize) -> Result<Vec<f64>> {
    if let Some(v) = x.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::domain(format!("bit_flip needs binary input, found {v}")));
    }
    if benign_class >= model.num_classes() {
        return Err(Error::config(format!("benign class {benign_class} out of range")));
    }
    let mut adv = x.to_vec();
    let mut pred = model.predict(&adv)?;
    let source = pred;
    let mut flips = 0;
    while pred != benign_class && flips < flip_budget {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..adv.len() {
            if adv[i] != 0.0 {
                continue;
            }
            adv[i] = 1.0;
            let loss = query_loss(model, &adv, source);
            adv[i] = 0.0;
            if best.is_none_or(|(_, l)| loss > l) {
                best = Some((i, loss));
            }
        }
        let Some((i, _)) = best else { break };
        adv[i] = 1.0;
        flips += 1;
        pred = model.predict(&adv)?;
    }
    Ok(adv)
}

/// Runs one attack on a single sample. Bit-flip ignores the label.
pub fn run_attack(model: &Model, x: &[f64], y: usize, kind: AttackKind, cfg: &AttackConfig) -> Result<Vec<f64>> {
    cfg.validate(kind)?;
    match kind {
        AttackKind::Fgsm => fgsm(model, x, y, cfg.eps),
        AttackKind::Pgd => pgd(model, x, y, cfg),
        AttackKind::Spsa => spsa_attack(model, x, y, cfg),
        AttackKind::BitFlip => bit_flip(model, x, cfg.flip_budget, cfg.benign_class),
    }
}

/// Attacks every sample with its true label, keeping labels. SPSA uses seed
/// `cfg.seed + i` for sample `i`.
pub fn attack_dataset(model: &Model, data: &Dataset, kind: AttackKind, cfg: &AttackConfig) -> Result<Dataset> {
    cfg.validate(kind)?;
    let mut features = Vec::with_capacity(data.features().len());
    let mut per_sample = cfg.clone();
    for (i, (x, y)) in data.iter().enumerate() {
        per_sample.seed = cfg.seed.wrapping_add(i as u64);
        features.extend(run_attack(model, x, y, kind, &per_sample)?);
    }
    Dataset::new(data.dim(), data.num_classes(), features, data.labels().to_vec())
}
