//! Seeded synthetic datasets: sparse Gaussian blobs with an MNIST-like zero
//! background, and Bernoulli binary feature vectors.

use std::path::PathBuf;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{load_mnist_idx, Dataset};
use crate::error::{Error, Result};

/// Class `k` has center `(1 - separation) * shared + separation * own_k`, where
/// both templates are nonzero on `support` random coordinates. Gaussian noise is
/// added only where the center is nonzero, and values are clipped to `[0, 1]`.
/// With `separation = 0` every class has the same distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub num_samples: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub separation: f64,
    pub noise: f64,
    pub support: usize,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            num_samples: 500,
            dim: 784,
            num_classes: 4,
            separation: 1.0,
            noise: 0.1,
            support: 120,
            seed: 0,
        }
    }
}

/// Class `k` sets bit `i` with probability `(1 - separation) * base_i + separation * q_ki`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySpec {
    pub num_samples: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub separation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    MnistIdx { images: PathBuf, labels: PathBuf },
    SyntheticBlobs(BlobSpec),
    SyntheticBinary(BinarySpec),
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (n, dim, k, sep) = match self {
            DatasetSpec::MnistIdx { .. } => return Ok(()),
            DatasetSpec::SyntheticBlobs(s) => {
                if s.support == 0 || s.support > s.dim {
                    return Err(Error::config(format!("blob support {} must be in 1..={}", s.support, s.dim)));
                }
                if !(s.noise >= 0.0 && s.noise.is_finite()) {
                    return Err(Error::config("blob noise must be finite and non-negative"));
                }
                (s.num_samples, s.dim, s.num_classes, s.separation)
            }
            DatasetSpec::SyntheticBinary(s) => (s.num_samples, s.dim, s.num_classes, s.separation),
        };
        if n == 0 || dim == 0 {
            return Err(Error::config("sample count and dimension must be positive"));
        }
        if k < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if !(0.0..=1.0).contains(&sep) {
            return Err(Error::config(format!("separation {sep} must lie in [0, 1]")));
        }
        Ok(())
    }

    /// Generates or loads the dataset.
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::MnistIdx { images, labels } => load_mnist_idx(images, labels),
            _ => gen_synthetic(self),
        }
    }
}

pub fn gen_synthetic(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    match spec {
        DatasetSpec::SyntheticBlobs(s) => Ok(blobs(s)),
        DatasetSpec::SyntheticBinary(s) => Ok(binary(s)),
        DatasetSpec::MnistIdx { .. } => Err(Error::config("mnist_idx datasets are loaded, not generated")),
    }
}

fn sparse_template(rng: &mut ChaCha8Rng, dim: usize, support: usize) -> Vec<f64> {
    let mut t = vec![0.0; dim];
    for i in index::sample(rng, dim, support) {
        t[i] = rng.random_range(0.5..1.0);
    }
    t
}

fn blobs(s: &BlobSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let shared = sparse_template(&mut rng, s.dim, s.support);
    let centers: Vec<Vec<f64>> = (0..s.num_classes)
        .map(|_| {
            let own = sparse_template(&mut rng, s.dim, s.support);
            shared
                .iter()
                .zip(&own)
                .map(|(a, b)| (1.0 - s.separation) * a + s.separation * b)
                .collect()
        })
        .collect();
    let normal = Normal::new(0.0, s.noise).expect("noise validated");
    let mut features = Vec::with_capacity(s.num_samples * s.dim);
    let mut labels = Vec::with_capacity(s.num_samples);
    for i in 0..s.num_samples {
        let y = i % s.num_classes;
        for &c in &centers[y] {
            let v = if c > 0.0 { (c + normal.sample(&mut rng)).clamp(0.0, 1.0) } else { 0.0 };
            features.push(v);
        }
        labels.push(y);
    }
    Dataset::new(s.dim, s.num_classes, features, labels).expect("generator emits consistent shapes")
}

fn binary(s: &BinarySpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let base: Vec<f64> = (0..s.dim).map(|_| rng.random_range(0.05..0.5)).collect();
    let probs: Vec<Vec<f64>> = (0..s.num_classes)
        .map(|_| {
            base.iter()
                .map(|&b| {
                    let q = if rng.random_bool(0.3) { 0.9 } else { 0.05 };
                    (1.0 - s.separation) * b + s.separation * q
                })
                .collect()
        })
        .collect();
    let mut features = Vec::with_capacity(s.num_samples * s.dim);
    let mut labels = Vec::with_capacity(s.num_samples);
    for i in 0..s.num_samples {
        let y = i % s.num_classes;
        for &p in &probs[y] {
            let bit = Bernoulli::new(p).expect("probability in [0,1]").sample(&mut rng);
            features.push(if bit { 1.0 } else { 0.0 });
        }
        labels.push(y);
    }
    Dataset::new(s.dim, s.num_classes, features, labels).expect("generator emits consistent shapes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_spec(separation: f64) -> DatasetSpec {
        DatasetSpec::SyntheticBlobs(BlobSpec {
            num_samples: 400,
            dim: 20,
            num_classes: 2,
            separation,
            noise: 0.1,
            support: 8,
            seed: 7,
        })
    }

    fn class_means(d: &Dataset) -> Vec<Vec<f64>> {
        let mut sums = vec![vec![0.0; d.dim()]; d.num_classes()];
        let mut counts = vec![0.0; d.num_classes()];
        for (x, y) in d.iter() {
            counts[y] += 1.0;
            sums[y].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        sums.iter()
            .zip(counts)
            .map(|(s, c)| s.iter().map(|v| v / c).collect())
            .collect()
    }

    #[test]
    fn zero_separation_gives_identical_class_distributions() {
        let d = gen_synthetic(&blob_spec(0.0)).unwrap();
        let m = class_means(&d);
        // Same support and center for both classes; only noise differs.
        for (a, b) in m[0].iter().zip(&m[1]) {
            assert_eq!(*a == 0.0, *b == 0.0);
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }

    #[test]
    fn separated_classes_have_distinct_means() {
        let d = gen_synthetic(&blob_spec(1.0)).unwrap();
        let m = class_means(&d);
        let gap: f64 = m[0].iter().zip(&m[1]).map(|(a, b)| (a - b).abs()).sum();
        assert!(gap > 1.0);
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(gen_synthetic(&blob_spec(0.5)).unwrap(), gen_synthetic(&blob_spec(0.5)).unwrap());
    }

    #[test]
    fn binary_features_are_bits() {
        let spec = DatasetSpec::SyntheticBinary(BinarySpec {
            num_samples: 50,
            dim: 30,
            num_classes: 2,
            separation: 0.8,
            seed: 1,
        });
        let d = gen_synthetic(&spec).unwrap();
        assert!(d.features().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn invalid_params_rejected() {
        let s = BlobSpec { num_samples: 0, ..Default::default() };
        assert!(gen_synthetic(&DatasetSpec::SyntheticBlobs(s)).is_err());
    }
}
