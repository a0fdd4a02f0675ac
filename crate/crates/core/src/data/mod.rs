//! Labeled datasets: IDX files and seeded synthetic generators.

mod idx;
mod synthetic;

pub use idx::{load_dataset_idx, load_mnist_idx, read_idx, save_dataset_idx, write_idx, IdxArray, IdxData};
pub use synthetic::{gen_synthetic, BinarySpec, BlobSpec, DatasetSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Samples stored contiguously, row-major `(len, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, num_classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dataset dimension must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Dimension {
                context: "dataset features",
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::consistency(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.features.chunks_exact(self.dim).zip(self.labels.iter().copied())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features,
            labels,
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Shuffles with `seed` and cuts consecutive parts with the given fractions.
    /// The last part absorbs rounding.
    pub fn split(&self, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
        let total: f64 = fractions.iter().sum();
        if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut parts = Vec::with_capacity(fractions.len());
        let mut start = 0;
        for (i, f) in fractions.iter().enumerate() {
            let end = if i + 1 == fractions.len() {
                self.len()
            } else {
                (start + (f * self.len() as f64).round() as usize).min(self.len())
            };
            parts.push(self.subset(&order[start..end]));
            start = end;
        }
        Ok(parts)
    }

    /// Fraction of samples whose label equals the most common label.
    pub fn majority_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        *counts.iter().max().unwrap() as f64 / self.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        Dataset::new(2, 2, (0..2 * n).map(|v| v as f64).collect(), (0..n).map(|i| i % 2).collect()).unwrap()
    }

    #[test]
    fn split_partitions_all_samples() {
        let d = toy(10);
        let parts = d.split(&[0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).collect::<Vec<_>>(), vec![6, 2, 2]);
        let mut seen: Vec<f64> = parts.iter().flat_map(|p| p.features().iter().step_by(2).copied()).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..10).map(|i| 2.0 * i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(toy(4).split(&[0.5, 0.6], 0).is_err());
    }

    #[test]
    fn label_range_checked() {
        assert!(Dataset::new(1, 2, vec![0.0], vec![2]).is_err());
    }
}
