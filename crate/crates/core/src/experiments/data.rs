//! Gaussian blob datasets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::trainer::{Labeled, Split};

fn default_classes() -> usize {
    4
}
fn default_dim() -> usize {
    8
}
fn default_samples_per_class() -> usize {
    100
}
fn default_separation() -> f64 {
    8.0
}
fn default_cov_scale() -> f64 {
    1.0
}
fn default_val_fraction() -> f64 {
    0.5
}

/// Class `c` is centered at `(separation / sqrt(2)) * e_c`, so every pair of
/// means is `separation` apart; samples add `cov_scale * N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobParams {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "default_separation")]
    pub mean_separation: f64,
    #[serde(default = "default_cov_scale")]
    pub cov_scale: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            dim: default_dim(),
            samples_per_class: default_samples_per_class(),
            mean_separation: default_separation(),
            cov_scale: default_cov_scale(),
            val_fraction: default_val_fraction(),
            seed: 0,
        }
    }
}

impl BlobParams {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(validation("at least two classes are needed"));
        }
        if self.classes > self.dim {
            return Err(validation("class count cannot exceed the input dimension"));
        }
        if self.samples_per_class == 0 {
            return Err(validation("samples per class must be positive"));
        }
        if !self.mean_separation.is_finite() || self.mean_separation < 0.0 {
            return Err(validation(
                "mean separation must be finite and non-negative",
            ));
        }
        if !self.cov_scale.is_finite() || self.cov_scale < 0.0 {
            return Err(validation(
                "covariance scale must be finite and non-negative",
            ));
        }
        let n = self.classes * self.samples_per_class;
        let n_val = (self.val_fraction * n as f64).round() as usize;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) || n_val == 0 || n_val == n {
            return Err(validation(
                "validation fraction must leave both splits non-empty",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub means: Vec<Vec<f64>>,
    pub params: BlobParams,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl SyntheticDataset {
    pub fn split(&self) -> Split {
        let part = |idx: &[usize]| Labeled {
            inputs: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        };
        Split {
            train: part(&self.train_idx),
            val: part(&self.val_idx),
            classes: self.classes,
        }
    }
}

pub fn generate_blobs(params: &BlobParams) -> Result<SyntheticDataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let offset = params.mean_separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..params.classes)
        .map(|c| {
            let mut m = vec![0.0; params.dim];
            m[c] = offset;
            m
        })
        .collect();
    let n = params.classes * params.samples_per_class;
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..params.samples_per_class {
            samples.push(
                mean.iter()
                    .map(|&mu| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mu + params.cov_scale * z
                    })
                    .collect(),
            );
            labels.push(c);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = (params.val_fraction * n as f64).round() as usize;
    let val_idx = order[..n_val].to_vec();
    let train_idx = order[n_val..].to_vec();
    Ok(SyntheticDataset {
        samples,
        labels,
        classes: params.classes,
        means,
        params: params.clone(),
        train_idx,
        val_idx,
    })
}
