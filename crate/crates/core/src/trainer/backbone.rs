//! Frozen random feature extractor in front of the trainable head.
//!
//! A raw vector `u` of length `m` is rendered into an `m`-channel image with
//! channel `i` equal to `u_i * template_i` (templates drawn from
//! `uniform(-1, 1)` per pixel), passed through a fixed 3x3
//! convolution (padding 1) to `channels` maps, and rectified.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::tensor::{ConvSpec, PatchSummary, Tensor3};

const KSIZE: usize = 3;

fn default_channels() -> usize {
    16
}
fn default_side() -> usize {
    6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Feature maps produced (`C_in` of the head).
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: default_channels(),
            height: default_side(),
            width: default_side(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    input_dim: usize,
    config: BackboneConfig,
    /// `input_dim x height x width`.
    templates: Vec<f64>,
    /// `channels x input_dim x 3 x 3`.
    weights: Vec<f64>,
}

impl Backbone {
    /// Draws the frozen parameters for raw vectors of length `input_dim`.
    pub fn new(input_dim: usize, config: BackboneConfig) -> Result<Self> {
        if input_dim == 0 || config.channels == 0 || config.height == 0 || config.width == 0 {
            return Err(validation("backbone dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let m = input_dim;
        let hw = config.height * config.width;
        let pattern = Uniform::new(-1.0, 1.0).expect("valid range");
        let templates = (0..m * hw).map(|_| pattern.sample(&mut rng)).collect();
        let normal = Normal::new(0.0, (1.0 / (m * KSIZE * KSIZE) as f64).sqrt())
            .expect("positive standard deviation");
        let weights = (0..config.channels * m * KSIZE * KSIZE)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(Self {
            input_dim,
            config,
            templates,
            weights,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Head geometry on this backbone's feature maps.
    pub fn head_spec(
        &self,
        c_out: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
    ) -> Result<ConvSpec> {
        ConvSpec::new(
            self.config.channels,
            c_out,
            ksize,
            ksize,
            stride,
            padding,
            self.config.height,
            self.config.width,
        )
    }

    pub fn features(&self, u: &[f64]) -> Result<Tensor3<f64>> {
        let m = self.input_dim;
        let BackboneConfig {
            channels,
            height: h,
            width: w,
            ..
        } = self.config;
        if u.len() != m {
            return Err(validation(format!(
                "input has length {}, backbone expects {m}",
                u.len()
            )));
        }
        let hw = h * w;
        Ok(Tensor3::from_fn(channels, h, w, |c, y, x| {
            let mut acc = 0.0;
            for (i, &ui) in u.iter().enumerate() {
                let tmpl = &self.templates[i * hw..(i + 1) * hw];
                let ker = &self.weights[(c * m + i) * KSIZE * KSIZE..][..KSIZE * KSIZE];
                for dy in 0..KSIZE {
                    let Some(yy) = (y + dy).checked_sub(1).filter(|&v| v < h) else {
                        continue;
                    };
                    for dx in 0..KSIZE {
                        let Some(xx) = (x + dx).checked_sub(1).filter(|&v| v < w) else {
                            continue;
                        };
                        acc += ker[dy * KSIZE + dx] * ui * tmpl[yy * w + xx];
                    }
                }
            }
            acc.max(0.0)
        }))
    }

    /// Average-patch summary of the head's input for every raw vector.
    pub fn summarize(&self, inputs: &[Vec<f64>], spec: &ConvSpec) -> Result<PatchSummary<f64>> {
        let feats = inputs
            .iter()
            .map(|u| self.features(u))
            .collect::<Result<Vec<_>>>()?;
        PatchSummary::from_inputs(&feats, spec)
    }
}
