//! SGD, SGD with momentum and AdamW on flat parameter slices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    #[serde(rename = "adamw")]
    AdamW,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::SgdMomentum => "sgd_momentum",
            Self::AdamW => "adamw",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "sgd_momentum" => Ok(Self::SgdMomentum),
            "adamw" => Ok(Self::AdamW),
            other => Err(validation(format!("unknown optimizer `{other}`"))),
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: 0,
        }
    }

    /// A zero learning rate is accepted (a frozen run); negative or
    /// non-finite rates are not.
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(validation("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(validation("momentum must lie in [0, 1)"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(validation(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(validation("eps must be positive"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(validation("weight decay must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(validation("batch size must be positive"));
        }
        if self.epochs == 0 {
            return Err(validation("epochs must be positive"));
        }
        Ok(())
    }
}

/// `k <- k - lr * g`.
pub fn step_sgd(k: &mut [f64], g: &[f64], lr: f64) {
    for (w, &gi) in k.iter_mut().zip(g) {
        *w -= lr * gi;
    }
}

/// `v <- mu v + g`, `k <- k - lr v`.
pub fn step_sgd_momentum(k: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, mu: f64) {
    for ((w, vi), &gi) in k.iter_mut().zip(v.iter_mut()).zip(g) {
        *vi = mu * *vi + gi;
        *w -= lr * *vi;
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Decoupled weight decay `k <- k - lr * wd * k`, then the bias-corrected
/// Adam step.
pub fn step_adamw(k: &mut [f64], state: &mut AdamState, g: &[f64], cfg: &OptimizerConfig) {
    state.t += 1;
    let lr = cfg.learning_rate;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((w, m), v), &gi) in k
        .iter_mut()
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
        .zip(g)
    {
        *w -= lr * cfg.weight_decay * *w;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Optimizer state owned by one run.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    velocity: Vec<f64>,
    adam: AdamState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: vec![0.0; n],
            adam: AdamState::new(n),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step(&mut self, k: &mut [f64], g: &[f64]) {
        debug_assert_eq!(k.len(), g.len());
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => step_sgd(k, g, lr),
            OptimizerKind::SgdMomentum => {
                step_sgd_momentum(k, &mut self.velocity, g, lr, self.config.momentum)
            }
            OptimizerKind::AdamW => step_adamw(k, &mut self.adam, g, &self.config),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let mut k = vec![0.5, -1.0, 2.0];
        step_sgd(&mut k, &[0.0; 3], 0.3);
        assert_eq!(k, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn momentum_unrolls() {
        let (lr, mu) = (0.1, 0.9);
        let k0 = [1.0, -2.0];
        let g = [0.5, 3.0];
        let mut k = k0.to_vec();
        let mut v = vec![0.0; 2];
        step_sgd_momentum(&mut k, &mut v, &g, lr, mu);
        step_sgd_momentum(&mut k, &mut v, &g, lr, mu);
        for i in 0..2 {
            assert_relative_eq!(k[i], k0[i] - lr * (2.0 + mu) * g[i], max_relative = 1e-14);
        }
    }

    #[test]
    fn adamw_first_step_is_sign_like() {
        let mut cfg = OptimizerConfig::new(OptimizerKind::AdamW, 0.01);
        cfg.weight_decay = 0.0;
        let g = [0.3, -7.0, 1e-3];
        let mut k = vec![0.0; 3];
        let mut st = AdamState::new(3);
        step_adamw(&mut k, &mut st, &g, &cfg);
        for i in 0..3 {
            assert_relative_eq!(k[i], -0.01 * g[i].signum(), max_relative = 1e-4);
        }
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut cfg = OptimizerConfig::new(OptimizerKind::AdamW, 0.1);
        cfg.weight_decay = 0.5;
        let mut k = vec![2.0];
        let mut st = AdamState::new(1);
        step_adamw(&mut k, &mut st, &[0.0], &cfg);
        assert_relative_eq!(k[0], 2.0 * (1.0 - 0.05));
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(OptimizerConfig::new(OptimizerKind::Sgd, 0.0)
            .validate()
            .is_ok());
        assert!(OptimizerConfig::new(OptimizerKind::Sgd, -1.0)
            .validate()
            .is_err());
        let mut c = OptimizerConfig::new(OptimizerKind::AdamW, 0.1);
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
        for k in [
            OptimizerKind::Sgd,
            OptimizerKind::SgdMomentum,
            OptimizerKind::AdamW,
        ] {
            assert_eq!(k.as_str().parse::<OptimizerKind>().unwrap(), k);
        }
        let c: OptimizerConfig =
            serde_json::from_str(r#"{"kind":"adamw","learning_rate":0.01}"#).unwrap();
        assert_eq!(c.weight_decay, 0.01);
        assert!(serde_json::from_str::<OptimizerConfig>(
            r#"{"kind":"sgd","learning_rate":0.1,"lr":1}"#
        )
        .is_err());
    }
}
