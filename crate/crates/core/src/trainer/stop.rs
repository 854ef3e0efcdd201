//! Early-stopping policies.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopKind {
    /// No new validation-loss minimum for `patience` epochs.
    Standard,
    /// Relative flatness change below `threshold` for `patience` epochs.
    Flatness,
    /// Both of the above at the same epoch.
    Combined,
}

impl StopKind {
    pub const ALL: [StopKind; 3] = [StopKind::Standard, StopKind::Flatness, StopKind::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Flatness => "flatness",
            Self::Combined => "combined",
        }
    }
}

impl fmt::Display for StopKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_patience() -> usize {
    10
}
fn default_threshold() -> f64 {
    0.02
}
fn default_max_epochs() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopPolicy {
    pub kind: StopKind,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
}

impl EarlyStopPolicy {
    pub fn new(kind: StopKind) -> Self {
        Self {
            kind,
            patience: default_patience(),
            threshold: default_threshold(),
            max_epochs: default_max_epochs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(validation("patience must be at least 1"));
        }
        if !self.threshold.is_finite() || self.threshold <= 0.0 {
            return Err(validation("flatness threshold must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(validation("max epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ValPlateau,
    FlatnessStable,
    Combined,
    MaxEpochs,
    Diverged,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ValPlateau => "val_plateau",
            Self::FlatnessStable => "flatness_stable",
            Self::Combined => "combined",
            Self::MaxEpochs => "max_epochs",
            Self::Diverged => "diverged",
        }
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

/// Epochs elapsed since the first occurrence of the minimum validation loss.
pub fn epochs_since_best(val_losses: &[f64]) -> usize {
    let best = val_losses
        .iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |(bi, bv), (i, &v)| {
                if v < bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            },
        )
        .0;
    val_losses.len().saturating_sub(best + 1)
}

/// Number of trailing epochs whose relative flatness change
/// `|k_e - k_{e-1}| / max(|k_{e-1}|, 1e-12)` is below `threshold`.
pub fn stable_flatness_run(flatness: &[f64], threshold: f64) -> usize {
    flatness
        .windows(2)
        .rev()
        .take_while(|w| (w[1] - w[0]).abs() / w[0].abs().max(1e-12) < threshold)
        .count()
}

/// Decision after the latest epoch of the series. Both series are indexed
/// by epoch and must have the same non-zero length.
pub fn evaluate_stop(
    val_losses: &[f64],
    flatness: &[f64],
    policy: &EarlyStopPolicy,
) -> Result<StopDecision> {
    if val_losses.is_empty() || val_losses.len() != flatness.len() {
        return Err(validation("stop history must be non-empty and aligned"));
    }
    let plateau = epochs_since_best(val_losses) >= policy.patience;
    let stable = stable_flatness_run(flatness, policy.threshold) >= policy.patience;
    Ok(match policy.kind {
        StopKind::Standard if plateau => StopDecision::Stop(StopReason::ValPlateau),
        StopKind::Flatness if stable => StopDecision::Stop(StopReason::FlatnessStable),
        StopKind::Combined if plateau && stable => StopDecision::Stop(StopReason::Combined),
        _ => StopDecision::Continue,
    })
}
