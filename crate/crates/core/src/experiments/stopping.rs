//! Side-by-side comparison of the stopping strategies.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TaskConfig;
use crate::error::{validation, Result};
use crate::io::{fmt_f64, fmt_time, TimingMode};
use crate::oracles::mean_std;
use crate::trainer::{
    inject_label_noise, train_head, EarlyStopPolicy, OptimizerConfig, OptimizerKind, RunConfig,
    StopKind,
};

fn default_task() -> TaskConfig {
    let mut task = TaskConfig::default();
    task.data.mean_separation = 6.0;
    task
}
fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::new(OptimizerKind::SgdMomentum, 0.5)
}
fn default_runs() -> usize {
    40
}
fn default_strategies() -> Vec<StopKind> {
    StopKind::ALL.to_vec()
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
fn default_eval_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopCompareConfig {
    /// Defaults to the standard task with class means 6 apart instead of 8,
    /// so that a few validation points stay misclassified.
    #[serde(default = "default_task")]
    pub task: TaskConfig,
    /// Run `i` uses optimizer seed `first_seed + i`.
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub first_seed: u64,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StopKind>,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    /// Fraction of training labels corrupted once, shared by all runs.
    #[serde(default)]
    pub label_noise: f64,
}

impl Default for StopCompareConfig {
    fn default() -> Self {
        Self {
            task: default_task(),
            optimizer: default_optimizer(),
            runs: default_runs(),
            first_seed: 0,
            strategies: default_strategies(),
            patience: default_patience(),
            threshold: default_threshold(),
            max_epochs: default_max_epochs(),
            eval_batch: default_eval_batch(),
            label_noise: 0.0,
        }
    }
}

impl StopCompareConfig {
    pub fn policy(&self, kind: StopKind) -> EarlyStopPolicy {
        EarlyStopPolicy {
            kind,
            patience: self.patience,
            threshold: self.threshold,
            max_epochs: self.max_epochs,
        }
    }

    fn run_config(&self, kind: StopKind, run: usize) -> RunConfig {
        let mut opt = self.optimizer.clone();
        opt.seed = self.first_seed.wrapping_add(run as u64);
        RunConfig {
            optimizer: opt,
            stop: Some(self.policy(kind)),
            eval_batch: self.eval_batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.strategies.is_empty() {
            return Err(validation("need at least one run and one strategy"));
        }
        for &kind in &self.strategies {
            self.run_config(kind, 0).validate()?;
        }
        Ok(())
    }
}

/// Final state of one run under one strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct StopCompareRun {
    pub strategy: StopKind,
    pub seed: u64,
    pub epochs: usize,
    pub val_acc: f64,
    pub final_flatness: f64,
    pub time_s: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategySummary {
    pub strategy: StopKind,
    pub runs: usize,
    pub mean_epochs: f64,
    pub mean_val_acc: f64,
    pub mean_final_flatness: f64,
    pub mean_time_s: f64,
}

/// Trains every seed under every strategy on one shared task and averages
/// per strategy. Diverged runs are excluded from the means.
pub fn compare_stopping(
    config: &StopCompareConfig,
) -> Result<(Vec<StopCompareRun>, Vec<StrategySummary>)> {
    config.validate()?;
    let task = config.task.prepare()?;
    let labels = inject_label_noise(
        &task.data.train_labels,
        task.spec.c_out,
        config.label_noise,
        config.task.data.seed,
    )?;
    let data = task.data.with_train_labels(labels)?;
    let jobs: Vec<(StopKind, usize)> = config
        .strategies
        .iter()
        .flat_map(|&k| (0..config.runs).map(move |r| (k, r)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(kind, r)| {
            let rc = config.run_config(kind, r);
            let outcome = train_head(&data, &task.spec, &rc)?;
            let last = outcome.last();
            Ok(StopCompareRun {
                strategy: kind,
                seed: rc.optimizer.seed,
                epochs: last.epoch,
                val_acc: last.val_acc,
                final_flatness: last.flatness,
                time_s: outcome.records.iter().map(|r| r.time_s).sum(),
                diverged: outcome.diverged(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = config
        .strategies
        .iter()
        .map(|&kind| {
            let sel: Vec<&StopCompareRun> = runs
                .iter()
                .filter(|r| r.strategy == kind && !r.diverged)
                .collect();
            let mean = |f: &dyn Fn(&StopCompareRun) -> f64| {
                if sel.is_empty() {
                    f64::NAN
                } else {
                    mean_std(&sel.iter().map(|r| f(r)).collect::<Vec<_>>()).0
                }
            };
            StrategySummary {
                strategy: kind,
                runs: sel.len(),
                mean_epochs: mean(&|r| r.epochs as f64),
                mean_val_acc: mean(&|r| r.val_acc),
                mean_final_flatness: mean(&|r| r.final_flatness),
                mean_time_s: mean(&|r| r.time_s),
            }
        })
        .collect();
    Ok((runs, summary))
}

pub const STOP_COMPARE_CSV_HEADER: [&str; 5] = [
    "strategy",
    "mean_epochs",
    "mean_val_acc",
    "mean_final_flatness",
    "mean_time_s",
];

pub fn write_stop_compare_csv<W: Write>(
    w: W,
    rows: &[StrategySummary],
    timing: TimingMode,
) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(STOP_COMPARE_CSV_HEADER)?;
    for r in rows {
        wr.write_record([
            r.strategy.as_str().to_string(),
            fmt_f64(r.mean_epochs),
            fmt_f64(r.mean_val_acc),
            fmt_f64(r.mean_final_flatness),
            fmt_time(r.mean_time_s, timing),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
