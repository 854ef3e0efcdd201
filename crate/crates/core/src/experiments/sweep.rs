//! Grid sweeps over optimizers, learning rates, batch sizes, seeds and
//! label noise.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Task, TaskConfig};
use crate::error::{validation, Result};
use crate::io::fmt_f64;
use crate::trainer::{
    inject_label_noise, train_head, EarlyStopPolicy, OptimizerConfig, OptimizerKind, RunConfig,
    StopReason, TrainOutcome,
};

fn default_optimizers() -> Vec<OptimizerKind> {
    vec![OptimizerKind::SgdMomentum, OptimizerKind::AdamW]
}
fn default_learning_rates() -> Vec<f64> {
    vec![0.001, 0.005, 0.01, 0.05]
}
fn default_batch_sizes() -> Vec<usize> {
    vec![32, 64, 128]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_noise_levels() -> Vec<f64> {
    vec![0.0]
}
fn default_epochs() -> usize {
    50
}
fn default_eval_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default = "default_optimizers")]
    pub optimizers: Vec<OptimizerKind>,
    #[serde(default = "default_learning_rates")]
    pub learning_rates: Vec<f64>,
    #[serde(default = "default_batch_sizes")]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_noise_levels")]
    pub noise_levels: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            optimizers: default_optimizers(),
            learning_rates: default_learning_rates(),
            batch_sizes: default_batch_sizes(),
            seeds: default_seeds(),
            noise_levels: default_noise_levels(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub noise_frac: f64,
    pub seed: u64,
}

impl SweepGrid {
    /// Cells in row order: optimizer, learning rate, batch size, noise
    /// level, seed (innermost).
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut cells = Vec::new();
        for &optimizer in &self.optimizers {
            for &lr in &self.learning_rates {
                for &batch_size in &self.batch_sizes {
                    for &noise_frac in &self.noise_levels {
                        for &seed in &self.seeds {
                            cells.push(SweepCell {
                                optimizer,
                                lr,
                                batch_size,
                                noise_frac,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub grid: SweepGrid,
    /// Epochs per run when no stopping policy is set.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub stop: Option<EarlyStopPolicy>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self::new(TaskConfig::default(), SweepGrid::default())
    }
}

impl SweepConfig {
    pub fn new(task: TaskConfig, grid: SweepGrid) -> Self {
        Self {
            task,
            grid,
            epochs: default_epochs(),
            stop: None,
            eval_batch: default_eval_batch(),
        }
    }

    fn run_config(&self, cell: &SweepCell) -> RunConfig {
        let mut opt = OptimizerConfig::new(cell.optimizer, cell.lr);
        opt.batch_size = cell.batch_size;
        opt.epochs = self.epochs;
        opt.seed = cell.seed;
        RunConfig {
            optimizer: opt,
            stop: self.stop.clone(),
            eval_batch: self.eval_batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.cells().is_empty() {
            return Err(validation("sweep grid is empty"));
        }
        for cell in self.grid.cells() {
            self.run_config(&cell).validate()?;
            if !(0.0..=1.0).contains(&cell.noise_frac) {
                return Err(validation("noise levels must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Final state of one sweep run.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub noise_frac: f64,
    pub epochs_run: usize,
    pub val_acc: f64,
    pub gen_gap: f64,
    pub flatness: f64,
    pub trace: f64,
    pub stop_reason: StopReason,
}

impl SweepRow {
    fn from_outcome(cell: &SweepCell, outcome: &TrainOutcome) -> Self {
        let last = outcome.last();
        Self {
            seed: cell.seed,
            optimizer: cell.optimizer,
            lr: cell.lr,
            batch_size: cell.batch_size,
            noise_frac: cell.noise_frac,
            epochs_run: last.epoch,
            val_acc: last.val_acc,
            gen_gap: last.gen_gap,
            flatness: last.flatness,
            trace: last.trace,
            stop_reason: outcome.stop_reason(),
        }
    }

    pub fn diverged(&self) -> bool {
        self.stop_reason == StopReason::Diverged
    }
}

fn run_cell(task: &Task, config: &SweepConfig, cell: &SweepCell) -> Result<SweepRow> {
    let labels = inject_label_noise(
        &task.data.train_labels,
        task.spec.c_out,
        cell.noise_frac,
        cell.seed,
    )?;
    let data = task.data.with_train_labels(labels)?;
    let outcome = train_head(&data, &task.spec, &config.run_config(cell))?;
    Ok(SweepRow::from_outcome(cell, &outcome))
}

/// Runs every cell of the grid on one prepared task. Cells run in parallel
/// in chunks of `chunk` (at least 1); `sink` receives rows in grid order as
/// each chunk completes, so the output is the same for any chunk size.
pub fn run_sweep<F>(config: &SweepConfig, chunk: usize, mut sink: F) -> Result<Vec<SweepRow>>
where
    F: FnMut(&SweepRow) -> Result<()>,
{
    config.validate()?;
    let task = config.task.prepare()?;
    let cells = config.grid.cells();
    let mut rows = Vec::with_capacity(cells.len());
    for group in cells.chunks(chunk.max(1)) {
        let done = group
            .par_iter()
            .map(|cell| run_cell(&task, config, cell))
            .collect::<Result<Vec<_>>>()?;
        for row in done {
            sink(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: [&str; 11] = [
    "seed",
    "optimizer",
    "lr",
    "batch_size",
    "noise_frac",
    "epochs_run",
    "val_acc",
    "gen_gap",
    "flatness",
    "trace",
    "stop_reason",
];

/// Incremental sweep CSV writer; every row is flushed as it is written.
pub struct SweepWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> SweepWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(SWEEP_CSV_HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write_row(&mut self, r: &SweepRow) -> Result<()> {
        self.inner.write_record([
            r.seed.to_string(),
            r.optimizer.as_str().to_string(),
            r.lr.to_string(),
            r.batch_size.to_string(),
            r.noise_frac.to_string(),
            r.epochs_run.to_string(),
            fmt_f64(r.val_acc),
            fmt_f64(r.gen_gap),
            fmt_f64(r.flatness),
            fmt_f64(r.trace),
            r.stop_reason.as_str().to_string(),
        ])?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Two numeric columns read from a CSV table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColumnPair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Rows dropped because `stop_reason` was `diverged`.
    pub excluded_diverged: usize,
    /// Rows dropped because a value was missing or not finite.
    pub excluded_non_finite: usize,
}

/// Reads columns `x` and `y` by header name, skipping diverged runs and
/// rows without finite values.
pub fn read_columns<R: Read>(r: R, x: &str, y: &str) -> Result<ColumnPair> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| validation(format!("column `{name}` not found")))
    };
    let (xi, yi) = (find(x)?, find(y)?);
    let reason = headers.iter().position(|h| h == "stop_reason");
    let mut out = ColumnPair::default();
    for rec in rdr.records() {
        let rec = rec?;
        if reason.and_then(|i| rec.get(i)) == Some(StopReason::Diverged.as_str()) {
            out.excluded_diverged += 1;
            continue;
        }
        let parse = |i: usize| rec.get(i).and_then(|s| s.trim().parse::<f64>().ok());
        match (parse(xi), parse(yi)) {
            (Some(a), Some(b)) if a.is_finite() && b.is_finite() => {
                out.x.push(a);
                out.y.push(b);
            }
            _ => out.excluded_non_finite += 1,
        }
    }
    Ok(out)
}
