//! Training of the convolutional head over a frozen backbone.
//!
//! Because the head pools globally, its logits depend on an input only
//! through the average patch. Features are therefore summarized once and
//! every epoch works on the summaries.

mod backbone;
mod optim;
mod stop;

use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneConfig};
pub use optim::{
    step_adamw, step_sgd, step_sgd_momentum, AdamState, Optimizer, OptimizerConfig, OptimizerKind,
};
pub use stop::{
    epochs_since_best, evaluate_stop, stable_flatness_run, EarlyStopPolicy, StopDecision, StopKind,
    StopReason,
};

use crate::error::{validation, Result};
use crate::flatness::{
    mean_softmax_curvature, relative_flatness, symbolic_trace_batch, FlatnessVariant,
};
use crate::head::{forward_classes, gradient_classes, KernelBank};
use crate::io::{fmt_f64, fmt_time, TimingMode};
use crate::tensor::{ConvSpec, PatchSummary};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Raw input vectors with class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Labeled {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Labeled {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Labeled,
    pub val: Labeled,
    pub classes: usize,
}

/// Average-patch summaries of a split, ready for the head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadData {
    pub train: PatchSummary<f64>,
    pub train_labels: Vec<usize>,
    pub val: PatchSummary<f64>,
    pub val_labels: Vec<usize>,
}

impl HeadData {
    pub fn from_split(split: &Split, backbone: &Backbone, spec: &ConvSpec) -> Result<Self> {
        if split.classes != spec.c_out {
            return Err(validation(format!(
                "{} classes but the head has {} kernels",
                split.classes, spec.c_out
            )));
        }
        for part in [&split.train, &split.val] {
            if part.is_empty() || part.inputs.len() != part.labels.len() {
                return Err(validation(
                    "train and validation sets must be non-empty and labeled",
                ));
            }
            if part.labels.iter().any(|&c| c >= split.classes) {
                return Err(validation("label outside the class range"));
            }
        }
        Ok(Self {
            train: backbone.summarize(&split.train.inputs, spec)?,
            train_labels: split.train.labels.clone(),
            val: backbone.summarize(&split.val.inputs, spec)?,
            val_labels: split.val.labels.clone(),
        })
    }

    /// Same summaries with replaced training labels.
    pub fn with_train_labels(&self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.train_labels.len() {
            return Err(validation("replacement labels have the wrong length"));
        }
        Ok(Self {
            train_labels: labels,
            ..self.clone()
        })
    }
}

fn default_eval_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub optimizer: OptimizerConfig,
    /// Without a policy the run lasts `optimizer.epochs`; with one it lasts
    /// until the policy fires or `max_epochs`.
    #[serde(default)]
    pub stop: Option<EarlyStopPolicy>,
    /// Validation samples the trace and flatness are evaluated on.
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

impl RunConfig {
    pub fn new(optimizer: OptimizerConfig) -> Self {
        Self {
            optimizer,
            stop: None,
            eval_batch: default_eval_batch(),
        }
    }

    pub fn with_stop(mut self, stop: EarlyStopPolicy) -> Self {
        self.stop = Some(stop);
        self
    }

    pub fn epoch_budget(&self) -> usize {
        self.stop
            .as_ref()
            .map_or(self.optimizer.epochs, |p| p.max_epochs)
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if let Some(p) = &self.stop {
            p.validate()?;
        }
        if self.eval_batch == 0 {
            return Err(validation("evaluation batch must be positive"));
        }
        Ok(())
    }
}

/// One completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub gen_gap: f64,
    pub trace: f64,
    pub flatness: f64,
    pub val_acc: f64,
    pub time_s: f64,
    pub stop_reason: Option<StopReason>,
}

/// Metrics of the head at one point in training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Snapshot {
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub trace: f64,
    pub flatness: f64,
    /// Mean softmax curvature on the evaluation batch.
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<RunRecord>,
    /// Metrics at initialization, before any update.
    pub initial: Snapshot,
    /// Metrics after each epoch.
    pub snapshots: Vec<Snapshot>,
    pub kernels: KernelBank<f64>,
}

impl TrainOutcome {
    pub fn last(&self) -> &RunRecord {
        self.records.last().expect("a run has at least one epoch")
    }

    pub fn stop_reason(&self) -> StopReason {
        self.last().stop_reason.unwrap_or(StopReason::MaxEpochs)
    }

    pub fn diverged(&self) -> bool {
        self.stop_reason() == StopReason::Diverged
    }
}

struct Evaluator<'a> {
    data: &'a HeadData,
    eval: PatchSummary<f64>,
    eval_labels: Vec<usize>,
}

impl Evaluator<'_> {
    fn snapshot(&self, k: &KernelBank<f64>) -> Result<Snapshot> {
        let train = forward_classes(&self.data.train, k, &self.data.train_labels)?;
        let val = forward_classes(&self.data.val, k, &self.data.val_labels)?;
        let eval = forward_classes(&self.eval, k, &self.eval_labels)?;
        Ok(Snapshot {
            train_loss: train.mean_loss,
            val_loss: val.mean_loss,
            val_acc: val.accuracy(&self.data.val_labels),
            trace: symbolic_trace_batch(&eval, &self.eval)?,
            flatness: relative_flatness(&eval, &self.eval, k, FlatnessVariant::Table)?,
            alpha: mean_softmax_curvature(&eval),
        })
    }
}

fn diverged(s: &Snapshot, k: &KernelBank<f64>) -> bool {
    let losses_ok = [s.train_loss, s.val_loss]
        .iter()
        .all(|l| l.is_finite() && *l <= DIVERGENCE_LOSS);
    !losses_ok || !k.weights().is_finite()
}

/// Trains the head on raw inputs passed through `backbone`.
pub fn train(
    split: &Split,
    backbone: &Backbone,
    spec: &ConvSpec,
    config: &RunConfig,
) -> Result<TrainOutcome> {
    train_head(&HeadData::from_split(split, backbone, spec)?, spec, config)
}

/// Trains the head on precomputed summaries.
///
/// The generator seeded with `config.optimizer.seed` draws, in order, the
/// evaluation subset, the initial kernels `uniform(-1/sqrt(d), 1/sqrt(d))`
/// and one shuffle per epoch.
pub fn train_head(data: &HeadData, spec: &ConvSpec, config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let opt = &config.optimizer;
    if data.train.flat_dim() != spec.flat_dim() || data.val.flat_dim() != spec.flat_dim() {
        return Err(validation("summaries do not match the head geometry"));
    }
    if data.train.batch_size() == 0 || data.val.batch_size() == 0 {
        return Err(validation("train and validation sets must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);

    let n_val = data.val.batch_size();
    let eval_idx = sample(&mut rng, n_val, config.eval_batch.min(n_val)).into_vec();
    let evaluator = Evaluator {
        data,
        eval: data.val.select(&eval_idx),
        eval_labels: eval_idx.iter().map(|&i| data.val_labels[i]).collect(),
    };

    let bound = 1.0 / (spec.flat_dim() as f64).sqrt();
    let mut k = KernelBank::uniform(spec, -bound, bound, &mut rng);
    let initial = evaluator.snapshot(&k)?;
    let mut optimizer = Optimizer::new(opt.clone(), k.param_count())?;

    let n_train = data.train.batch_size();
    let mut order: Vec<usize> = (0..n_train).collect();
    let budget = config.epoch_budget();
    let mut records: Vec<RunRecord> = Vec::with_capacity(budget);
    let mut snapshots = Vec::with_capacity(budget);
    let mut val_hist = Vec::with_capacity(budget);
    let mut flat_hist = Vec::with_capacity(budget);

    for epoch in 1..=budget {
        let start = Instant::now();
        order.shuffle(&mut rng);
        for chunk in order.chunks(opt.batch_size) {
            let sub = data.train.select(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train_labels[i]).collect();
            let out = forward_classes(&sub, &k, &labels)?;
            let g = gradient_classes(&out, &sub, &labels)?;
            optimizer.step(k.as_mut_slice(), g.as_slice());
        }
        let snap = evaluator.snapshot(&k)?;
        let mut record = RunRecord {
            seed: opt.seed,
            optimizer: opt.kind,
            lr: opt.learning_rate,
            batch_size: opt.batch_size,
            epoch,
            train_loss: snap.train_loss,
            val_loss: snap.val_loss,
            gen_gap: snap.val_loss - snap.train_loss,
            trace: snap.trace,
            flatness: snap.flatness,
            val_acc: snap.val_acc,
            time_s: start.elapsed().as_secs_f64(),
            stop_reason: None,
        };
        snapshots.push(snap);
        if diverged(&snap, &k) {
            record.stop_reason = Some(StopReason::Diverged);
            records.push(record);
            break;
        }
        val_hist.push(snap.val_loss);
        flat_hist.push(snap.flatness);
        if let Some(policy) = &config.stop {
            if let StopDecision::Stop(reason) = evaluate_stop(&val_hist, &flat_hist, policy)? {
                record.stop_reason = Some(reason);
            }
        }
        if record.stop_reason.is_none() && epoch == budget {
            record.stop_reason = Some(StopReason::MaxEpochs);
        }
        let done = record.stop_reason.is_some();
        records.push(record);
        if done {
            break;
        }
    }

    Ok(TrainOutcome {
        records,
        initial,
        snapshots,
        kernels: k,
    })
}

/// Reassigns exactly `round(p * N)` distinct labels, chosen without
/// replacement, to a uniformly drawn different class.
pub fn inject_label_noise(
    labels: &[usize],
    classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(validation("noise fraction must lie in [0, 1]"));
    }
    if labels.iter().any(|&c| c >= classes) {
        return Err(validation("label outside the class range"));
    }
    let count = (fraction * labels.len() as f64).round() as usize;
    let mut out = labels.to_vec();
    if count == 0 {
        return Ok(out);
    }
    if classes < 2 {
        return Err(validation("label noise needs at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, labels.len(), count) {
        let draw = rng.random_range(0..classes - 1);
        out[i] = if draw >= labels[i] { draw + 1 } else { draw };
    }
    Ok(out)
}

pub const RUN_CSV_HEADER: [&str; 13] = [
    "seed",
    "optimizer",
    "lr",
    "batch_size",
    "epoch",
    "train_loss",
    "val_loss",
    "gen_gap",
    "trace",
    "flatness",
    "val_acc",
    "time_s",
    "stop_reason",
];

pub fn write_run_csv<W: Write>(w: W, records: &[RunRecord], timing: TimingMode) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(RUN_CSV_HEADER)?;
    for r in records {
        wr.write_record([
            r.seed.to_string(),
            r.optimizer.as_str().to_string(),
            r.lr.to_string(),
            r.batch_size.to_string(),
            r.epoch.to_string(),
            fmt_f64(r.train_loss),
            fmt_f64(r.val_loss),
            fmt_f64(r.gen_gap),
            fmt_f64(r.trace),
            fmt_f64(r.flatness),
            fmt_f64(r.val_acc),
            fmt_time(r.time_s, timing),
            r.stop_reason
                .map(|s| s.as_str())
                .unwrap_or_default()
                .to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
