//! Synthetic data, sweeps, correlation statistics and the bound envelope.

mod bound;
mod data;
mod stats;
mod stopping;
mod sweep;

use serde::{Deserialize, Serialize};

pub use bound::{bound_envelope, calibrate_envelope, Calibration};
pub use data::{generate_blobs, BlobParams, SyntheticDataset};
pub use stats::{average_ranks, correlate, two_sided_p, CorrelationStats, NORMAL_APPROX_N};
pub use stopping::{
    compare_stopping, write_stop_compare_csv, StopCompareConfig, StopCompareRun, StrategySummary,
    STOP_COMPARE_CSV_HEADER,
};
pub use sweep::{
    read_columns, run_sweep, ColumnPair, SweepCell, SweepConfig, SweepGrid, SweepRow, SweepWriter,
    SWEEP_CSV_HEADER,
};

use crate::error::Result;
use crate::tensor::ConvSpec;
use crate::trainer::{Backbone, BackboneConfig, HeadData};

fn default_ksize() -> usize {
    3
}
fn default_stride() -> usize {
    1
}

/// Geometry of the trainable head; its kernel count is the class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default = "default_ksize")]
    pub ksize: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            ksize: default_ksize(),
            stride: default_stride(),
            padding: 0,
        }
    }
}

/// Dataset, backbone and head shared by every run of an experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default)]
    pub data: BlobParams,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub head: HeadConfig,
}

impl TaskConfig {
    /// Sets the dataset and backbone seeds.
    pub fn reseed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.backbone.seed = seed;
    }

    pub fn prepare(&self) -> Result<Task> {
        let dataset = generate_blobs(&self.data)?;
        let backbone = Backbone::new(self.data.dim, self.backbone.clone())?;
        let spec = backbone.head_spec(
            self.data.classes,
            self.head.ksize,
            self.head.stride,
            self.head.padding,
        )?;
        let data = HeadData::from_split(&dataset.split(), &backbone, &spec)?;
        Ok(Task {
            dataset,
            backbone,
            spec,
            data,
        })
    }
}

/// A prepared task: features are summarized once and shared by all runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub dataset: SyntheticDataset,
    pub backbone: Backbone,
    pub spec: ConvSpec,
    pub data: HeadData,
}

impl Task {
    pub fn train_size(&self) -> usize {
        self.data.train_labels.len()
    }

    /// Default feature dimension of the bound: `d * C_out`.
    pub fn bound_dim(&self) -> usize {
        self.spec.param_count()
    }
}
