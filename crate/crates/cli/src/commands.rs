use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use convflat::experiments::{
    bound_envelope, calibrate_envelope, compare_stopping, correlate as correlate_columns,
    read_columns, run_sweep, write_stop_compare_csv, Calibration, StopCompareConfig, SweepConfig,
    SweepWriter, TaskConfig,
};
use convflat::oracles::{benchmark_methods, write_bench_csv, BenchProtocol};
use convflat::trainer::{
    inject_label_noise, train_head, write_run_csv, EarlyStopPolicy, OptimizerConfig, OptimizerKind,
    RunConfig,
};
use convflat::TimingMode;

use crate::output::{sig4, sig4_opt, OutputFile};
use crate::{BenchArgs, Failure, GlobalArgs};

type CmdResult = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn timing(g: &GlobalArgs) -> TimingMode {
    if g.record_time {
        TimingMode::Record
    } else {
        TimingMode::Omit
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let file = File::open(path)
        .with_context(|| format!("cannot open config {}", path.display()))
        .map_err(usage)?;
    serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(usage)
}

fn chunk_size() -> usize {
    rayon::current_num_threads().max(1)
}

pub fn bench(g: &GlobalArgs, a: &BenchArgs) -> CmdResult {
    let mut methods = Vec::new();
    for &m in &a.methods {
        let m = m.into();
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let protocol = BenchProtocol {
        c_in: a.cin as usize,
        hw: a.hw as usize,
        ksize: a.ksize as usize,
        stride: a.stride as usize,
        padding: a.pad as usize,
        batches: a.batches as usize,
        kernels: a.kernels as usize,
        runs: a.runs as usize,
        probes: a.probes as usize,
        weights: a.weight_init(),
        seed: g.seed.unwrap_or(0),
        fd_cap: a.fd_cap,
        dense_cap: a.dense_cap,
        methods,
    };
    protocol.validate().map_err(usage)?;
    let mut out = OutputFile::create(&a.output)?;
    let result = benchmark_methods(&protocol)?;
    write_bench_csv(out.writer(), &result.summary, timing(g))?;
    out.commit()?;

    println!(
        "{:<15} {:>4} {:>4} {:>22} {:>22} {:>22} {:>10}",
        "method", "B", "C", "trace", "abs_err", "flatness", "time_s"
    );
    let pm = |m: Option<f64>, s: Option<f64>| match (m, s) {
        (Some(m), Some(s)) => format!("{} ± {}", sig4(m), sig4(s)),
        _ => "skipped".to_string(),
    };
    for r in &result.summary {
        println!(
            "{:<15} {:>4} {:>4} {:>22} {:>22} {:>22} {:>10}",
            r.method.as_str(),
            r.batches,
            r.kernels,
            pm(r.trace_mean, r.trace_std),
            pm(r.abs_err_mean, r.abs_err_std),
            pm(r.flatness_mean, r.flatness_std),
            if g.record_time {
                sig4_opt(r.time_mean_s)
            } else {
                "-".to_string()
            },
        );
    }
    if g.verbose > 0 {
        eprintln!("wrote {}", a.output.display());
    }
    Ok(())
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::new(OptimizerKind::SgdMomentum, 0.05)
}
fn default_eval_batch() -> usize {
    256
}

/// Configuration file of `convflat train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub stop: Option<EarlyStopPolicy>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    /// Fraction of training labels corrupted, seeded by the dataset seed.
    #[serde(default)]
    pub label_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            optimizer: default_optimizer(),
            stop: None,
            eval_batch: default_eval_batch(),
            label_noise: 0.0,
        }
    }
}

pub fn train(g: &GlobalArgs, config: Option<&Path>, output: &Path) -> CmdResult {
    let mut cfg: TrainConfig = load_config(config)?;
    if let Some(s) = g.seed {
        cfg.task.reseed(s);
        cfg.optimizer.seed = s;
    }
    let run = RunConfig {
        optimizer: cfg.optimizer.clone(),
        stop: cfg.stop.clone(),
        eval_batch: cfg.eval_batch,
    };
    run.validate().map_err(usage)?;
    let task = cfg.task.prepare().map_err(usage)?;
    let labels = inject_label_noise(
        &task.data.train_labels,
        task.spec.c_out,
        cfg.label_noise,
        cfg.task.data.seed,
    )
    .map_err(usage)?;
    let data = task.data.with_train_labels(labels)?;

    let mut out = OutputFile::create(output)?;
    let outcome = train_head(&data, &task.spec, &run)?;
    write_run_csv(out.writer(), &outcome.records, timing(g))?;
    out.commit()?;

    let last = outcome.last();
    println!(
        "epochs {}  val_acc {}  gen_gap {}  flatness {}  stop {}",
        last.epoch,
        sig4(last.val_acc),
        sig4(last.gen_gap),
        sig4(last.flatness),
        outcome.stop_reason()
    );
    Ok(())
}

pub fn sweep(g: &GlobalArgs, config: Option<&Path>, output: &Path) -> CmdResult {
    let mut cfg: SweepConfig = load_config(config)?;
    if let Some(s) = g.seed {
        cfg.task.reseed(s);
    }
    cfg.validate().map_err(usage)?;
    cfg.task.prepare().map_err(usage)?;

    let mut out = OutputFile::create(output)?;
    let total = cfg.grid.cells().len();
    let verbose = g.verbose;
    let mut done = 0usize;
    {
        let mut writer = SweepWriter::new(out.writer())?;
        run_sweep(&cfg, chunk_size(), |row| {
            done += 1;
            if verbose > 0 {
                eprintln!(
                    "[{done}/{total}] {} lr={} batch={} noise={} seed={}: flatness {} gap {}",
                    row.optimizer,
                    row.lr,
                    row.batch_size,
                    row.noise_frac,
                    row.seed,
                    sig4(row.flatness),
                    sig4(row.gen_gap)
                );
            }
            writer.write_row(row)
        })?;
    }
    out.commit()?;
    if verbose > 0 {
        eprintln!("wrote {total} rows to {}", output.display());
    }
    Ok(())
}

pub fn correlate(g: &GlobalArgs, input: &Path, x: &str, y: &str, output: &Path) -> CmdResult {
    let file = File::open(input)
        .with_context(|| format!("cannot open {}", input.display()))
        .map_err(usage)?;
    let cols = read_columns(BufReader::new(file), x, y).map_err(usage)?;
    if cols.excluded_diverged + cols.excluded_non_finite > 0 || g.verbose > 0 {
        eprintln!(
            "excluded {} diverged and {} non-finite rows; {} rows used",
            cols.excluded_diverged,
            cols.excluded_non_finite,
            cols.x.len()
        );
    }
    let stats = correlate_columns(&cols.x, &cols.y)?;
    let mut out = OutputFile::create(output)?;
    serde_json::to_writer_pretty(&mut *out.writer(), &stats)?;
    std::io::Write::write_all(out.writer(), b"\n")?;
    out.commit()?;
    println!(
        "rho {}  (p {})  pearson r {}  R^2 {}  n {}",
        sig4(stats.spearman_rho),
        sig4(stats.spearman_p_value),
        sig4(stats.pearson_r),
        sig4(stats.r_squared),
        stats.n
    );
    Ok(())
}

pub struct BoundArgs {
    pub kappa: f64,
    pub samples: f64,
    pub m: f64,
    pub c1: f64,
    pub c2: f64,
    pub delta: f64,
}

#[derive(Serialize)]
struct BoundReport<'a> {
    kappa: f64,
    samples: f64,
    m: f64,
    c1: f64,
    c2: f64,
    delta: f64,
    envelope: f64,
    calibration: Option<&'a Calibration>,
}

pub fn bound(
    g: &GlobalArgs,
    a: BoundArgs,
    calibrate: Option<&Path>,
    output: Option<&Path>,
) -> CmdResult {
    bound_envelope(a.kappa, a.samples, a.m, a.c1, a.c2, a.delta).map_err(usage)?;
    let calibration = match calibrate {
        Some(path) => {
            let file = File::open(path)
                .with_context(|| format!("cannot open {}", path.display()))
                .map_err(usage)?;
            let cols = read_columns(BufReader::new(file), "flatness", "gen_gap").map_err(usage)?;
            let points: Vec<(f64, f64)> = cols.x.into_iter().zip(cols.y).collect();
            let cal = calibrate_envelope(&points, a.samples, a.m, a.delta, g.seed.unwrap_or(0))
                .map_err(usage)?;
            if g.verbose > 0 {
                eprintln!(
                    "calibrated c1 {} on {} rows, coverage {} on {} held-out rows",
                    sig4(cal.c1),
                    cal.calibration_n,
                    sig4(cal.coverage),
                    cal.holdout_n
                );
            }
            Some(cal)
        }
        None => None,
    };
    let (c1, c2) = calibration.as_ref().map_or((a.c1, a.c2), |c| (c.c1, c.c2));
    let envelope = bound_envelope(a.kappa, a.samples, a.m, c1, c2, a.delta)?;
    if let Some(path) = output {
        let report = BoundReport {
            kappa: a.kappa,
            samples: a.samples,
            m: a.m,
            c1,
            c2,
            delta: a.delta,
            envelope,
            calibration: calibration.as_ref(),
        };
        let mut out = OutputFile::create(path)?;
        serde_json::to_writer_pretty(&mut *out.writer(), &report)?;
        std::io::Write::write_all(out.writer(), b"\n")?;
        out.commit()?;
    }
    println!("{envelope:.16e}");
    Ok(())
}

pub fn stop_compare(g: &GlobalArgs, config: Option<&Path>, output: &Path) -> CmdResult {
    let mut cfg: StopCompareConfig = load_config(config)?;
    if let Some(s) = g.seed {
        cfg.task.reseed(s);
        cfg.first_seed = s;
    }
    cfg.validate().map_err(usage)?;
    cfg.task.prepare().map_err(usage)?;

    let mut out = OutputFile::create(output)?;
    let (runs, summary) = compare_stopping(&cfg)?;
    write_stop_compare_csv(out.writer(), &summary, timing(g))?;
    out.commit()?;

    let diverged = runs.iter().filter(|r| r.diverged).count();
    if diverged > 0 {
        eprintln!("{diverged} diverged runs excluded from the means");
    }
    println!(
        "{:<10} {:>5} {:>10} {:>10} {:>12}",
        "strategy", "runs", "epochs", "val_acc", "flatness"
    );
    for s in &summary {
        println!(
            "{:<10} {:>5} {:>10} {:>10} {:>12}",
            s.strategy.as_str(),
            s.runs,
            sig4(s.mean_epochs),
            sig4(s.mean_val_acc),
            sig4(s.mean_final_flatness)
        );
    }
    Ok(())
}
