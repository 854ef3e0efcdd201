//! `convflat` command-line interface.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use convflat::flatness::DEFAULT_DENSE_CAP;
use convflat::oracles::{WeightInit, DEFAULT_FD_CAP};
use convflat::TraceMethod;

#[derive(Parser)]
#[command(name = "convflat", version)]
#[command(about = "Closed-form Hessian trace and relative flatness of convolutional heads")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
#[command(next_help_heading = "Global options")]
pub struct GlobalArgs {
    /// Master seed; when given it replaces the seeds of a config file [default: 0, or the config's seeds]
    #[arg(long, global = true, env = "CONVFLAT_SEED")]
    pub seed: Option<u64>,

    /// Worker threads for independent runs [default: available cores]
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: Option<u64>,

    /// Progress on stderr (repeat for more)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Fill wall-clock columns; output then differs between invocations
    #[arg(long, global = true, default_value_t = false)]
    pub record_time: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum WeightsArg {
    /// Every weight equal to one
    Ones,
    /// uniform[0, 1) times --weight-scale
    Random,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Symbolic,
    FiniteDiff,
    Hutchinson,
    DenseAnalytic,
}

impl From<MethodArg> for TraceMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Symbolic => TraceMethod::Symbolic,
            MethodArg::FiniteDiff => TraceMethod::FiniteDiff,
            MethodArg::Hutchinson => TraceMethod::Hutchinson,
            MethodArg::DenseAnalytic => TraceMethod::DenseAnalytic,
        }
    }
}

#[derive(Args, Clone, Debug)]
pub struct BenchArgs {
    /// Input channels
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub cin: u64,
    /// Input height and width
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub hw: u64,
    /// Kernel height and width
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub ksize: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub stride: u64,
    #[arg(long, default_value_t = 0)]
    pub pad: u64,
    /// Samples per batch
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub batches: u64,
    /// Output channels (classes)
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub kernels: u64,
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    pub runs: u64,
    /// Hutchinson probes per run
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    pub probes: u64,
    #[arg(long, value_enum, default_value_t = WeightsArg::Ones)]
    pub weights: WeightsArg,
    /// Scale of random weights
    #[arg(long, default_value_t = 1e-4)]
    pub weight_scale: f64,
    /// Largest parameter count finite differences are run on
    #[arg(long, default_value_t = DEFAULT_FD_CAP)]
    pub fd_cap: usize,
    /// Largest dense Hessian dimension
    #[arg(long, default_value_t = DEFAULT_DENSE_CAP)]
    pub dense_cap: usize,
    /// Methods to run
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "symbolic,finite-diff,hutchinson,dense-analytic"
    )]
    pub methods: Vec<MethodArg>,
    /// CSV output path
    #[arg(short, long, default_value = "bench.csv")]
    pub output: PathBuf,
}

impl BenchArgs {
    pub fn weight_init(&self) -> WeightInit {
        match self.weights {
            WeightsArg::Ones => WeightInit::Ones,
            WeightsArg::Random => WeightInit::ScaledUniform {
                scale: self.weight_scale,
            },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compare trace methods on random inputs and write the benchmark CSV
    Bench(BenchArgs),
    /// Train one head and write its per-epoch records
    Train {
        /// JSON run configuration [default: built-in defaults]
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// CSV output path
        #[arg(short, long, default_value = "train.csv")]
        output: PathBuf,
    },
    /// Train every cell of a grid and write one row per final model
    Sweep {
        /// JSON sweep configuration [default: built-in defaults]
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// CSV output path
        #[arg(short, long, default_value = "sweep.csv")]
        output: PathBuf,
    },
    /// Regression and correlation statistics between two CSV columns
    Correlate {
        /// Input CSV, e.g. a sweep table
        #[arg(short, long)]
        input: PathBuf,
        /// Predictor column
        #[arg(long, default_value = "flatness")]
        x: String,
        /// Response column
        #[arg(long, default_value = "gen_gap")]
        y: String,
        /// JSON output path
        #[arg(short, long, default_value = "correlation.json")]
        output: PathBuf,
    },
    /// Evaluate the generalization bound envelope
    Bound {
        /// Relative flatness
        #[arg(long)]
        kappa: f64,
        /// Training sample size |S|
        #[arg(long)]
        samples: f64,
        /// Feature dimension
        #[arg(long)]
        m: f64,
        #[arg(long, default_value_t = 0.0)]
        c1: f64,
        #[arg(long, default_value_t = 0.0)]
        c2: f64,
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
        /// Sweep CSV to calibrate c1 on (c2 is then 0)
        #[arg(long)]
        calibrate: Option<PathBuf>,
        /// JSON output path with inputs, constants and calibration [default: none]
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compare the standard, flatness and combined stopping strategies
    StopCompare {
        /// JSON configuration [default: built-in defaults]
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// CSV output path
        #[arg(short, long, default_value = "stop_compare.csv")]
        output: PathBuf,
    },
}

/// Failure class, mapped to the process exit code.
pub enum Failure {
    /// Bad flags or configuration (exit 2).
    Usage(anyhow::Error),
    /// Failure while running (exit 1).
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let g = cli.global;
    match cli.command {
        Command::Bench(args) => commands::bench(&g, &args),
        Command::Train { config, output } => commands::train(&g, config.as_deref(), &output),
        Command::Sweep { config, output } => commands::sweep(&g, config.as_deref(), &output),
        Command::Correlate {
            input,
            x,
            y,
            output,
        } => commands::correlate(&g, &input, &x, &y, &output),
        Command::Bound {
            kappa,
            samples,
            m,
            c1,
            c2,
            delta,
            calibrate,
            output,
        } => commands::bound(
            &g,
            commands::BoundArgs {
                kappa,
                samples,
                m,
                c1,
                c2,
                delta,
            },
            calibrate.as_deref(),
            output.as_deref(),
        ),
        Command::StopCompare { config, output } => {
            commands::stop_compare(&g, config.as_deref(), &output)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.global.jobs {
        pool = pool.num_threads(j as usize);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            eprintln!("\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
