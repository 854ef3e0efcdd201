//! Independent trace estimators the closed form is checked against.
//!
//! * [`fd_trace`]: central second differences of a black-box loss, one
//!   weight at a time. Used as ground truth.
//! * [`hutchinson_trace`]: `(1/n) sum_p v_p^T H v_p` with Rademacher probes,
//!   fed by the structured Hessian-vector product [`analytic_hvp_batch`].
//! * [`benchmark_methods`]: runs every method on fresh uniform inputs and
//!   aggregates errors and timings.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::flatness::{
    dense_hessian_batch, relative_flatness, symbolic_trace_batch, FlatnessVariant, TraceMethod,
    TraceReport, DEFAULT_DENSE_CAP,
};
use crate::head::{forward_classes, HeadOutput, KernelBank};
use crate::io::{fmt_opt, fmt_time, TimingMode};
use crate::scalar::{dot, Scalar};
use crate::tensor::{ConvSpec, PatchSummary, Tensor3};

/// Default cap on the number of weights [`fd_trace`] will perturb.
pub const DEFAULT_FD_CAP: usize = 5000;

/// Step size rule for central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FdStep {
    /// `h_i = eps^{1/4} * max(1, |k_i|)` with `eps` the machine epsilon of
    /// the scalar type. The fourth root balances truncation against the
    /// `eps / h^2` roundoff of a second difference.
    Relative,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdConfig {
    pub step: FdStep,
    pub cap: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: FdStep::Relative,
            cap: DEFAULT_FD_CAP,
        }
    }
}

impl FdConfig {
    pub fn fixed(h: f64) -> Self {
        Self {
            step: FdStep::Fixed(h),
            ..Self::default()
        }
    }

    fn step_for<T: Scalar>(&self, w: T) -> Result<T> {
        let h = match self.step {
            FdStep::Relative => T::epsilon().sqrt().sqrt() * w.abs().max(T::one()),
            FdStep::Fixed(h) => T::cast(h),
        };
        if !h.is_finite() || h <= T::zero() {
            return Err(validation(
                "finite-difference steps must be strictly positive",
            ));
        }
        Ok(h)
    }
}

/// Sum of central second differences `(L(k+h e_i) - 2L(k) + L(k-h e_i)) / h^2`
/// over every weight.
pub fn fd_trace<T, F>(mut loss_fn: F, k: &KernelBank<T>, cfg: &FdConfig) -> Result<T>
where
    T: Scalar,
    F: FnMut(&KernelBank<T>) -> T,
{
    let n = k.param_count();
    if n > cfg.cap {
        return Err(Error::SizeCap {
            what: "finite-difference parameter count",
            size: n,
            cap: cfg.cap,
        });
    }
    let mut work = k.clone();
    let base = loss_fn(&work);
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at the base point".into()));
    }
    let two = T::cast(2.0);
    let mut total = T::zero();
    for i in 0..n {
        let w0 = work.as_slice()[i];
        let h = cfg.step_for(w0)?;
        // use the step that is actually representable
        let hp = (w0 + h) - w0;
        work.as_mut_slice()[i] = w0 + hp;
        let plus = loss_fn(&work);
        work.as_mut_slice()[i] = w0 - hp;
        let minus = loss_fn(&work);
        work.as_mut_slice()[i] = w0;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss while perturbing weight {i}"
            )));
        }
        total += (plus - two * base + minus) / (hp * hp);
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDistribution {
    #[default]
    Rademacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeConfig {
    pub probes: usize,
    pub distribution: ProbeDistribution,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            probes: 500,
            distribution: ProbeDistribution::Rademacher,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn new(probes: usize, seed: u64) -> Self {
        Self {
            probes,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HutchinsonEstimate<T> {
    pub estimate: T,
    /// Sample standard deviation of the per-probe values over `sqrt(n)`.
    pub std_error: T,
}

/// Hutchinson trace estimate from a Hessian-vector product
/// `hvp(v, out)` writing `H v` into `out`.
pub fn hutchinson_trace<T, F>(
    mut hvp: F,
    dim: usize,
    cfg: &ProbeConfig,
) -> Result<HutchinsonEstimate<T>>
where
    T: Scalar,
    F: FnMut(&[T], &mut [T]),
{
    if dim == 0 {
        return Err(validation("Hutchinson needs a positive dimension"));
    }
    if cfg.probes == 0 {
        return Err(validation("Hutchinson needs at least one probe"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v = vec![T::zero(); dim];
    let mut hv = vec![T::zero(); dim];
    let mut samples = Vec::with_capacity(cfg.probes);
    for _ in 0..cfg.probes {
        match cfg.distribution {
            ProbeDistribution::Rademacher => v.iter_mut().for_each(|x| {
                *x = if rng.random::<bool>() {
                    T::one()
                } else {
                    -T::one()
                }
            }),
        }
        hv.iter_mut().for_each(|x| *x = T::zero());
        hvp(&v, &mut hv);
        samples.push(dot(&v, &hv));
    }
    let n = T::from_count(cfg.probes);
    let mean = samples.iter().copied().sum::<T>() / n;
    let std_error = if cfg.probes > 1 {
        let var = samples.iter().map(|&s| (s - mean) * (s - mean)).sum::<T>()
            / T::from_count(cfg.probes - 1);
        (var / n).sqrt()
    } else {
        T::zero()
    };
    Ok(HutchinsonEstimate {
        estimate: mean,
        std_error,
    })
}

fn accumulate_hvp<T: Scalar>(probs: &[T], phi: &[T], v: &[T], weight: T, out: &mut [T]) {
    let d = phi.len();
    // u_j = <phi, v_j>; (A u)_j = p_j (u_j - sum_l p_l u_l)
    let u: Vec<T> = (0..probs.len())
        .map(|j| dot(phi, &v[j * d..(j + 1) * d]))
        .collect();
    let mean_u = dot(probs, &u);
    for (j, (&p, &uj)) in probs.iter().zip(&u).enumerate() {
        let a = weight * p * (uj - mean_u);
        if a == T::zero() {
            continue;
        }
        for (o, &f) in out[j * d..(j + 1) * d].iter_mut().zip(phi) {
            *o += a * f;
        }
    }
}

/// `H v` for one sample without forming `H`, in `O(C_out d)`.
pub fn analytic_hvp<T: Scalar>(probs: &[T], summary: &PatchSummary<T>, v: &[T]) -> Result<Vec<T>> {
    if summary.batch_size() != 1 {
        return Err(validation("analytic_hvp needs a single-sample summary"));
    }
    let n = probs.len() * summary.flat_dim();
    if v.len() != n {
        return Err(validation(format!(
            "vector has length {}, expected {n}",
            v.len()
        )));
    }
    let mut out = vec![T::zero(); n];
    accumulate_hvp(probs, summary.sample(0), v, T::one(), &mut out);
    Ok(out)
}

/// `H v` for the batch-mean loss.
pub fn analytic_hvp_batch<T: Scalar>(
    out: &HeadOutput<T>,
    summary: &PatchSummary<T>,
    v: &[T],
) -> Result<Vec<T>> {
    let mut hv = vec![T::zero(); v.len()];
    analytic_hvp_batch_into(out, summary, v, &mut hv)?;
    Ok(hv)
}

/// In-place form of [`analytic_hvp_batch`]; `hv` is overwritten.
pub fn analytic_hvp_batch_into<T: Scalar>(
    out: &HeadOutput<T>,
    summary: &PatchSummary<T>,
    v: &[T],
    hv: &mut [T],
) -> Result<()> {
    if out.batch_size() != summary.batch_size() || out.batch_size() == 0 {
        return Err(validation("output and summary batches differ"));
    }
    let n = out.c_out() * summary.flat_dim();
    if v.len() != n || hv.len() != n {
        return Err(validation(format!(
            "vectors have lengths {} and {}, expected {n}",
            v.len(),
            hv.len()
        )));
    }
    hv.iter_mut().for_each(|x| *x = T::zero());
    let w = T::one() / T::from_count(out.batch_size());
    for b in 0..out.batch_size() {
        accumulate_hvp(out.probs.row(b), summary.sample(b), v, w, hv);
    }
    Ok(())
}

/// Kernel initialization of a benchmark run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Every weight equal to one.
    Ones,
    /// `uniform[0, 1) * scale`.
    ScaledUniform { scale: f64 },
}

impl WeightInit {
    pub fn random() -> Self {
        Self::ScaledUniform { scale: 1e-4 }
    }
}

/// Benchmark configuration. Inputs are `uniform[0, 1)` tensors of shape
/// `c_in x hw x hw`; run `r` uses its own generator seeded with `seed + r`.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchProtocol {
    pub c_in: usize,
    pub hw: usize,
    pub ksize: usize,
    pub stride: usize,
    pub padding: usize,
    pub batches: usize,
    pub kernels: usize,
    pub runs: usize,
    pub probes: usize,
    pub weights: WeightInit,
    pub seed: u64,
    pub fd_cap: usize,
    pub dense_cap: usize,
    pub methods: Vec<TraceMethod>,
}

impl Default for BenchProtocol {
    fn default() -> Self {
        Self {
            c_in: 3,
            hw: 10,
            ksize: 3,
            stride: 1,
            padding: 0,
            batches: 5,
            kernels: 10,
            runs: 30,
            probes: 500,
            weights: WeightInit::Ones,
            seed: 0,
            fd_cap: DEFAULT_FD_CAP,
            dense_cap: DEFAULT_DENSE_CAP,
            methods: TraceMethod::ALL.to_vec(),
        }
    }
}

impl BenchProtocol {
    pub fn spec(&self) -> Result<ConvSpec> {
        ConvSpec::new(
            self.c_in,
            self.kernels,
            self.ksize,
            self.ksize,
            self.stride,
            self.padding,
            self.hw,
            self.hw,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        if self.batches == 0 {
            return Err(validation("batches must be positive"));
        }
        if self.runs == 0 {
            return Err(validation("runs must be positive"));
        }
        if self.probes == 0 {
            return Err(validation("probes must be positive"));
        }
        if let WeightInit::ScaledUniform { scale } = self.weights {
            if !scale.is_finite() {
                return Err(validation("weight scale must be finite"));
            }
        }
        if self.methods.is_empty() {
            return Err(validation("no methods selected"));
        }
        Ok(())
    }
}

/// Aggregate over runs for one method. `None` statistics mean the method was
/// over its cap and skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: TraceMethod,
    pub batches: usize,
    pub kernels: usize,
    pub runs: usize,
    pub trace_mean: Option<f64>,
    pub trace_std: Option<f64>,
    pub abs_err_mean: Option<f64>,
    pub abs_err_std: Option<f64>,
    pub flatness_mean: Option<f64>,
    pub flatness_std: Option<f64>,
    pub time_mean_s: Option<f64>,
}

impl MethodSummary {
    pub fn skipped(&self) -> bool {
        self.trace_mean.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub protocol: BenchProtocol,
    /// One list of reports per run, in method order of the protocol.
    pub runs: Vec<Vec<TraceReport>>,
    pub summary: Vec<MethodSummary>,
}

/// Sample mean and (n - 1) standard deviation.
pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn run_once(p: &BenchProtocol, spec: &ConvSpec, run: usize) -> Result<Vec<TraceReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(run as u64));
    let xs: Vec<Tensor3<f64>> = (0..p.batches)
        .map(|_| Tensor3::from_fn(p.c_in, p.hw, p.hw, |_, _, _| rng.random::<f64>()))
        .collect();
    let k = match p.weights {
        WeightInit::Ones => KernelBank::ones(spec),
        WeightInit::ScaledUniform { scale } => KernelBank::uniform(spec, 0.0, scale, &mut rng),
    };
    let classes: Vec<usize> = (0..p.batches)
        .map(|_| rng.random_range(0..p.kernels))
        .collect();
    let probe_seed: u64 = rng.random();
    let frob = k.frobenius_sq();

    let mut reports = Vec::with_capacity(p.methods.len());
    for &method in &p.methods {
        let start = Instant::now();
        let report = match method {
            TraceMethod::Symbolic => {
                let summary = PatchSummary::from_inputs(&xs, spec)?;
                let out = forward_classes(&summary, &k, &classes)?;
                let trace = symbolic_trace_batch(&out, &summary)?;
                let flat = relative_flatness(&out, &summary, &k, FlatnessVariant::Table)?;
                Some(
                    TraceReport::new(method, trace, start.elapsed().as_secs_f64())
                        .with_flatness(flat),
                )
            }
            TraceMethod::FiniteDiff if spec.param_count() <= p.fd_cap => {
                let summary = PatchSummary::from_inputs(&xs, spec)?;
                let cfg = FdConfig {
                    cap: p.fd_cap,
                    ..FdConfig::default()
                };
                let loss = |kb: &KernelBank<f64>| {
                    forward_classes(&summary, kb, &classes)
                        .map(|o| o.mean_loss)
                        .unwrap_or(f64::NAN)
                };
                let trace = fd_trace(loss, &k, &cfg)?;
                Some(
                    TraceReport::new(method, trace, start.elapsed().as_secs_f64())
                        .with_flatness(frob * trace),
                )
            }
            TraceMethod::Hutchinson => {
                let summary = PatchSummary::from_inputs(&xs, spec)?;
                let out = forward_classes(&summary, &k, &classes)?;
                let est = hutchinson_trace(
                    |v: &[f64], hv: &mut [f64]| {
                        analytic_hvp_batch_into(&out, &summary, v, hv)
                            .expect("probe length matches the parameter count")
                    },
                    spec.param_count(),
                    &ProbeConfig::new(p.probes, probe_seed),
                )?;
                Some(
                    TraceReport::new(method, est.estimate, start.elapsed().as_secs_f64())
                        .with_flatness(frob * est.estimate),
                )
            }
            TraceMethod::DenseAnalytic if spec.param_count() <= p.dense_cap => {
                let summary = PatchSummary::from_inputs(&xs, spec)?;
                let out = forward_classes(&summary, &k, &classes)?;
                let trace = dense_hessian_batch(&out, &summary, p.dense_cap)?.trace();
                Some(
                    TraceReport::new(method, trace, start.elapsed().as_secs_f64())
                        .with_flatness(frob * trace),
                )
            }
            _ => None,
        };
        reports.extend(report);
    }

    let reference = [TraceMethod::FiniteDiff, TraceMethod::DenseAnalytic]
        .iter()
        .find_map(|m| reports.iter().find(|r| r.method == *m).map(|r| r.trace));
    if let Some(reference) = reference {
        reports = reports
            .into_iter()
            .map(|r| r.with_reference(reference))
            .collect();
    }
    Ok(reports)
}

/// Runs every selected method on `runs` fresh batches. Finite differences
/// are the reference when under their cap, the dense Hessian otherwise.
/// Methods over their caps are reported as skipped.
pub fn benchmark_methods(protocol: &BenchProtocol) -> Result<BenchResult> {
    protocol.validate()?;
    let spec = protocol.spec()?;
    let runs = (0..protocol.runs)
        .into_par_iter()
        .map(|r| run_once(protocol, &spec, r))
        .collect::<Result<Vec<_>>>()?;

    let summary = protocol
        .methods
        .iter()
        .map(|&method| {
            let reports: Vec<&TraceReport> = runs
                .iter()
                .filter_map(|rs| rs.iter().find(|r| r.method == method))
                .collect();
            let stat = |f: &dyn Fn(&TraceReport) -> Option<f64>| -> (Option<f64>, Option<f64>) {
                let xs: Option<Vec<f64>> = reports.iter().map(|r| f(r)).collect();
                match xs {
                    Some(xs) if !xs.is_empty() => {
                        let (m, s) = mean_std(&xs);
                        (Some(m), Some(s))
                    }
                    _ => (None, None),
                }
            };
            let (trace_mean, trace_std) = stat(&|r| Some(r.trace));
            let (abs_err_mean, abs_err_std) = stat(&|r| r.abs_error);
            let (flatness_mean, flatness_std) = stat(&|r| r.flatness);
            let (time_mean_s, _) = stat(&|r| Some(r.wall_time_s));
            MethodSummary {
                method,
                batches: protocol.batches,
                kernels: protocol.kernels,
                runs: protocol.runs,
                trace_mean,
                trace_std,
                abs_err_mean,
                abs_err_std,
                flatness_mean,
                flatness_std,
                time_mean_s,
            }
        })
        .collect();

    Ok(BenchResult {
        protocol: protocol.clone(),
        runs,
        summary,
    })
}

pub const BENCH_CSV_HEADER: [&str; 11] = [
    "method",
    "batches",
    "kernels",
    "runs",
    "trace_mean",
    "trace_std",
    "abs_err_mean",
    "abs_err_std",
    "flatness_mean",
    "flatness_std",
    "time_mean_s",
];

/// Writes the benchmark summary as CSV. Skipped methods keep their row with
/// empty statistics.
pub fn write_bench_csv<W: Write>(w: W, rows: &[MethodSummary], timing: TimingMode) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(BENCH_CSV_HEADER)?;
    for r in rows {
        let time = r
            .time_mean_s
            .map(|t| fmt_time(t, timing))
            .unwrap_or_default();
        wr.write_record([
            r.method.as_str().to_string(),
            r.batches.to_string(),
            r.kernels.to_string(),
            r.runs.to_string(),
            fmt_opt(r.trace_mean),
            fmt_opt(r.trace_std),
            fmt_opt(r.abs_err_mean),
            fmt_opt(r.abs_err_std),
            fmt_opt(r.flatness_mean),
            fmt_opt(r.flatness_std),
            time,
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Matrix;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_second_difference_is_exact() {
        let spec = ConvSpec::square(1, 2, 3, 2).unwrap();
        let a: Vec<f64> = (0..8).map(|i| 0.5 + i as f64).collect();
        let k = KernelBank::new(
            &spec,
            Matrix::from_fn(2, 4, |j, i| 0.3 * (j as f64) - 0.1 * i as f64),
        )
        .unwrap();
        let quad = |kb: &KernelBank<f64>| {
            kb.as_slice()
                .iter()
                .zip(&a)
                .map(|(w, ai)| ai * w * w)
                .sum::<f64>()
        };
        let t = fd_trace(quad, &k, &FdConfig::default()).unwrap();
        assert_relative_eq!(t, 2.0 * a.iter().sum::<f64>(), max_relative = 1e-6);
        let t = fd_trace(quad, &k, &FdConfig::fixed(1e-2)).unwrap();
        assert_relative_eq!(t, 2.0 * a.iter().sum::<f64>(), max_relative = 1e-9);
    }

    #[test]
    fn fd_errors() {
        let spec = ConvSpec::square(1, 2, 3, 2).unwrap();
        let k = KernelBank::<f64>::ones(&spec);
        let cfg = FdConfig {
            cap: 7,
            ..FdConfig::default()
        };
        assert!(matches!(
            fd_trace(|_| 0.0, &k, &cfg),
            Err(Error::SizeCap { size: 8, .. })
        ));
        assert!(matches!(
            fd_trace(
                |kb| 1.0 / (kb.as_slice()[0] - 1.0),
                &k,
                &FdConfig::default()
            ),
            Err(Error::NonFinite(_))
        ));
        assert!(fd_trace(|_| 0.0, &k, &FdConfig::fixed(0.0)).is_err());
    }

    #[test]
    fn zero_input_fd_trace_is_zero() {
        let spec = ConvSpec::square(2, 3, 4, 2).unwrap();
        let s =
            PatchSummary::from_inputs(&[Tensor3::zeros(2, 4, 4), Tensor3::zeros(2, 4, 4)], &spec)
                .unwrap();
        let k = KernelBank::ones(&spec);
        let t = fd_trace(
            |kb: &KernelBank<f64>| forward_classes(&s, kb, &[0, 2]).unwrap().mean_loss,
            &k,
            &FdConfig::default(),
        )
        .unwrap();
        assert_eq!(t, 0.0);
    }

    #[test]
    fn hutchinson_identity_is_exact() {
        for seed in 0..5 {
            let est = hutchinson_trace(
                |v: &[f64], out: &mut [f64]| out.copy_from_slice(v),
                10,
                &ProbeConfig::new(7, seed),
            )
            .unwrap();
            assert_eq!(est.estimate, 10.0);
            assert_eq!(est.std_error, 0.0);
        }
    }

    #[test]
    fn hutchinson_is_deterministic_and_validates() {
        let diag = [1.0, -2.0, 3.5, 0.25];
        let hvp = |v: &[f64], out: &mut [f64]| {
            for i in 0..4 {
                out[i] = diag[i] * v[i] + 0.5 * v[(i + 1) % 4];
            }
        };
        let a = hutchinson_trace(hvp, 4, &ProbeConfig::new(50, 9)).unwrap();
        let b = hutchinson_trace(hvp, 4, &ProbeConfig::new(50, 9)).unwrap();
        assert_eq!(a, b);
        assert!(hutchinson_trace(hvp, 0, &ProbeConfig::new(5, 1)).is_err());
        assert!(hutchinson_trace(hvp, 4, &ProbeConfig::new(0, 1)).is_err());
    }

    #[test]
    fn hvp_trivial_cases() {
        let s = PatchSummary::from_averages(1, 4, &[vec![3.0, 4.0, 6.0, 7.0]]).unwrap();
        assert!(analytic_hvp(&[0.4, 0.6], &s, &[0.0; 8])
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        assert!(analytic_hvp(&[1.0, 0.0], &s, &[1.0; 8])
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        assert!(analytic_hvp(&[0.5, 0.5], &s, &[1.0; 7]).is_err());
    }

    #[test]
    fn bench_validation() {
        let p = BenchProtocol {
            kernels: 0,
            ..BenchProtocol::default()
        };
        assert!(benchmark_methods(&p).is_err());
        let p = BenchProtocol {
            runs: 0,
            ..BenchProtocol::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn bench_skips_over_cap_methods() {
        let p = BenchProtocol {
            batches: 2,
            kernels: 3,
            runs: 2,
            probes: 20,
            dense_cap: 10,
            ..BenchProtocol::default()
        };
        let res = benchmark_methods(&p).unwrap();
        let dense = res
            .summary
            .iter()
            .find(|m| m.method == TraceMethod::DenseAnalytic)
            .unwrap();
        assert!(dense.skipped());
        let sym = &res.summary[0];
        assert_eq!(sym.method, TraceMethod::Symbolic);
        assert!(sym.abs_err_mean.unwrap() < 1e-4);
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &res.summary, TimingMode::Omit).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "method,batches,kernels,runs,trace_mean,trace_std,abs_err_mean,abs_err_std,flatness_mean,flatness_std,time_mean_s\n"
        ));
        assert!(text.contains("dense_analytic,2,3,2,,,,,,,\n"));
    }
}
