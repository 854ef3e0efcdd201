//! Exact Hessian trace of the cross-entropy with respect to the final
//! convolution weights, and the relative flatness built from it.
//!
//! With pooled logits `z_bar = K phi_bar` the Hessian block for filters
//! `(j, j')` of one sample is `y_hat_j (delta_jj' - y_hat_j') phi_bar phi_bar^T`,
//! so its trace collapses to
//!
//! ```text
//! Tr H = alpha * sum_s ||phi_bar^(s)||^2,   alpha = sum_j y_hat_j (1 - y_hat_j)
//! ```
//!
//! and a batch trace is the mean of the per-sample values. Nothing here
//! builds the Hessian except [`dense_hessian`], which exists only as an oracle.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::head::{HeadOutput, KernelBank};
use crate::scalar::{Matrix, Scalar};
use crate::tensor::PatchSummary;

/// Default cap on `C_out * d` for [`dense_hessian`].
pub const DEFAULT_DENSE_CAP: usize = 2048;

/// Which reading of the convolutional flatness formula to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlatnessVariant {
    /// One softmax-curvature term per kernel:
    /// `(1/B) sum_b [sum_t <k_t,k_t> y_t (1 - y_t)] sum_s ||phi_bar||^2`.
    Definition,
    /// Total softmax curvature per kernel:
    /// `(1/B) sum_b [sum_t <k_t,k_t>] alpha_b sum_s ||phi_bar||^2`,
    /// i.e. `||K||_F^2 * Tr H`.
    #[default]
    Table,
}

impl FlatnessVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Definition => "definition",
            Self::Table => "table",
        }
    }
}

impl fmt::Display for FlatnessVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FlatnessVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "definition" => Ok(Self::Definition),
            "table" => Ok(Self::Table),
            other => Err(validation(format!("unknown flatness variant `{other}`"))),
        }
    }
}

/// How a trace value was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMethod {
    Symbolic,
    FiniteDiff,
    Hutchinson,
    DenseAnalytic,
}

impl TraceMethod {
    pub const ALL: [TraceMethod; 4] = [
        TraceMethod::Symbolic,
        TraceMethod::FiniteDiff,
        TraceMethod::Hutchinson,
        TraceMethod::DenseAnalytic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Symbolic => "symbolic",
            Self::FiniteDiff => "finite_diff",
            Self::Hutchinson => "hutchinson",
            Self::DenseAnalytic => "dense_analytic",
        }
    }
}

impl fmt::Display for TraceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One trace (and optionally flatness) measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceReport {
    pub method: TraceMethod,
    pub trace: f64,
    pub flatness: Option<f64>,
    pub reference: Option<f64>,
    pub abs_error: Option<f64>,
    pub wall_time_s: f64,
}

impl TraceReport {
    pub fn new(method: TraceMethod, trace: f64, wall_time_s: f64) -> Self {
        Self {
            method,
            trace,
            flatness: None,
            reference: None,
            abs_error: None,
            wall_time_s: wall_time_s.max(0.0),
        }
    }

    pub fn with_flatness(mut self, flatness: f64) -> Self {
        self.flatness = Some(flatness);
        self
    }

    pub fn with_reference(mut self, reference: f64) -> Self {
        self.reference = Some(reference);
        self.abs_error = Some((self.trace - reference).abs());
        self
    }
}

/// Softmax curvature mass `alpha = sum_j p_j (1 - p_j)`.
pub fn softmax_curvature<T: Scalar>(probs: &[T]) -> T {
    probs.iter().map(|&p| p * (T::one() - p)).sum()
}

/// Batch mean of `alpha_b`.
pub fn mean_softmax_curvature<T: Scalar>(out: &HeadOutput<T>) -> T {
    let b = out.batch_size();
    (0..b)
        .map(|i| softmax_curvature(out.probs.row(i)))
        .sum::<T>()
        / T::from_count(b)
}

fn single_sample<T: Scalar>(probs: &[T], summary: &PatchSummary<T>) -> Result<()> {
    if summary.batch_size() != 1 {
        return Err(validation(format!(
            "expected a single-sample summary, got batch of {}",
            summary.batch_size()
        )));
    }
    if probs.is_empty() {
        return Err(validation("probability vector is empty"));
    }
    Ok(())
}

fn check_batch<T: Scalar>(out: &HeadOutput<T>, summary: &PatchSummary<T>) -> Result<()> {
    if out.batch_size() != summary.batch_size() {
        return Err(validation(format!(
            "output has {} samples, summary has {}",
            out.batch_size(),
            summary.batch_size()
        )));
    }
    if out.batch_size() == 0 {
        return Err(validation("empty batch"));
    }
    Ok(())
}

/// Exact trace for one sample: `alpha * sum_s ||phi_bar^(s)||^2`.
pub fn symbolic_trace_single<T: Scalar>(probs: &[T], summary: &PatchSummary<T>) -> Result<T> {
    single_sample(probs, summary)?;
    Ok(softmax_curvature(probs) * summary.total_sq_norm(0))
}

/// Exact trace of every sample in the batch.
pub fn per_sample_traces<T: Scalar>(
    out: &HeadOutput<T>,
    summary: &PatchSummary<T>,
) -> Result<Vec<T>> {
    check_batch(out, summary)?;
    Ok((0..out.batch_size())
        .map(|b| softmax_curvature(out.probs.row(b)) * summary.total_sq_norm(b))
        .collect())
}

/// Exact trace of the batch-mean loss Hessian.
pub fn symbolic_trace_batch<T: Scalar>(
    out: &HeadOutput<T>,
    summary: &PatchSummary<T>,
) -> Result<T> {
    let traces = per_sample_traces(out, summary)?;
    Ok(traces.iter().copied().sum::<T>() / T::from_count(traces.len()))
}

/// Trace of the `(i, j)` Hessian block: `p_i (delta_ij - p_j) sum_s ||phi_bar^(s)||^2`.
/// Class indices are zero-based.
pub fn hessian_block_trace<T: Scalar>(
    probs: &[T],
    i: usize,
    j: usize,
    summary: &PatchSummary<T>,
) -> Result<T> {
    single_sample(probs, summary)?;
    for idx in [i, j] {
        if idx >= probs.len() {
            return Err(Error::IndexOutOfRange {
                index: idx,
                len: probs.len(),
            });
        }
    }
    let delta = if i == j { T::one() } else { T::zero() };
    Ok(probs[i] * (delta - probs[j]) * summary.total_sq_norm(0))
}

/// Relative flatness of the head at `k` over the batch.
pub fn relative_flatness<T: Scalar>(
    out: &HeadOutput<T>,
    summary: &PatchSummary<T>,
    k: &KernelBank<T>,
    variant: FlatnessVariant,
) -> Result<T> {
    check_batch(out, summary)?;
    check_classes(out, k)?;
    let norms: Vec<T> = (0..k.c_out()).map(|t| k.sq_norm(t)).collect();
    let total: T = match variant {
        FlatnessVariant::Table => {
            let frob: T = norms.iter().copied().sum();
            (0..out.batch_size())
                .map(|b| frob * softmax_curvature(out.probs.row(b)) * summary.total_sq_norm(b))
                .sum()
        }
        FlatnessVariant::Definition => (0..out.batch_size())
            .map(|b| {
                let weighted: T = out
                    .probs
                    .row(b)
                    .iter()
                    .zip(&norms)
                    .map(|(&p, &n)| n * p * (T::one() - p))
                    .sum();
                weighted * summary.total_sq_norm(b)
            })
            .sum(),
    };
    Ok(total / T::from_count(out.batch_size()))
}

/// Full double sum `(1/B) sum_b sum_{i,j} <k_i, k_j> Tr(H_ij^(b))`, including
/// the cross-kernel terms the two [`FlatnessVariant`]s drop.
pub fn relative_flatness_full<T: Scalar>(
    out: &HeadOutput<T>,
    summary: &PatchSummary<T>,
    k: &KernelBank<T>,
) -> Result<T> {
    check_batch(out, summary)?;
    check_classes(out, k)?;
    let d = k.flat_dim();
    let total: T = (0..out.batch_size())
        .map(|b| {
            let p = out.probs.row(b);
            // sum_i p_i ||k_i||^2 - ||sum_i p_i k_i||^2
            let mut mean_k = vec![T::zero(); d];
            let mut diag = T::zero();
            for (t, &pt) in p.iter().enumerate() {
                diag += pt * k.sq_norm(t);
                for (m, &w) in mean_k.iter_mut().zip(k.filter(t)) {
                    *m += pt * w;
                }
            }
            (diag - crate::scalar::sq_norm(&mean_k)) * summary.total_sq_norm(b)
        })
        .sum();
    Ok(total / T::from_count(out.batch_size()))
}

fn check_classes<T: Scalar>(out: &HeadOutput<T>, k: &KernelBank<T>) -> Result<()> {
    if out.c_out() != k.c_out() {
        return Err(validation(format!(
            "output has {} classes, kernel bank has {}",
            out.c_out(),
            k.c_out()
        )));
    }
    Ok(())
}

/// Lipschitz constant `C_out * (sum_s ||phi_bar^(s)||^2)^{3/2}` of the trace
/// as a function of the weights.
pub fn lipschitz_constant<T: Scalar>(summary: &PatchSummary<T>, c_out: usize) -> Result<T> {
    if summary.batch_size() != 1 {
        return Err(validation(
            "lipschitz constant needs a single-sample summary",
        ));
    }
    let n2 = summary.total_sq_norm(0);
    Ok(T::from_count(c_out) * n2 * n2.sqrt())
}

/// Dense `(C_out d) x (C_out d)` Hessian of one sample's loss, block `(j, j')`
/// equal to `p_j (delta - p_j') phi_bar phi_bar^T` with `phi_bar` the
/// flattened multi-channel average patch. Index `j * d + i` addresses weight
/// `i` of filter `j`, the same order as [`KernelBank::as_slice`].
pub fn dense_hessian<T: Scalar>(
    probs: &[T],
    summary: &PatchSummary<T>,
    cap: usize,
) -> Result<Matrix<T>> {
    single_sample(probs, summary)?;
    let n = probs.len() * summary.flat_dim();
    if n > cap {
        return Err(Error::SizeCap {
            what: "dense Hessian dimension",
            size: n,
            cap,
        });
    }
    let mut h = Matrix::zeros(n, n);
    accumulate_sample(&mut h, probs, summary.sample(0), T::one());
    Ok(h)
}

/// Dense Hessian of the batch-mean loss.
pub fn dense_hessian_batch<T: Scalar>(
    out: &HeadOutput<T>,
    summary: &PatchSummary<T>,
    cap: usize,
) -> Result<Matrix<T>> {
    check_batch(out, summary)?;
    let n = out.c_out() * summary.flat_dim();
    if n > cap {
        return Err(Error::SizeCap {
            what: "dense Hessian dimension",
            size: n,
            cap,
        });
    }
    let mut h = Matrix::zeros(n, n);
    let w = T::one() / T::from_count(out.batch_size());
    for b in 0..out.batch_size() {
        accumulate_sample(&mut h, out.probs.row(b), summary.sample(b), w);
    }
    Ok(h)
}

fn accumulate_sample<T: Scalar>(h: &mut Matrix<T>, probs: &[T], phi: &[T], weight: T) {
    let d = phi.len();
    let c = probs.len();
    for j in 0..c {
        for jp in 0..c {
            let delta = if j == jp { T::one() } else { T::zero() };
            let a = weight * probs[j] * (delta - probs[jp]);
            if a == T::zero() {
                continue;
            }
            for (i, &pi) in phi.iter().enumerate() {
                let row = h.row_mut(j * d + i);
                for (ip, &pk) in phi.iter().enumerate() {
                    row[jp * d + ip] += a * pi * pk;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::forward_classes;
    use crate::tensor::{ConvSpec, Tensor3};
    use approx::assert_relative_eq;

    fn ramp_summary() -> PatchSummary<f64> {
        let spec = ConvSpec::square(1, 2, 3, 2).unwrap();
        let x = Tensor3::new(1, 3, 3, (1..=9).map(f64::from).collect()).unwrap();
        PatchSummary::from_inputs(&[x], &spec).unwrap()
    }

    #[test]
    fn single_trace_examples() {
        let s = ramp_summary();
        assert_eq!(symbolic_trace_single(&[0.5, 0.5], &s).unwrap(), 55.0);
        assert_eq!(symbolic_trace_single(&[0.0, 1.0], &s).unwrap(), 0.0);
        let zero = PatchSummary::from_averages(1, 4, &[vec![0.0; 4]]).unwrap();
        assert_eq!(symbolic_trace_single(&[0.3, 0.7], &zero).unwrap(), 0.0);
        let batch = PatchSummary::concat(&[s.clone(), s]).unwrap();
        assert!(symbolic_trace_single(&[0.5, 0.5], &batch).is_err());
    }

    #[test]
    fn identical_samples_batch_trace_equals_single() {
        let s = ramp_summary();
        let batch = PatchSummary::concat(&[s.clone(), s.clone(), s.clone()]).unwrap();
        let k = KernelBank::new(
            &ConvSpec::square(1, 2, 3, 2).unwrap(),
            Matrix::from_rows(&[vec![0.01, 0.0, -0.02, 0.0], vec![0.0; 4]]).unwrap(),
        )
        .unwrap();
        let out = forward_classes(&batch, &k, &[0, 1, 0]).unwrap();
        let t = symbolic_trace_batch(&out, &batch).unwrap();
        let single = symbolic_trace_single(out.probs.row(0), &s).unwrap();
        assert_relative_eq!(t, single, max_relative = 1e-15);
    }

    #[test]
    fn block_traces() {
        let s = ramp_summary();
        let p = [0.5, 0.5];
        assert_eq!(hessian_block_trace(&p, 0, 0, &s).unwrap(), 27.5);
        assert_eq!(hessian_block_trace(&p, 0, 1, &s).unwrap(), -27.5);
        let p = [0.2, 0.3, 0.5];
        let diag: f64 = (0..3)
            .map(|j| hessian_block_trace(&p, j, j, &s).unwrap())
            .sum();
        assert_relative_eq!(
            diag,
            symbolic_trace_single(&p, &s).unwrap(),
            max_relative = 1e-15
        );
        assert!(matches!(
            hessian_block_trace(&p, 3, 0, &s),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn one_hot_predictions_have_zero_flatness() {
        let s = ramp_summary();
        let spec = ConvSpec::square(1, 2, 3, 2).unwrap();
        let k = KernelBank::ones(&spec);
        let probs = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let out = HeadOutput {
            logits: probs.clone(),
            probs,
            losses: vec![0.0],
            mean_loss: 0.0,
            saturated: 0,
        };
        for v in [FlatnessVariant::Definition, FlatnessVariant::Table] {
            assert_eq!(relative_flatness(&out, &s, &k, v).unwrap(), 0.0);
        }
        assert_eq!(relative_flatness_full(&out, &s, &k).unwrap(), 0.0);
    }

    #[test]
    fn variants_differ_by_c_out_at_uniform_softmax() {
        // identical filters -> uniform probabilities
        let spec = ConvSpec::square(1, 4, 3, 2).unwrap();
        let k = KernelBank::filled(&spec, 0.5);
        let s = ramp_summary();
        let out = forward_classes(&s, &k, &[0]).unwrap();
        let table = relative_flatness(&out, &s, &k, FlatnessVariant::Table).unwrap();
        let def = relative_flatness(&out, &s, &k, FlatnessVariant::Definition).unwrap();
        assert_relative_eq!(table, 4.0 * def, max_relative = 1e-14);
        let trace = symbolic_trace_batch(&out, &s).unwrap();
        assert_relative_eq!(table, k.frobenius_sq() * trace, max_relative = 1e-14);
        // identical filters: every cross term cancels the diagonal
        assert!(relative_flatness_full(&out, &s, &k).unwrap().abs() < 1e-12);
    }

    #[test]
    fn full_flatness_matches_block_sum() {
        let spec = ConvSpec::square(1, 3, 3, 2).unwrap();
        let k = KernelBank::new(
            &spec,
            Matrix::from_fn(3, 4, |j, i| 0.05 * ((j * 4 + i) as f64 - 5.0)),
        )
        .unwrap();
        let s = ramp_summary();
        let out = forward_classes(&s, &k, &[1]).unwrap();
        let mut brute = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let inner: f64 = k
                    .filter(i)
                    .iter()
                    .zip(k.filter(j))
                    .map(|(a, b)| a * b)
                    .sum();
                brute += inner * hessian_block_trace(out.probs.row(0), i, j, &s).unwrap();
            }
        }
        assert_relative_eq!(
            relative_flatness_full(&out, &s, &k).unwrap(),
            brute,
            max_relative = 1e-12
        );
    }

    #[test]
    fn lipschitz_examples() {
        let s = ramp_summary();
        let l = lipschitz_constant(&s, 2).unwrap();
        assert_relative_eq!(l, 2.0 * 110f64.powf(1.5), max_relative = 1e-15);
        assert_relative_eq!(l, 2.0 * 110f64.powf(1.5), max_relative = 1e-14);
        assert!((l - 2307.38).abs() < 1e-2);
        let zero = PatchSummary::from_averages(1, 4, &[vec![0.0; 4]]).unwrap();
        assert_eq!(lipschitz_constant(&zero, 2).unwrap(), 0.0);
        let doubled = PatchSummary::from_averages(1, 4, &[vec![6.0, 8.0, 12.0, 14.0]]).unwrap();
        assert_relative_eq!(
            lipschitz_constant(&doubled, 2).unwrap(),
            8.0 * l,
            max_relative = 1e-15
        );
    }

    #[test]
    fn dense_hessian_small_example() {
        let s = ramp_summary();
        let p = [0.75, 0.25];
        let h = dense_hessian(&p, &s, DEFAULT_DENSE_CAP).unwrap();
        assert_eq!((h.rows(), h.cols()), (8, 8));
        assert_relative_eq!(h.trace(), (2.0 * 0.75 * 0.25) * 110.0, max_relative = 1e-15);
        // off-diagonal block (0, 1), entry (phi_0, phi_0)
        assert_relative_eq!(h.get(0, 4), -0.75 * 0.25 * 9.0);
        let zero = dense_hessian(&[1.0, 0.0], &s, DEFAULT_DENSE_CAP).unwrap();
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(
            dense_hessian(&p, &s, 7),
            Err(Error::SizeCap {
                size: 8,
                cap: 7,
                ..
            })
        ));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!(
            "table".parse::<FlatnessVariant>().unwrap(),
            FlatnessVariant::Table
        );
        assert_eq!(FlatnessVariant::default(), FlatnessVariant::Table);
        assert!("sharpness".parse::<FlatnessVariant>().is_err());
    }

    #[test]
    fn report_error_is_absolute_difference() {
        let r = TraceReport::new(TraceMethod::Hutchinson, 6.0, 0.1).with_reference(6.25);
        assert_eq!(r.abs_error, Some(0.25));
        assert_eq!(
            TraceReport::new(TraceMethod::Symbolic, 1.0, -1e-9).wall_time_s,
            0.0
        );
    }
}
