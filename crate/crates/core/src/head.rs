//! Final classifier block: convolution as inner products with the average
//! patch, global average pooling, softmax and cross-entropy.

use rand::Rng;

use crate::error::{geometry, validation, Error, Result};
use crate::scalar::{dot, sq_norm, Matrix, Scalar};
use crate::tensor::{ConvSpec, PatchMatrix, PatchSummary, Tensor3};

/// Floor applied to probabilities before taking the log in the loss.
pub const LOG_FLOOR: f64 = 1e-300;

/// Bank of `c_out` vectorized filters, one per row of a `c_out x d` matrix.
///
/// Row layout is channel-major then row-major within the window, matching
/// [`PatchSummary::sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank<T> {
    channels: usize,
    channel_dim: usize,
    weights: Matrix<T>,
}

impl<T: Scalar> KernelBank<T> {
    pub fn new(spec: &ConvSpec, weights: Matrix<T>) -> Result<Self> {
        if weights.rows() != spec.c_out || weights.cols() != spec.flat_dim() {
            return Err(geometry(format!(
                "kernel bank is {}x{}, layer needs {}x{}",
                weights.rows(),
                weights.cols(),
                spec.c_out,
                spec.flat_dim()
            )));
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite("kernel weights".into()));
        }
        Ok(Self {
            channels: spec.c_in,
            channel_dim: spec.channel_dim(),
            weights,
        })
    }

    pub fn filled(spec: &ConvSpec, v: T) -> Self {
        Self {
            channels: spec.c_in,
            channel_dim: spec.channel_dim(),
            weights: Matrix::from_fn(spec.c_out, spec.flat_dim(), |_, _| v),
        }
    }

    pub fn ones(spec: &ConvSpec) -> Self {
        Self::filled(spec, T::one())
    }

    pub fn zeros(spec: &ConvSpec) -> Self {
        Self::filled(spec, T::zero())
    }

    /// Independent uniform draws on `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(spec: &ConvSpec, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self {
            channels: spec.c_in,
            channel_dim: spec.channel_dim(),
            weights: Matrix::from_fn(spec.c_out, spec.flat_dim(), |_, _| {
                T::cast(lo + (hi - lo) * rng.random::<f64>())
            }),
        }
    }

    #[inline]
    pub fn c_out(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn flat_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn channel_dim(&self) -> usize {
        self.channel_dim
    }

    #[inline]
    pub fn param_count(&self) -> usize {
        self.c_out() * self.flat_dim()
    }

    pub fn filter(&self, t: usize) -> &[T] {
        self.weights.row(t)
    }

    /// Slice of filter `t` acting on input channel `s`.
    pub fn filter_channel(&self, t: usize, s: usize) -> &[T] {
        &self.filter(t)[s * self.channel_dim..(s + 1) * self.channel_dim]
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    /// All weights, filter after filter.
    pub fn as_slice(&self) -> &[T] {
        self.weights.as_slice()
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        self.weights.as_mut_slice()
    }

    /// `<k_t, k_t>`.
    pub fn sq_norm(&self, t: usize) -> T {
        sq_norm(self.filter(t))
    }

    /// `sum_t <k_t, k_t>`.
    pub fn frobenius_sq(&self) -> T {
        sq_norm(self.as_slice())
    }

    pub fn scaled(&self, factor: T) -> Self {
        let mut out = self.clone();
        out.as_mut_slice().iter_mut().for_each(|w| *w *= factor);
        out
    }

    pub(crate) fn check_summary(&self, summary: &PatchSummary<T>) -> Result<()> {
        if summary.channels() != self.channels || summary.channel_dim() != self.channel_dim {
            return Err(geometry(format!(
                "summary layout {}x{} does not match kernel layout {}x{}",
                summary.channels(),
                summary.channel_dim(),
                self.channels,
                self.channel_dim
            )));
        }
        Ok(())
    }
}

/// Result of a forward pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    /// Pooled logits, `B x C_out`.
    pub logits: Matrix<T>,
    /// Softmax probabilities, `B x C_out`.
    pub probs: Matrix<T>,
    pub losses: Vec<T>,
    pub mean_loss: T,
    /// Samples whose true-class probability fell below [`LOG_FLOOR`] and had
    /// their log clamped.
    pub saturated: usize,
}

impl<T: Scalar> HeadOutput<T> {
    pub fn batch_size(&self) -> usize {
        self.probs.rows()
    }

    pub fn c_out(&self) -> usize {
        self.probs.cols()
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.batch_size())
            .map(|b| argmax(self.logits.row(b)))
            .collect()
    }

    /// Fraction of samples whose arg-max logit equals the class index.
    pub fn accuracy(&self, classes: &[usize]) -> f64 {
        if classes.is_empty() {
            return 0.0;
        }
        let hits = self
            .predictions()
            .iter()
            .zip(classes)
            .filter(|(p, c)| p == c)
            .count();
        hits as f64 / classes.len() as f64
    }
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// One-hot matrix for class indices.
pub fn one_hot<T: Scalar>(classes: &[usize], c_out: usize) -> Result<Matrix<T>> {
    let mut m = Matrix::zeros(classes.len(), c_out);
    for (b, &c) in classes.iter().enumerate() {
        if c >= c_out {
            return Err(Error::IndexOutOfRange {
                index: c,
                len: c_out,
            });
        }
        m.set(b, c, T::one());
    }
    Ok(m)
}

/// Recovers class indices from a one-hot label matrix.
pub fn class_indices<T: Scalar>(labels: &Matrix<T>) -> Result<Vec<usize>> {
    (0..labels.rows())
        .map(|b| {
            let row = labels.row(b);
            let ones = row.iter().filter(|&&v| v == T::one()).count();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(validation(format!("label row {b} is not one-hot")));
            }
            Ok(row.iter().position(|&v| v == T::one()).unwrap())
        })
        .collect()
}

/// Numerically stable softmax (max-logit subtraction).
pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let total: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Pooled logits `z_bar_b^(j) = sum_s <phi_bar^(b,s), k_{j,s}>`, `B x C_out`.
pub fn logits<T: Scalar>(summary: &PatchSummary<T>, k: &KernelBank<T>) -> Result<Matrix<T>> {
    k.check_summary(summary)?;
    Ok(Matrix::from_fn(summary.batch_size(), k.c_out(), |b, j| {
        dot(summary.sample(b), k.filter(j))
    }))
}

/// Forward pass from raw inputs.
pub fn forward<T: Scalar>(
    xs: &[Tensor3<T>],
    k: &KernelBank<T>,
    spec: &ConvSpec,
    labels: &Matrix<T>,
) -> Result<HeadOutput<T>> {
    if xs.is_empty() {
        return Err(validation("forward needs a non-empty batch"));
    }
    let summary = PatchSummary::from_inputs(xs, spec)?;
    forward_summary(&summary, k, labels)
}

/// Forward pass from precomputed average patches and one-hot labels.
pub fn forward_summary<T: Scalar>(
    summary: &PatchSummary<T>,
    k: &KernelBank<T>,
    labels: &Matrix<T>,
) -> Result<HeadOutput<T>> {
    if labels.cols() != k.c_out() {
        return Err(validation(format!(
            "labels have {} columns, head has {} classes",
            labels.cols(),
            k.c_out()
        )));
    }
    forward_classes(summary, k, &class_indices(labels)?)
}

/// Forward pass with labels given as class indices.
pub fn forward_classes<T: Scalar>(
    summary: &PatchSummary<T>,
    k: &KernelBank<T>,
    classes: &[usize],
) -> Result<HeadOutput<T>> {
    if summary.batch_size() == 0 {
        return Err(validation("forward needs a non-empty batch"));
    }
    if classes.len() != summary.batch_size() {
        return Err(validation(format!(
            "{} labels for a batch of {}",
            classes.len(),
            summary.batch_size()
        )));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= k.c_out()) {
        return Err(Error::IndexOutOfRange {
            index: c,
            len: k.c_out(),
        });
    }
    let logits = logits(summary, k)?;
    let b_count = summary.batch_size();
    let mut probs = Matrix::zeros(b_count, k.c_out());
    let mut losses = Vec::with_capacity(b_count);
    let mut saturated = 0;
    let floor = T::cast(LOG_FLOOR).max(T::min_positive_value());
    for (b, &class) in classes.iter().enumerate() {
        let p = softmax(logits.row(b));
        let py = p[class];
        if py < floor {
            saturated += 1;
        }
        losses.push(-py.max(floor).ln());
        probs.row_mut(b).copy_from_slice(&p);
    }
    let mean_loss = losses.iter().copied().sum::<T>() / T::from_count(b_count);
    Ok(HeadOutput {
        logits,
        probs,
        losses,
        mean_loss,
        saturated,
    })
}

/// Mean cross-entropy of the batch, computed through the explicit
/// convolution output and pooling of each sample's patch matrix rather than
/// through average patches.
pub fn batch_loss_from_patches<T: Scalar>(
    patches: &[PatchMatrix<T>],
    k: &KernelBank<T>,
    classes: &[usize],
) -> Result<T> {
    if patches.is_empty() || patches.len() != classes.len() {
        return Err(validation("need one label per patch matrix"));
    }
    let mut total = T::zero();
    let floor = T::cast(LOG_FLOOR).max(T::min_positive_value());
    for (p, &class) in patches.iter().zip(classes) {
        let z = crate::tensor::conv_output(p, k.weights())?;
        let pooled = crate::tensor::global_average_pool(&z)?;
        total += -softmax(&pooled)[class].max(floor).ln();
    }
    Ok(total / T::from_count(patches.len()))
}

/// Batch-mean gradient `(1/B) sum_b (y_hat_b - y_b) phi_bar_b^T`, shape `C_out x d`.
pub fn gradient<T: Scalar>(
    out: &HeadOutput<T>,
    summary: &PatchSummary<T>,
    labels: &Matrix<T>,
) -> Result<Matrix<T>> {
    if labels.rows() != out.batch_size() || labels.cols() != out.c_out() {
        return Err(validation(format!(
            "labels are {}x{}, output is {}x{}",
            labels.rows(),
            labels.cols(),
            out.batch_size(),
            out.c_out()
        )));
    }
    gradient_classes(out, summary, &class_indices(labels)?)
}

pub fn gradient_classes<T: Scalar>(
    out: &HeadOutput<T>,
    summary: &PatchSummary<T>,
    classes: &[usize],
) -> Result<Matrix<T>> {
    let b_count = out.batch_size();
    if summary.batch_size() != b_count || classes.len() != b_count {
        return Err(validation(format!(
            "batch mismatch: output {b_count}, summary {}, labels {}",
            summary.batch_size(),
            classes.len()
        )));
    }
    let c_out = out.c_out();
    let d = summary.flat_dim();
    let mut g = Matrix::zeros(c_out, d);
    for (b, &class) in classes.iter().enumerate() {
        let phi = summary.sample(b);
        for j in 0..c_out {
            let y = if j == class { T::one() } else { T::zero() };
            let coeff = out.probs.get(b, j) - y;
            if coeff == T::zero() {
                continue;
            }
            for (gi, &p) in g.row_mut(j).iter_mut().zip(phi) {
                *gi += coeff * p;
            }
        }
    }
    let inv = T::one() / T::from_count(b_count);
    g.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
    Ok(g)
}

/// Hessian of the cross-entropy with respect to the logits:
/// `diag(p) - p p^T`.
pub fn logit_hessian<T: Scalar>(probs: &[T]) -> Matrix<T> {
    Matrix::from_fn(probs.len(), probs.len(), |j, l| {
        if j == l {
            probs[j] * (T::one() - probs[j])
        } else {
            -probs[j] * probs[l]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ramp_spec() -> ConvSpec {
        ConvSpec::square(1, 2, 3, 2).unwrap()
    }

    fn ramp() -> Tensor3<f64> {
        Tensor3::new(1, 3, 3, (1..=9).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn identical_filters_give_uniform_softmax() {
        let spec = ramp_spec();
        let k = KernelBank::filled(&spec, 0.3);
        let labels = one_hot(&[0], 2).unwrap();
        let out = forward(&[ramp()], &k, &spec, &labels).unwrap();
        assert_relative_eq!(out.probs.get(0, 0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(out.mean_loss, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(out.mean_loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn analytic_softmax() {
        let p = softmax(&[3f64.ln(), 0.0]);
        assert_relative_eq!(p[0], 0.75, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn ramp_with_ones_and_zeros_filters() {
        let spec = ramp_spec();
        let w = Matrix::from_rows(&[vec![1.0; 4], vec![0.0; 4]]).unwrap();
        let k = KernelBank::new(&spec, w).unwrap();
        let out = forward(&[ramp()], &k, &spec, &one_hot(&[1], 2).unwrap()).unwrap();
        assert_eq!(out.logits.row(0), &[20.0, 0.0]);
        assert_relative_eq!(
            out.probs.get(0, 0),
            1.0 / (1.0 + (-20f64).exp()),
            epsilon = 1e-15
        );
        // true class probability ~2e-9 is far above the floor
        assert_eq!(out.saturated, 0);
        assert_relative_eq!(out.mean_loss, 20.0, epsilon = 1e-8);
    }

    #[test]
    fn saturated_probabilities_are_clamped_and_counted() {
        let spec = ramp_spec();
        let w = Matrix::from_rows(&[vec![100.0; 4], vec![0.0; 4]]).unwrap();
        let k = KernelBank::new(&spec, w).unwrap();
        let out = forward(&[ramp()], &k, &spec, &one_hot(&[1], 2).unwrap()).unwrap();
        assert_eq!(out.saturated, 1);
        assert!(out.mean_loss.is_finite());
        assert_relative_eq!(out.mean_loss, -LOG_FLOOR.ln(), epsilon = 1e-9);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let spec = ConvSpec::square(2, 5, 4, 2).unwrap();
        let x = Tensor3::from_fn(2, 4, 4, |c, y, x| (c + 2 * y + 3 * x) as f64 * 0.1 - 0.7);
        let w = Matrix::from_fn(5, 8, |j, i| ((j * 8 + i) as f64).sin());
        let k = KernelBank::new(&spec, w).unwrap();
        let out = forward(
            &[x.clone(), x.scaled(-1.0)],
            &k,
            &spec,
            &one_hot(&[0, 4], 5).unwrap(),
        )
        .unwrap();
        for b in 0..2 {
            let s: f64 = out.probs.row(b).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(out.probs.row(b).iter().all(|&p| p > 0.0 && p < 1.0));
        }
        assert!(out.mean_loss >= 0.0);
    }

    #[test]
    fn label_validation() {
        let spec = ramp_spec();
        let k = KernelBank::<f64>::ones(&spec);
        let bad = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            forward(&[ramp()], &k, &spec, &bad),
            Err(Error::Validation(_))
        ));
        let soft = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(forward(&[ramp()], &k, &spec, &soft).is_err());
        assert!(forward(&[], &k, &spec, &Matrix::zeros(0, 2)).is_err());
        assert!(one_hot::<f64>(&[2], 2).is_err());
    }

    #[test]
    fn confident_correct_prediction_has_zero_gradient() {
        let probs = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let out = HeadOutput {
            logits: probs.clone(),
            probs,
            losses: vec![0.0],
            mean_loss: 0.0,
            saturated: 0,
        };
        let spec = ramp_spec();
        let s = PatchSummary::from_inputs(&[ramp()], &spec).unwrap();
        let g = gradient(&out, &s, &one_hot(&[0], 2).unwrap()).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_form_gradient_on_ramp() {
        let spec = ramp_spec();
        let k = KernelBank::filled(&spec, 0.0);
        let s = PatchSummary::from_inputs(&[ramp()], &spec).unwrap();
        let labels = one_hot(&[0], 2).unwrap();
        let out = forward_summary(&s, &k, &labels).unwrap();
        let g = gradient(&out, &s, &labels).unwrap();
        assert_eq!(g.row(0), &[-1.5, -2.0, -3.0, -3.5]);
        assert_eq!(g.row(1), &[1.5, 2.0, 3.0, 3.5]);
        let wrong_shape = one_hot(&[0, 1], 2).unwrap();
        assert!(gradient(&out, &s, &wrong_shape).is_err());
    }

    #[test]
    fn logit_hessian_examples() {
        let h = logit_hessian(&[0.5, 0.5]);
        assert_eq!(h.as_slice(), &[0.25, -0.25, -0.25, 0.25]);
        let h = logit_hessian(&[1.0, 0.0]);
        assert!(h.as_slice().iter().all(|&v| v == 0.0));
        let h = logit_hessian(&[0.75, 0.25]);
        assert_eq!(h.as_slice(), &[0.1875, -0.1875, -0.1875, 0.1875]);
    }

    #[test]
    fn explicit_conv_loss_matches_summary_loss() {
        let spec = ConvSpec::square(2, 3, 5, 3).unwrap();
        let xs: Vec<_> = (0..3)
            .map(|b| {
                Tensor3::from_fn(2, 5, 5, |c, y, x| {
                    ((b * 7 + c * 5 + y * 3 + x) as f64).cos()
                })
            })
            .collect();
        let k = KernelBank::new(
            &spec,
            Matrix::from_fn(3, 18, |j, i| 0.1 * ((j * 18 + i) as f64).sin()),
        )
        .unwrap();
        let classes = [2, 0, 1];
        let patches: Vec<_> = xs
            .iter()
            .map(|x| crate::tensor::extract_patches(x, &spec).unwrap())
            .collect();
        let s = PatchSummary::from_inputs(&xs, &spec).unwrap();
        let a = forward_classes(&s, &k, &classes).unwrap().mean_loss;
        let b = batch_loss_from_patches(&patches, &k, &classes).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-13);
    }
}
