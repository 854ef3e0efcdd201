//! Feature-map storage, sliding-window patch extraction and global average
//! pooling.
//!
//! A patch is vectorized row-major within its `k_h x k_w` window and input
//! channels are kept separate: channel `s` of patch `r` only ever holds
//! pixels of input channel `s`. Concatenating the per-channel slices in
//! channel order gives the flattened layout used for kernel rows, so
//! `z_r^(j) = sum_s <phi_r^(s), k_{j,s}>`.
//!
//! Because pooling is linear, averaging the convolution output over all
//! positions equals the inner product of each kernel with the average patch.
//! [`PatchSummary`] stores exactly those average patches.

use crate::error::{geometry, validation, Result};
use crate::scalar::{dot, sq_norm, Matrix, Scalar};

/// Input feature map of shape `channels x height x width`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(geometry(format!(
                "tensor extents must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(geometry(format!(
                "tensor {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(validation(format!(
                "tensor value at flat index {i} is not finite"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::zero())
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    /// Builds a tensor from `f(channel, row, col)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            data: self.data.iter().map(|&v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Geometry of the final convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        padding: usize,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        let spec = Self {
            c_in,
            c_out,
            k_h,
            k_w,
            stride,
            padding,
            h,
            w,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Square input and kernel, stride 1, no padding.
    pub fn square(c_in: usize, c_out: usize, hw: usize, k: usize) -> Result<Self> {
        Self::new(c_in, c_out, k, k, 1, 0, hw, hw)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c_in", self.c_in),
            ("c_out", self.c_out),
            ("k_h", self.k_h),
            ("k_w", self.k_w),
            ("stride", self.stride),
            ("h", self.h),
            ("w", self.w),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(geometry(format!("{name} must be positive")));
        }
        if self.k_h > self.h + 2 * self.padding || self.k_w > self.w + 2 * self.padding {
            return Err(geometry(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.k_h,
                self.k_w,
                self.h + 2 * self.padding,
                self.w + 2 * self.padding
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.k_h) / self.stride + 1
    }

    #[inline]
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.k_w) / self.stride + 1
    }

    /// Number of window positions `R = H' * W'`.
    #[inline]
    pub fn patch_count(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Per-channel patch length `k_h * k_w`.
    #[inline]
    pub fn channel_dim(&self) -> usize {
        self.k_h * self.k_w
    }

    /// Flattened kernel length `c_in * k_h * k_w`.
    #[inline]
    pub fn flat_dim(&self) -> usize {
        self.c_in * self.channel_dim()
    }

    /// Number of trainable weights `c_out * d`.
    #[inline]
    pub fn param_count(&self) -> usize {
        self.c_out * self.flat_dim()
    }

    pub fn with_c_out(self, c_out: usize) -> Self {
        Self { c_out, ..self }
    }

    pub fn check_input<T: Scalar>(&self, x: &Tensor3<T>) -> Result<()> {
        if x.channels() != self.c_in || x.height() != self.h || x.width() != self.w {
            return Err(geometry(format!(
                "input is {}x{}x{} but the layer expects {}x{}x{}",
                x.channels(),
                x.height(),
                x.width(),
                self.c_in,
                self.h,
                self.w
            )));
        }
        Ok(())
    }
}

/// All vectorized windows of one input, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMatrix<T> {
    spec: ConvSpec,
    rows: usize,
    channel_dim: usize,
    // [channel][row][i]
    data: Vec<T>,
}

impl<T: Scalar> PatchMatrix<T> {
    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    /// Patch count `R`, identical for every channel.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channel_dim(&self) -> usize {
        self.channel_dim
    }

    pub fn channels(&self) -> usize {
        self.spec.c_in
    }

    /// Row `r` of channel `s`.
    pub fn patch(&self, s: usize, r: usize) -> &[T] {
        let start = (s * self.rows + r) * self.channel_dim;
        &self.data[start..start + self.channel_dim]
    }

    /// The `R x d_c` block for channel `s`, row-major.
    pub fn channel(&self, s: usize) -> &[T] {
        let len = self.rows * self.channel_dim;
        &self.data[s * len..(s + 1) * len]
    }
}

/// Extracts every `k_h x k_w` window of `x` (im2col), zero-filling padding.
pub fn extract_patches<T: Scalar>(x: &Tensor3<T>, spec: &ConvSpec) -> Result<PatchMatrix<T>> {
    spec.validate()?;
    spec.check_input(x)?;
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let rows = oh * ow;
    let dc = spec.channel_dim();
    let pad = spec.padding as isize;
    let mut data = Vec::with_capacity(spec.c_in * rows * dc);
    for s in 0..spec.c_in {
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = (oy * spec.stride) as isize - pad;
                let x0 = (ox * spec.stride) as isize - pad;
                for ky in 0..spec.k_h as isize {
                    for kx in 0..spec.k_w as isize {
                        let (y, xx) = (y0 + ky, x0 + kx);
                        let inside =
                            y >= 0 && xx >= 0 && (y as usize) < spec.h && (xx as usize) < spec.w;
                        data.push(if inside {
                            x.at(s, y as usize, xx as usize)
                        } else {
                            T::zero()
                        });
                    }
                }
            }
        }
    }
    Ok(PatchMatrix {
        spec: *spec,
        rows,
        channel_dim: dc,
        data,
    })
}

/// Per-sample, per-channel average patches of a batch.
///
/// Sample `b`'s averages are stored contiguously in channel order, so
/// [`PatchSummary::sample`] is the flattened average patch aligned with the
/// kernel layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSummary<T> {
    batch: usize,
    channels: usize,
    channel_dim: usize,
    // [b][s][i]
    avg: Vec<T>,
    // [b][s]
    sq_norms: Vec<T>,
}

impl<T: Scalar> PatchSummary<T> {
    /// Builds the summary directly from per-sample flattened averages
    /// (each of length `channels * channel_dim`).
    pub fn from_averages(channels: usize, channel_dim: usize, samples: &[Vec<T>]) -> Result<Self> {
        if channels == 0 || channel_dim == 0 {
            return Err(geometry(
                "summary needs positive channel count and patch length",
            ));
        }
        let d = channels * channel_dim;
        let mut avg = Vec::with_capacity(samples.len() * d);
        for (b, s) in samples.iter().enumerate() {
            if s.len() != d {
                return Err(geometry(format!(
                    "sample {b} has average patch length {}, expected {d}",
                    s.len()
                )));
            }
            avg.extend_from_slice(s);
        }
        let sq_norms = avg.chunks(channel_dim).map(sq_norm).collect();
        Ok(Self {
            batch: samples.len(),
            channels,
            channel_dim,
            avg,
            sq_norms,
        })
    }

    /// Extracts and averages the patches of every input.
    pub fn from_inputs(xs: &[Tensor3<T>], spec: &ConvSpec) -> Result<Self> {
        let parts = xs
            .iter()
            .map(|x| extract_patches(x, spec).map(|p| average_patch(&p)))
            .collect::<Result<Vec<_>>>()?;
        Self::concat(&parts)
    }

    /// Stacks summaries that share the same channel layout.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| validation("cannot concatenate an empty list of summaries"))?;
        let (channels, channel_dim) = (first.channels, first.channel_dim);
        if parts
            .iter()
            .any(|p| p.channels != channels || p.channel_dim != channel_dim)
        {
            return Err(geometry("summaries disagree on channel layout"));
        }
        Ok(Self {
            batch: parts.iter().map(|p| p.batch).sum(),
            channels,
            channel_dim,
            avg: parts.iter().flat_map(|p| p.avg.iter().copied()).collect(),
            sq_norms: parts
                .iter()
                .flat_map(|p| p.sq_norms.iter().copied())
                .collect(),
        })
    }

    /// Sub-batch made of the given sample indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let d = self.flat_dim();
        let mut avg = Vec::with_capacity(indices.len() * d);
        let mut sq_norms = Vec::with_capacity(indices.len() * self.channels);
        for &b in indices {
            avg.extend_from_slice(self.sample(b));
            sq_norms.extend_from_slice(&self.sq_norms[b * self.channels..(b + 1) * self.channels]);
        }
        Self {
            batch: indices.len(),
            channels: self.channels,
            channel_dim: self.channel_dim,
            avg,
            sq_norms,
        }
    }

    #[inline]
    pub fn batch_size(&self) -> usize {
        self.batch
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
    pub fn flat_dim(&self) -> usize {
        self.channels * self.channel_dim
    }

    /// Average patch of sample `b`, channel `s`.
    pub fn avg_patch(&self, b: usize, s: usize) -> &[T] {
        let start = (b * self.channels + s) * self.channel_dim;
        &self.avg[start..start + self.channel_dim]
    }

    /// Flattened average patch of sample `b` (all channels, channel-major).
    pub fn sample(&self, b: usize) -> &[T] {
        let d = self.flat_dim();
        &self.avg[b * d..(b + 1) * d]
    }

    pub fn sq_norm(&self, b: usize, s: usize) -> T {
        self.sq_norms[b * self.channels + s]
    }

    /// `sum_s ||phi_bar^(b,s)||^2`.
    pub fn total_sq_norm(&self, b: usize) -> T {
        self.sq_norms[b * self.channels..(b + 1) * self.channels]
            .iter()
            .copied()
            .sum()
    }

    /// Single-sample summary for sample `b`.
    pub fn single(&self, b: usize) -> Self {
        self.select(&[b])
    }
}

/// Averages the rows of each channel of `p`. The result has batch size 1.
pub fn average_patch<T: Scalar>(p: &PatchMatrix<T>) -> PatchSummary<T> {
    let inv = T::one() / T::from_count(p.rows);
    let dc = p.channel_dim;
    let mut avg = Vec::with_capacity(p.channels() * dc);
    for s in 0..p.channels() {
        let mut acc = vec![T::zero(); dc];
        for r in 0..p.rows {
            for (a, &v) in acc.iter_mut().zip(p.patch(s, r)) {
                *a += v;
            }
        }
        avg.extend(acc.into_iter().map(|a| a * inv));
    }
    let sq_norms = avg.chunks(dc).map(sq_norm).collect();
    PatchSummary {
        batch: 1,
        channels: p.channels(),
        channel_dim: dc,
        avg,
        sq_norms,
    }
}

/// Column means of an `R x C_out` map.
pub fn global_average_pool<T: Scalar>(z: &Matrix<T>) -> Result<Vec<T>> {
    if z.rows() == 0 {
        return Err(validation("global average pooling needs at least one row"));
    }
    let inv = T::one() / T::from_count(z.rows());
    let mut out = vec![T::zero(); z.cols()];
    for r in 0..z.rows() {
        for (o, &v) in out.iter_mut().zip(z.row(r)) {
            *o += v;
        }
    }
    Ok(out.into_iter().map(|v| v * inv).collect())
}

/// Convolution output `Z = Phi K^T` (shape `R x C_out`) for a `C_out x d`
/// weight matrix, summing channel contributions.
pub fn conv_output<T: Scalar>(p: &PatchMatrix<T>, weights: &Matrix<T>) -> Result<Matrix<T>> {
    let dc = p.channel_dim;
    if weights.cols() != p.channels() * dc {
        return Err(geometry(format!(
            "weights have {} columns, patches need {}",
            weights.cols(),
            p.channels() * dc
        )));
    }
    Ok(Matrix::from_fn(p.rows, weights.rows(), |r, j| {
        let k = weights.row(j);
        (0..p.channels())
            .map(|s| dot(p.patch(s, r), &k[s * dc..(s + 1) * dc]))
            .sum()
    }))
}
