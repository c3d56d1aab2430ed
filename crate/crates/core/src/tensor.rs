//! Dense row-major tensors and the deterministic kernels built on them.
//!
//! Every reduction accumulates in `f64` and sums in a fixed order, so the
//! same inputs always produce bit-identical outputs regardless of caller.

use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a tensor from `f64` values, rounding into storage precision.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::narrow(v)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Number of elements per entry along the leading axis.
    pub fn stride0(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// The `i`-th slab along the leading axis (a row for 2-D tensors).
    pub fn outer(&self, i: usize) -> &[T] {
        let s = self.stride0();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::narrow(v.widen())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.widen().abs()))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| T::narrow(a.widen() + b.widen()))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Gathers the given entries along the leading axis into a new tensor.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let s = self.stride0();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend_from_slice(self.outer(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self { shape, data }
    }
}

/// Bias applied after the dot-product accumulation of [`gemm`].
#[derive(Clone, Copy)]
pub(crate) enum Bias<'a, T> {
    None,
    /// One value per output row.
    Row(&'a [T]),
    /// One value per output column.
    Col(&'a [T]),
}

/// `out[m×n] = a[m×k] · b[k×n] (+ bias)`.
///
/// Each output entry is summed left-to-right over `k` in `f64`. The work is
/// tiled into column panels and k-slabs: each slab of `b` is widened to
/// `f64` once and reused by every row, and within a row the loop nest is
/// k-then-j so independent output columns vectorize. Neither changes any
/// entry's summation order. Zero entries of `a` are skipped, which is exact
/// because the accumulator starts at +0 and inputs are finite.
pub(crate) fn gemm<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    bias: Bias<'_, T>,
) -> Vec<T> {
    const COLS: usize = 256;
    const SLAB: usize = 64;
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    let mut acc = vec![0.0f64; m * COLS.min(n)];
    let mut panel = vec![0.0f64; SLAB * COLS.min(n)];
    for j0 in (0..n).step_by(COLS) {
        let w = COLS.min(n - j0);
        acc.fill(0.0);
        for k0 in (0..k).step_by(SLAB) {
            let depth = SLAB.min(k - k0);
            for d in 0..depth {
                let src = &b[(k0 + d) * n + j0..(k0 + d) * n + j0 + w];
                for (p, &v) in panel[d * w..(d + 1) * w].iter_mut().zip(src) {
                    *p = v.widen();
                }
            }
            for i in 0..m {
                let row = &mut acc[i * w..(i + 1) * w];
                for d in 0..depth {
                    let av = a[i * k + k0 + d].widen();
                    if av == 0.0 {
                        continue;
                    }
                    for (s, &bv) in row.iter_mut().zip(&panel[d * w..(d + 1) * w]) {
                        *s += av * bv;
                    }
                }
            }
        }
        for i in 0..m {
            let dst = &mut out[i * n + j0..i * n + j0 + w];
            let src = &acc[i * w..(i + 1) * w];
            match bias {
                Bias::None => dst.iter_mut().zip(src).for_each(|(d, &v)| *d = T::narrow(v)),
                Bias::Row(rb) => {
                    let bi = rb[i].widen();
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d = T::narrow(v + bi));
                }
                Bias::Col(cb) => dst
                    .iter_mut()
                    .zip(src)
                    .zip(&cb[j0..j0 + w])
                    .for_each(|((d, &v), &bj)| *d = T::narrow(v + bj.widen())),
            }
        }
    }
    out
}

pub(crate) fn transpose<T: Copy>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(data.len(), rows * cols);
    let mut out = Vec::with_capacity(data.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(data[r * cols + c]);
        }
    }
    out
}

/// Standard matrix product with fixed left-to-right summation over the
/// inner extent.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let data = gemm(&a.data, &b.data, m, k, n, Bias::None);
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding: `out = floor((in - k) / stride) + 1`.
    Valid,
    /// Zero padding so that `out = ceil(in / stride)`. The total padding
    /// `max((out - 1) * stride + k - in, 0)` is split with the smaller half
    /// on the top/left side.
    Same,
}

/// Resolved geometry of one 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let invalid = |reason: String| TensorError::InvalidArgument { op: "conv2d", reason };
        if stride == 0 {
            return Err(invalid("stride must be at least 1".into()));
        }
        if kh == 0 || kw == 0 || h == 0 || w == 0 || c_in == 0 {
            return Err(invalid("extents must be positive".into()));
        }
        let (out_h, pad_h) = axis_extent(h, kh, stride, padding);
        let (out_w, pad_w) = axis_extent(w, kw, stride, padding);
        if kh > h + pad_h || kw > w + pad_w {
            return Err(invalid(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + pad_h,
                w + pad_w
            )));
        }
        Ok(Self {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            out_h,
            out_w,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        })
    }

    /// Rows of the unfolded patch matrix: `c_in * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.h * self.w
    }
}

fn axis_extent(n: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => {
            if k > n {
                (0, 0)
            } else {
                ((n - k) / stride + 1, 0)
            }
        }
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            (out, total)
        }
    }
}

/// Unfolds a batch of images `[batch × c_in × h × w]` into patch columns
/// `[patch_len × (batch · positions)]`. Patch rows are ordered
/// `(channel, ky, kx)`; columns `(example, oy, ox)`.
pub(crate) fn im2col<T: Scalar>(input: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let p = g.positions();
    let cols = batch * p;
    let mut out = vec![T::zero(); g.patch_len() * cols];
    for b in 0..batch {
        let img = &input[b * g.input_len()..(b + 1) * g.input_len()];
        for c in 0..g.c_in {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let dst = &mut out[row * cols + b * p..row * cols + (b + 1) * p];
                    for oy in 0..g.out_h {
                        let y = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.out_w {
                            let x = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if x < 0 || x >= g.w as isize {
                                continue;
                            }
                            dst[oy * g.out_w + ox] =
                                img[(c * g.h + y as usize) * g.w + x as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch-column gradients back onto the
/// input grid, accumulating in `f64` in patch-row order.
pub(crate) fn col2im<T: Scalar>(cols_grad: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let p = g.positions();
    let cols = batch * p;
    let mut acc = vec![0.0f64; batch * g.input_len()];
    for b in 0..batch {
        let img = &mut acc[b * g.input_len()..(b + 1) * g.input_len()];
        for c in 0..g.c_in {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let src = &cols_grad[row * cols + b * p..row * cols + (b + 1) * p];
                    for oy in 0..g.out_h {
                        let y = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.out_w {
                            let x = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if x < 0 || x >= g.w as isize {
                                continue;
                            }
                            img[(c * g.h + y as usize) * g.w + x as usize] +=
                                src[oy * g.out_w + ox].widen();
                        }
                    }
                }
            }
        }
    }
    acc.into_iter().map(T::narrow).collect()
}

/// Direct 2-D cross-correlation (no kernel flip) of one image
/// `[c_in × h × w]` with `[c_out × c_in × kh × kw]` kernels.
///
/// Each output is the `f64` sum over `(channel, ky, kx)` in that order.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    if input.ndim() != 3 || kernels.ndim() != 4 || kernels.shape[1] != input.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.shape.clone(),
            right: kernels.shape.clone(),
        });
    }
    let g = ConvGeometry::new(
        input.shape[0],
        input.shape[1],
        input.shape[2],
        kernels.shape[2],
        kernels.shape[3],
        stride,
        padding,
    )?;
    let c_out = kernels.shape[0];
    let cols = im2col(&input.data, 1, &g);
    let data = gemm(&kernels.data, &cols, c_out, g.patch_len(), g.positions(), Bias::None);
    Tensor::new(vec![c_out, g.out_h, g.out_w], data)
}

/// Result of a 2×2 max-pool: the pooled tensor and, for each output
/// element, the flat index of the input element it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Non-overlapping 2×2 max pooling over the two trailing axes. All leading
/// axes are treated as independent planes. Ties go to the lowest flat index.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<Pooled<T>> {
    let nd = input.ndim();
    if nd < 2 {
        return Err(TensorError::InvalidArgument {
            op: "maxpool2",
            reason: format!("need at least 2 axes, got {:?}", input.shape),
        });
    }
    let (h, w) = (input.shape[nd - 2], input.shape[nd - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::InvalidArgument {
            op: "maxpool2",
            reason: format!("extents {h}x{w} must be even"),
        });
    }
    let planes: usize = input.shape[..nd - 2].iter().product();
    let (oh, ow) = (h / 2, w / 2);
    let mut data = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input.data[idx] > input.data[best] {
                        best = idx;
                    }
                }
                data.push(input.data[best]);
                argmax.push(best);
            }
        }
    }
    let mut shape = input.shape.clone();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Ok(Pooled {
        output: Tensor { shape, data },
        argmax,
    })
}

/// Routes pooled gradients back to the recorded argmax positions only.
pub fn maxpool2_backward<T: Scalar>(
    grad_out: &[T],
    argmax: &[usize],
    input_len: usize,
) -> Vec<T> {
    let mut grad = vec![T::zero(); input_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        grad[i] = g;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    /// Reference cross-correlation straight from the definition.
    fn conv_direct<T: Scalar>(input: &Tensor<T>, k: &Tensor<T>, stride: usize, padding: Padding) -> Tensor<T> {
        let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let g = ConvGeometry::new(ci, h, w, kh, kw, stride, padding).unwrap();
        let mut out = Vec::new();
        for o in 0..co {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut s = 0.0f64;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - g.pad_top as isize;
                                let x = (ox * stride + kx) as isize - g.pad_left as isize;
                                let v = if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                    T::zero()
                                } else {
                                    input.data()[(c * h + y as usize) * w + x as usize]
                                };
                                s += v.widen() * k.data()[((o * ci + c) * kh + ky) * kw + kx].widen();
                            }
                        }
                    }
                    out.push(T::narrow(s));
                }
            }
        }
        Tensor::new(vec![co, g.out_h, g.out_w], out).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = t(&[2, 3], &[1.5, -2., 3., 0.25, 7., -1.]);
        assert_eq!(matmul(&a, &Tensor::identity(3)).unwrap(), a);
        let z = matmul(&a, &Tensor::zeros(&[3, 4])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.shape(), &[2, 4]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[2, 3], &[0.; 6]);
        assert!(matches!(matmul(&a, &a), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor::<f32>::filled(&[1, 3, 3], 1.0);
        let k = Tensor::<f32>::filled(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[4., 4., 4., 4.]);
    }

    #[test]
    fn conv_delta_kernel_crops() {
        let x = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let k = t(&[1, 1, 2, 2], &[1., 0., 0., 0.]);
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(y.data(), &[1., 2., 4., 5.]);
    }

    #[test]
    fn conv_zero_input_and_unit_kernel() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let k = Tensor::<f32>::filled(&[3, 2, 3, 3], 0.7);
        let y = conv2d(&x, &k, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = t(&[1, 2, 3], &[1., -2., 3., 4., 5., 6.]);
        let one = Tensor::<f32>::filled(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &one, 1, Padding::Valid).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_extents_same_and_stride() {
        let g = ConvGeometry::new(1, 28, 28, 3, 3, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top), (14, 14, 0));
        let g = ConvGeometry::new(1, 28, 28, 5, 5, 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (28, 2));
        let g = ConvGeometry::new(1, 28, 28, 3, 3, 2, Padding::Valid).unwrap();
        assert_eq!(g.out_h, 13);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2]);
        let k = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &k, 1, Padding::Valid).is_err());
        let k = Tensor::<f32>::zeros(&[1, 2, 1, 1]);
        assert!(matches!(conv2d(&x, &k, 1, Padding::Valid), Err(TensorError::ShapeMismatch { .. })));
        let k = Tensor::<f32>::zeros(&[1, 1, 1, 1]);
        assert!(conv2d(&x, &k, 0, Padding::Valid).is_err());
    }

    #[test]
    fn conv_matches_direct_definition_bitwise() {
        let mut rng = crate::rng::SeededRng::new(11);
        for (stride, padding) in [(1, Padding::Valid), (2, Padding::Same), (1, Padding::Same), (2, Padding::Valid)] {
            let x = Tensor::<f64>::new(vec![2, 7, 6], (0..84).map(|_| rng.standard_normal()).collect()).unwrap();
            let k = Tensor::<f64>::new(vec![3, 2, 3, 2], (0..36).map(|_| rng.standard_normal()).collect()).unwrap();
            let fast = conv2d(&x, &k, stride, padding).unwrap();
            let slow = conv_direct(&x, &k, stride, padding);
            assert_eq!(fast, slow, "stride {stride} {padding:?}");
            let (x, k) = (x.cast::<f32>(), k.cast::<f32>());
            assert_eq!(conv2d(&x, &k, stride, padding).unwrap(), conv_direct(&x, &k, stride, padding));
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = crate::rng::SeededRng::new(5);
        let g = ConvGeometry::new(2, 5, 4, 3, 2, 2, Padding::Same).unwrap();
        let x: Vec<f64> = (0..2 * g.input_len()).map(|_| rng.standard_normal()).collect();
        let c: Vec<f64> = (0..g.patch_len() * 2 * g.positions()).map(|_| rng.standard_normal()).collect();
        let lhs: f64 = im2col(&x, 2, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, 2, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_examples() {
        let p = maxpool2(&t(&[1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(p.output.data(), &[4.]);
        assert_eq!(p.argmax, vec![3]);

        let p = maxpool2(&Tensor::<f32>::filled(&[2, 4, 4], 3.5)).unwrap();
        assert!(p.output.data().iter().all(|&v| v == 3.5));

        let p = maxpool2(&t(&[1, 2, 2], &[5., 5., 5., 5.])).unwrap();
        assert_eq!(p.argmax, vec![0]);
        assert_eq!(p.output.data(), &[5.]);

        assert!(maxpool2(&Tensor::<f32>::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = t(&[1, 2, 4], &[1., 9., 0., 0., 2., 3., 0., 7.]);
        let p = maxpool2(&x).unwrap();
        assert_eq!(p.output.data(), &[9., 7.]);
        let g = maxpool2_backward(&[1.5f32, -2.0], &p.argmax, x.len());
        assert_eq!(g, vec![0., 1.5, 0., 0., 0., 0., 0., -2.0]);
    }

    #[test]
    fn gather_rows() {
        let x = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let g = x.gather(&[2, 0]);
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[5., 6., 1., 2.]);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
            proptest::collection::vec(-3.0f64..3.0, rows * cols)
                .prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
        }

        fn close(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(y.abs()).max(1.0))
        }

        proptest! {
            #[test]
            fn identity_neutral(a in mat(3, 4)) {
                prop_assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a.clone());
                prop_assert_eq!(matmul(&a, &Tensor::identity(4)).unwrap(), a);
            }

            #[test]
            fn distributes_over_addition(a in mat(3, 4), b in mat(4, 2), c in mat(4, 2)) {
                let lhs = matmul(&a, &b.add(&c).unwrap()).unwrap();
                let rhs = matmul(&a, &b).unwrap().add(&matmul(&a, &c).unwrap()).unwrap();
                prop_assert!(close(&lhs, &rhs));
            }

            #[test]
            fn associative(a in mat(2, 3), b in mat(3, 4), c in mat(4, 2)) {
                let lhs = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let rhs = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                prop_assert!(close(&lhs, &rhs));
            }

            #[test]
            fn pool_bounded_by_input_max(v in proptest::collection::vec(-5.0f64..5.0, 16)) {
                let x = Tensor::new(vec![1, 4, 4], v).unwrap();
                let p = maxpool2(&x).unwrap();
                let m = x.data().iter().cloned().fold(f64::MIN, f64::max);
                prop_assert!(p.output.data().iter().all(|&o| o <= m));
                for (o, &i) in p.output.data().iter().zip(&p.argmax) {
                    prop_assert_eq!(*o, x.data()[i]);
                }
            }
        }
    }
}
