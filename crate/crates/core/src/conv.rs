//! Convolution machinery: channel-wise and 2D convolution (strided and
//! unstrided), padding modes, explicit matrix materialization, adjoints, and
//! the filter/matrix norm relation.
//!
//! Window convention. For an odd window `n` with `r = (n-1)/2`, output `(i,j)`
//! reads inputs at offsets `-r..=r` around `(s*i, s*j)` for stride `s`. For an
//! even window with `r = n/2`, the offsets are `1-r..=r`, i.e. the support is
//! asymmetric and extends one step further down/right than up/left:
//!
//! ```text
//!   n = 2:      n = 3:
//!   . X X       X X X
//!   . a X       X a X      a = anchor (s*i, s*j)
//!   . . .       X X X
//! ```
//!
//! Out-of-range reads resolve by the padding mode: zero padding reads 0,
//! periodic padding wraps indices modulo the input size. Strided outputs have
//! shape `ceil(h/s) x ceil(w/s)`, so for even windows on odd sizes the last
//! anchor's window can extend past the edge; those reads also resolve by the
//! padding mode.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Feature, Filter, Plane};

/// Boundary handling for convolution reads.
///
/// Periodic is the default inside residual blocks; the adjoint is only
/// defined for these two modes (symmetric padding is not supported).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Zero,
    #[default]
    Periodic,
}

/// Resolve a possibly out-of-range index; `None` means "reads zero".
#[inline]
fn resolve(idx: isize, len: usize, pad: PaddingMode) -> Option<usize> {
    if idx >= 0 && (idx as usize) < len {
        return Some(idx as usize);
    }
    match pad {
        PaddingMode::Zero => None,
        PaddingMode::Periodic => Some(idx.rem_euclid(len as isize) as usize),
    }
}

/// Offset range and kernel-index shift for a window of size `n`:
/// kernel index = offset + shift.
#[inline]
fn window(n: usize) -> (isize, isize, isize) {
    let n = n as isize;
    if n % 2 == 1 {
        let r = (n - 1) / 2;
        (-r, r, r)
    } else {
        let r = n / 2;
        (1 - r, r, r - 1)
    }
}

/// Ceiling division; strided outputs have `ceil(len/stride)` positions.
#[inline]
pub fn out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Output spatial dims of a strided convolution on an `h x w` input.
pub fn out_dims(h: usize, w: usize, stride: usize) -> (usize, usize) {
    (out_len(h, stride), out_len(w, stride))
}

/// Channel-wise convolution of a single 2D channel with an `n x n` kernel.
///
/// The summation order over kernel offsets is fixed (row-major), so results
/// are bit-reproducible.
pub fn conv_channel<T: Scalar>(
    x: &Plane<T>,
    kernel: &Plane<T>,
    stride: usize,
    pad: PaddingMode,
) -> Plane<T> {
    assert_eq!(kernel.height, kernel.width, "kernel must be square");
    assert!(stride >= 1, "stride must be at least 1");
    let n = kernel.height;
    let (lo, hi, shift) = window(n);
    let (oh, ow) = out_dims(x.height, x.width, stride);
    let mut out = Plane::zeros(oh, ow);
    for oi in 0..oh {
        for oj in 0..ow {
            let base_i = (stride * oi) as isize;
            let base_j = (stride * oj) as isize;
            let mut acc = T::zero();
            for l in lo..=hi {
                let Some(p) = resolve(base_i + l, x.height, pad) else {
                    continue;
                };
                let ka = (l + shift) as usize;
                for k in lo..=hi {
                    let Some(q) = resolve(base_j + k, x.width, pad) else {
                        continue;
                    };
                    let kb = (k + shift) as usize;
                    acc += kernel.get(ka, kb) * x.get(p, q);
                }
            }
            out.set(oi, oj, acc);
        }
    }
    out
}

/// 2D convolution: output channel `j` is the sum over input channels `i` of
/// the channel-wise convolution with subfilter `(i, j)`. Accumulation is in
/// ascending `i` order for reproducibility.
pub fn conv2d<T: Scalar>(
    x: &Feature<T>,
    filter: &Filter<T>,
    stride: usize,
    pad: PaddingMode,
) -> Result<Feature<T>> {
    if x.depth() != filter.d_in() {
        return Err(Error::Shape(format!(
            "input depth {} does not match filter d_in {}",
            x.depth(),
            filter.d_in()
        )));
    }
    let (oh, ow) = out_dims(x.height(), x.width(), stride);
    let mut out = Feature::zeros(oh, ow, filter.d_out());
    for j in 0..filter.d_out() {
        let mut acc = Plane::zeros(oh, ow);
        for i in 0..x.depth() {
            let contrib = conv_channel(&x.channel(i), &filter.subfilter(i, j), stride, pad);
            for (a, c) in acc.data.iter_mut().zip(&contrib.data) {
                *a += *c;
            }
        }
        out.set_channel(j, &acc);
    }
    Ok(out)
}

/// Transpose of the (possibly strided) convolution operator, applied
/// matrix-free by scattering.
///
/// `cot` lives on the output grid of the forward convolution (shape
/// `ceil(h/s) x ceil(w/s) x d_out`); the result lives on the input grid
/// (`h x w x d_in`). This is exactly multiplication by the transpose of the
/// materialized matrix.
pub fn conv_transpose<T: Scalar>(
    cot: &Feature<T>,
    filter: &Filter<T>,
    h: usize,
    w: usize,
    stride: usize,
    pad: PaddingMode,
) -> Result<Feature<T>> {
    if cot.depth() != filter.d_out() {
        return Err(Error::Shape(format!(
            "cotangent depth {} does not match filter d_out {}",
            cot.depth(),
            filter.d_out()
        )));
    }
    let (oh, ow) = out_dims(h, w, stride);
    if (cot.height(), cot.width()) != (oh, ow) {
        return Err(Error::Shape(format!(
            "cotangent spatial dims {}x{} do not match the {oh}x{ow} output grid",
            cot.height(),
            cot.width()
        )));
    }
    let n = filter.n();
    let (lo, hi, shift) = window(n);
    let mut out = Feature::zeros(h, w, filter.d_in());
    for j in 0..filter.d_out() {
        for oi in 0..oh {
            for oj in 0..ow {
                let g = cot.get(oi, oj, j);
                let base_i = (stride * oi) as isize;
                let base_j = (stride * oj) as isize;
                for i in 0..filter.d_in() {
                    for l in lo..=hi {
                        let Some(p) = resolve(base_i + l, h, pad) else {
                            continue;
                        };
                        let ka = (l + shift) as usize;
                        for k in lo..=hi {
                            let Some(q) = resolve(base_j + k, w, pad) else {
                                continue;
                            };
                            let kb = (k + shift) as usize;
                            let prev = out.get(p, q, i);
                            out.set(p, q, i, prev + filter.get(ka, kb, i, j) * g);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of the stride-1 2D convolution: the feature whose vectorization is
/// `A^T vec(x)`, where `A` is the materialized convolution matrix. Satisfies
/// `<K*u, x> = <u, adjoint_conv(x, K)>` for all `u`.
pub fn adjoint_conv<T: Scalar>(
    x: &Feature<T>,
    filter: &Filter<T>,
    pad: PaddingMode,
) -> Result<Feature<T>> {
    conv_transpose(x, filter, x.height(), x.width(), 1, pad)
}

/// Gradient of `<cot, conv2d(x, K)>` with respect to the filter `K`: since
/// the convolution is linear in `K`, the result satisfies
/// `<cot, conv2d(x, K)> = sum(grad .* K)` exactly.
pub fn conv_filter_grad<T: Scalar>(
    x: &Feature<T>,
    cot: &Feature<T>,
    n: usize,
    stride: usize,
    pad: PaddingMode,
) -> Result<Filter<T>> {
    let (oh, ow) = out_dims(x.height(), x.width(), stride);
    if (cot.height(), cot.width()) != (oh, ow) {
        return Err(Error::Shape(format!(
            "cotangent spatial dims {}x{} do not match the {oh}x{ow} output grid",
            cot.height(),
            cot.width()
        )));
    }
    let (lo, hi, shift) = window(n);
    let mut grad = Filter::zeros(n, x.depth(), cot.depth());
    for i in 0..x.depth() {
        for j in 0..cot.depth() {
            for l in lo..=hi {
                let ka = (l + shift) as usize;
                for k in lo..=hi {
                    let kb = (k + shift) as usize;
                    let mut acc = T::zero();
                    for oi in 0..oh {
                        let Some(p) = resolve((stride * oi) as isize + l, x.height(), pad) else {
                            continue;
                        };
                        for oj in 0..ow {
                            let Some(q) = resolve((stride * oj) as isize + k, x.width(), pad)
                            else {
                                continue;
                            };
                            acc += cot.get(oi, oj, j) * x.get(p, q, i);
                        }
                    }
                    grad.set(ka, kb, i, j, acc);
                }
            }
        }
    }
    Ok(grad)
}

/// Dense row-major matrix materialized from a convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ConvMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ConvMatrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] += v;
    }

    /// Row-major matrix-vector product; rows are accumulated in column order.
    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.cols);
        let mut out = vec![T::zero(); self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = T::zero();
            for (a, b) in row.iter().zip(v) {
                acc += *a * *b;
            }
            *o = acc;
        }
        out
    }

    /// Product with the transpose, without forming it.
    pub fn matvec_t(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for c in 0..self.cols {
            let mut acc = T::zero();
            for r in 0..self.rows {
                acc += self.data[r * self.cols + c] * v[r];
            }
            out[c] = acc;
        }
        out
    }

    pub fn count_nonzeros(&self) -> usize {
        self.data.iter().filter(|v| **v != T::zero()).count()
    }

    /// Exact maximum absolute row sum, summing each row in column order.
    pub fn max_abs_row_sum(&self) -> T {
        let mut best = T::zero();
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = T::zero();
            for v in row {
                acc += v.abs();
            }
            best = best.max(acc);
        }
        best
    }
}

impl ConvMatrix<f64> {
    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

/// Entry cap for materialized matrices. Materialization is meant for oracle
/// and certificate use at desk scale; the fast path never calls it.
pub const MATERIALIZE_MAX_ENTRIES: usize = 100_000_000;

/// Materialize the dense matrix of the 2D convolution on an `h x w x d_in`
/// input, so that for every feature `x`:
/// `matvec(vec(x)) == vec(conv2d(x, filter, stride, pad))`.
///
/// Contributions are accumulated additively: with periodic padding on inputs
/// smaller than the window, several kernel taps can land on the same matrix
/// entry, and the entry is their sum.
pub fn materialize<T: Scalar>(
    filter: &Filter<T>,
    h: usize,
    w: usize,
    stride: usize,
    pad: PaddingMode,
) -> Result<ConvMatrix<T>> {
    let (oh, ow) = out_dims(h, w, stride);
    let rows = oh * ow * filter.d_out();
    let cols = h * w * filter.d_in();
    if rows.saturating_mul(cols) > MATERIALIZE_MAX_ENTRIES {
        return Err(Error::Unsupported(format!(
            "refusing to materialize a {rows}x{cols} matrix (> {MATERIALIZE_MAX_ENTRIES} entries)"
        )));
    }
    let n = filter.n();
    let (lo, hi, shift) = window(n);
    let mut mat = ConvMatrix::zeros(rows, cols);
    for c_out in 0..filter.d_out() {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = c_out * oh * ow + oi * ow + oj;
                let base_i = (stride * oi) as isize;
                let base_j = (stride * oj) as isize;
                for c_in in 0..filter.d_in() {
                    for l in lo..=hi {
                        let Some(p) = resolve(base_i + l, h, pad) else {
                            continue;
                        };
                        let ka = (l + shift) as usize;
                        for k in lo..=hi {
                            let Some(q) = resolve(base_j + k, w, pad) else {
                                continue;
                            };
                            let kb = (k + shift) as usize;
                            let col = c_in * h * w + p * w + q;
                            mat.add(row, col, filter.get(ka, kb, c_in, c_out));
                        }
                    }
                }
            }
        }
    }
    Ok(mat)
}

/// Result of checking the entrywise norm relation between a filter and its
/// materialized matrix.
#[derive(Debug, Clone, Copy)]
pub struct NormRelation {
    /// Sum of |entries|^p of the materialized matrix.
    pub lhs: f64,
    /// `h * w` times the sum of |entries|^p of the filter.
    pub rhs: f64,
    /// Whether the two sides agree to relative 1e-12.
    pub equal: bool,
}

fn sum_abs_pow(data: &[f64], p: f64) -> f64 {
    if p == 1.0 {
        data.iter().map(|v| v.abs()).sum()
    } else if p == 2.0 {
        data.iter().map(|v| v * v).sum()
    } else {
        data.iter().map(|v| v.abs().powf(p)).sum()
    }
}

/// Check `sum |A|^p == h*w * sum |K|^p` for the periodic stride-1
/// materialization. Returns both sides and whether they agree to relative
/// 1e-12.
///
/// The identity holds when every kernel tap occupies its own matrix entry,
/// which requires `h, w >= n`; on smaller inputs the wrapped taps merge and
/// the function reports the honest (non-equal) comparison.
pub fn norm_relation_check(
    filter: &Filter<f64>,
    h: usize,
    w: usize,
    p: f64,
    pad: PaddingMode,
) -> Result<NormRelation> {
    if pad != PaddingMode::Periodic {
        return Err(Error::Unsupported(
            "the norm relation is only established for periodic padding".into(),
        ));
    }
    if p < 1.0 || !p.is_finite() {
        return Err(Error::Unsupported(format!(
            "norm relation requires 1 <= p < inf, got {p}"
        )));
    }
    let mat = materialize(filter, h, w, 1, pad)?;
    let lhs = sum_abs_pow(&mat.data, p);
    let rhs = (h * w) as f64 * sum_abs_pow(filter.as_slice(), p);
    let tol = 1e-12 * lhs.abs().max(rhs.abs()).max(1.0);
    Ok(NormRelation {
        lhs,
        rhs,
        equal: (lhs - rhs).abs() <= tol,
    })
}
