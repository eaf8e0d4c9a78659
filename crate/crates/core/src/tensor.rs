//! Dense feature and filter containers, vectorization, and entrywise norms.
//!
//! A [`Feature`] is a rank-3 array (height x width x depth). Its backing
//! storage is already in vectorization order: element `(i, j, k)` (row,
//! column, channel; all indices 0-based in this API) lives at flat index
//! `k*h*w + i*w + j`. Vectorizing a feature is therefore a copy, and the
//! round trip is bit-exact by construction.
//!
//! A [`Filter`] is a rank-4 array (n x n x d_in x d_out) stored as a block of
//! `d_in * d_out` subfilters: entry `(a, b)` of subfilter `(i, j)` lives at
//! flat index `((i*d_out + j)*n + a)*n + b`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::io::{Read, Write};

/// Magic bytes of the binary tensor format.
pub const TENSOR_MAGIC: &[u8; 4] = b"STBL";

/// Entrywise / vector norms used throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    /// Sum of absolute values.
    L1,
    /// Euclidean norm.
    L2,
    /// Maximum absolute value.
    Linf,
    /// Frobenius norm of a feature; coincides with `L2` of its vectorization.
    Frobenius,
    /// Entrywise p-norm `(sum |x|^p)^(1/p)`; construct via [`NormKind::lpp`].
    Lpp(f64),
}

impl NormKind {
    /// Entrywise p-norm. Rejects `p < 1`.
    pub fn lpp(p: f64) -> Result<Self> {
        if p < 1.0 || !p.is_finite() {
            return Err(Error::Unsupported(format!(
                "entrywise p-norm requires p >= 1, got {p}"
            )));
        }
        Ok(NormKind::Lpp(p))
    }
}

/// Norm of a flat slice of scalars.
pub fn norm_slice<T: Scalar>(data: &[T], kind: NormKind) -> T {
    match kind {
        NormKind::L1 => data.iter().map(|v| v.abs()).fold(T::zero(), |a, b| a + b),
        NormKind::L2 | NormKind::Frobenius => data
            .iter()
            .map(|v| *v * *v)
            .fold(T::zero(), |a, b| a + b)
            .sqrt(),
        NormKind::Linf => data.iter().map(|v| v.abs()).fold(T::zero(), T::max),
        NormKind::Lpp(p) => {
            let p = T::from_f64(p);
            data.iter()
                .map(|v| v.abs().powf(p))
                .fold(T::zero(), |a, b| a + b)
                .powf(T::one() / p)
        }
    }
}

/// Euclidean inner product of two equally sized slices.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| *x * *y).fold(T::zero(), |s, v| s + v)
}

/// A single 2D channel (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Plane<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "plane data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Plane {
            height,
            width,
            data: vec![T::zero(); height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Plane {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.width + j] = v;
    }
}

/// Dense rank-3 feature (height x width x depth).
#[derive(Debug, Clone, PartialEq)]
pub struct Feature<T> {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<T>,
}

impl<T: Scalar> Feature<T> {
    /// Build a feature from data already in vectorization order.
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(Error::Shape(format!(
                "feature dimensions must be positive, got {height}x{width}x{depth}"
            )));
        }
        if data.len() != height * width * depth {
            return Err(Error::Shape(format!(
                "feature data length {} does not match {height}x{width}x{depth}",
                data.len()
            )));
        }
        Ok(Feature {
            height,
            width,
            depth,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        Feature {
            height,
            width,
            depth,
            data: vec![T::zero(); height * width * depth],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        depth: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * depth);
        for k in 0..depth {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(i, j, k));
                }
            }
        }
        Feature {
            height,
            width,
            depth,
            data,
        }
    }

    /// Single-channel feature from a plane.
    pub fn from_plane(plane: Plane<T>) -> Self {
        Feature {
            height: plane.height,
            width: plane.width,
            depth: 1,
            data: plane.data,
        }
    }

    /// Length-d vector viewed as a 1x1xd feature.
    pub fn from_vector(v: Vec<T>) -> Result<Self> {
        let d = v.len();
        Feature::new(1, 1, d, v)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.depth)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[k * self.height * self.width + i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        self.data[k * self.height * self.width + i * self.width + j] = v;
    }

    /// Contiguous storage of channel `k` (row-major).
    pub fn channel_data(&self, k: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.data[k * hw..(k + 1) * hw]
    }

    pub fn channel_data_mut(&mut self, k: usize) -> &mut [T] {
        let hw = self.height * self.width;
        &mut self.data[k * hw..(k + 1) * hw]
    }

    /// Copy of channel `k` as a plane.
    pub fn channel(&self, k: usize) -> Plane<T> {
        Plane {
            height: self.height,
            width: self.width,
            data: self.channel_data(k).to_vec(),
        }
    }

    /// Overwrite channel `k` from a plane of matching shape.
    pub fn set_channel(&mut self, k: usize, plane: &Plane<T>) {
        debug_assert_eq!((plane.height, plane.width), (self.height, self.width));
        self.channel_data_mut(k).copy_from_slice(&plane.data);
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// The vectorization: component `k*h*w + i*w + j` equals element
    /// `(i, j, k)`. Storage is already in this order, so this is a copy.
    pub fn vectorize(&self) -> Vec<T> {
        self.data.clone()
    }

    /// Inverse of [`Feature::vectorize`]; bit-exact round trip.
    pub fn devectorize(height: usize, width: usize, depth: usize, v: Vec<T>) -> Result<Self> {
        Feature::new(height, width, depth, v)
    }

    pub fn norm(&self, kind: NormKind) -> T {
        norm_slice(&self.data, kind)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Feature {
            height: self.height,
            width: self.width,
            depth: self.depth,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Elementwise `self + scale * other`. Shapes must match.
    pub fn axpy(&mut self, scale: T, other: &Feature<T>) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Add a per-channel constant bias (one scalar per channel).
    pub fn add_channel_bias(&mut self, bias: &[T]) {
        debug_assert_eq!(bias.len(), self.depth);
        for (k, b) in bias.iter().enumerate() {
            for v in self.channel_data_mut(k) {
                *v += *b;
            }
        }
    }
}

/// Dense rank-4 convolution filter (n x n spatial, d_in input channels,
/// d_out output channels).
#[derive(Debug, Clone, PartialEq)]
pub struct Filter<T> {
    n: usize,
    d_in: usize,
    d_out: usize,
    data: Vec<T>,
}

impl<T: Scalar> Filter<T> {
    pub fn new(n: usize, d_in: usize, d_out: usize, data: Vec<T>) -> Result<Self> {
        if n == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::Shape(format!(
                "filter dimensions must be positive, got n={n}, d_in={d_in}, d_out={d_out}"
            )));
        }
        if data.len() != n * n * d_in * d_out {
            return Err(Error::Shape(format!(
                "filter data length {} does not match {n}x{n}x{d_in}x{d_out}",
                data.len()
            )));
        }
        Ok(Filter {
            n,
            d_in,
            d_out,
            data,
        })
    }

    pub fn zeros(n: usize, d_in: usize, d_out: usize) -> Self {
        Filter {
            n,
            d_in,
            d_out,
            data: vec![T::zero(); n * n * d_in * d_out],
        }
    }

    pub fn from_fn(
        n: usize,
        d_in: usize,
        d_out: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(n * n * d_in * d_out);
        for i in 0..d_in {
            for j in 0..d_out {
                for a in 0..n {
                    for b in 0..n {
                        data.push(f(a, b, i, j));
                    }
                }
            }
        }
        Filter {
            n,
            d_in,
            d_out,
            data,
        }
    }

    /// Identity filter for odd `n`: center tap 1 on matching channels.
    pub fn identity(n: usize, d: usize) -> Self {
        assert!(n % 2 == 1, "identity filter needs an odd window");
        let r = (n - 1) / 2;
        Filter::from_fn(n, d, d, |a, b, i, j| {
            if a == r && b == r && i == j {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn d_in(&self) -> usize {
        self.d_in
    }
    pub fn d_out(&self) -> usize {
        self.d_out
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Entry `(a, b)` of subfilter `(i, j)`: `i` indexes input channels,
    /// `j` output channels.
    #[inline]
    pub fn get(&self, a: usize, b: usize, i: usize, j: usize) -> T {
        self.data[((i * self.d_out + j) * self.n + a) * self.n + b]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, i: usize, j: usize, v: T) {
        self.data[((i * self.d_out + j) * self.n + a) * self.n + b] = v;
    }

    /// Contiguous n*n storage of subfilter `(i, j)` (row-major).
    pub fn subfilter_data(&self, i: usize, j: usize) -> &[T] {
        let nn = self.n * self.n;
        let base = (i * self.d_out + j) * nn;
        &self.data[base..base + nn]
    }

    pub fn subfilter(&self, i: usize, j: usize) -> Plane<T> {
        Plane {
            height: self.n,
            width: self.n,
            data: self.subfilter_data(i, j).to_vec(),
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn norm(&self, kind: NormKind) -> T {
        norm_slice(&self.data, kind)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Filter {
            n: self.n,
            d_in: self.d_in,
            d_out: self.d_out,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Scale every subfilter feeding output channel `j` by `s[j]`.
    pub fn scale_out_channels(&self, s: &[T]) -> Self {
        debug_assert_eq!(s.len(), self.d_out);
        Filter::from_fn(self.n, self.d_in, self.d_out, |a, b, i, j| {
            self.get(a, b, i, j) * s[j]
        })
    }

    pub fn min_entry(&self) -> T {
        self.data.iter().fold(T::infinity(), |m, v| m.min(*v))
    }
}

// ---------------------------------------------------------------------------
// Binary serialization: little-endian header (magic "STBL", rank, dims as
// u32) followed by the raw f64 payload in storage order.
// ---------------------------------------------------------------------------

/// Write a raw tensor blob.
pub fn write_tensor<W: Write>(w: &mut W, dims: &[u32], data: &[f64]) -> Result<()> {
    let expected: usize = dims.iter().map(|d| *d as usize).product();
    if expected != data.len() {
        return Err(Error::Shape(format!(
            "tensor payload length {} does not match dims {:?}",
            data.len(),
            dims
        )));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a raw tensor blob written by [`write_tensor`].
pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Vec<u32>, Vec<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?}, expected {:?}",
            magic, TENSOR_MAGIC
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let rank = u32::from_le_bytes(buf4) as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut buf4)?;
        dims.push(u32::from_le_bytes(buf4));
    }
    let count: usize = dims.iter().map(|d| *d as usize).product();
    let mut data = Vec::with_capacity(count);
    let mut buf8 = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf8)?;
        data.push(f64::from_le_bytes(buf8));
    }
    Ok((dims, data))
}

impl Feature<f64> {
    /// Serialize as rank 3, dims `(h, w, d)`, payload in vectorization order.
    pub fn write_stbl<W: Write>(&self, w: &mut W) -> Result<()> {
        write_tensor(
            w,
            &[self.height as u32, self.width as u32, self.depth as u32],
            &self.data,
        )
    }

    pub fn read_stbl<R: Read>(r: &mut R) -> Result<Self> {
        let (dims, data) = read_tensor(r)?;
        if dims.len() != 3 {
            return Err(Error::Format(format!(
                "expected a rank-3 feature, got rank {}",
                dims.len()
            )));
        }
        Feature::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, data)
    }
}

impl Filter<f64> {
    /// Serialize as rank 4, dims `(n, n, d_in, d_out)`, payload in subfilter
    /// block order.
    pub fn write_stbl<W: Write>(&self, w: &mut W) -> Result<()> {
        write_tensor(
            w,
            &[
                self.n as u32,
                self.n as u32,
                self.d_in as u32,
                self.d_out as u32,
            ],
            &self.data,
        )
    }

    pub fn read_stbl<R: Read>(r: &mut R) -> Result<Self> {
        let (dims, data) = read_tensor(r)?;
        if dims.len() != 4 || dims[0] != dims[1] {
            return Err(Error::Format(format!(
                "expected a rank-4 filter with square window, got dims {:?}",
                dims
            )));
        }
        Filter::new(dims[0] as usize, dims[2] as usize, dims[3] as usize, data)
    }
}
