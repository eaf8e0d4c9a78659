//! The full classification architecture: one convolution layer, three stacks
//! of residual layers separated by 2D pooling layers, global average pooling,
//! and a fully connected head.
//!
//! Layer schedule for block size `m` (layer indices are 0-based; the input is
//! state 0 and the output of layer `i` is state `i+1`):
//!
//! ```text
//! 0            convolution            (h1, w1, d0) -> (h1, w1, d1)
//! 1 ..= m      residual               (h1, w1, d1)
//! m+1          2D pooling             (h1, w1, d1) -> (h2, w2, 2*d1)
//! m+2 ..= 2m   residual               (h2, w2, d2)
//! 2m+1         2D pooling             (h2, w2, d2) -> (h3, w3, 2*d2)
//! 2m+2 ..= 3m  residual               (h3, w3, d3)
//! 3m+1         global pooling         (h3, w3, d3) -> d3
//! 3m+2         fully connected        d3 -> classes
//! ```
//!
//! with `h_{i+1} = ceil(h_i / 2)`, `w_{i+1} = ceil(w_i / 2)`, and
//! `d_{i+1} = 2 d_i`. The network has `3m + 3` layers in total.

use crate::conv::{adjoint_conv, conv2d, PaddingMode};
use crate::error::{Error, Result};
use crate::layer::{pad_channels, pool2, pool_global, relu, BatchNormParams};
use crate::tensor::{read_tensor, write_tensor, NormKind};
use crate::{Feature64, Filter64};
use nalgebra::DMatrix;
use std::io::{Read, Write};
use std::path::Path;

/// Spatial size of every filter in the network.
pub const KERNEL_SIZE: usize = 3;

/// Which residual form the network uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    /// Second convolution constrained elementwise nonnegative.
    #[serde(rename = "resnet-d")]
    ResNetD,
    /// Single filter applied forward and through its adjoint.
    #[serde(rename = "resnet-s")]
    ResNetS,
}

/// Architecture description; all learnable content lives in [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub variant: Variant,
    /// Size of the first residual stack; the other two have `m - 1` layers.
    pub m: usize,
    pub height: usize,
    pub width: usize,
    /// Input channels.
    pub depth: usize,
    /// Channels after the first convolution.
    pub d1: usize,
    pub classes: usize,
    /// Insert batch normalization after each convolution inside residual
    /// layers. Off reproduces the bare layer equations.
    #[serde(default)]
    pub use_batchnorm: bool,
    #[serde(default)]
    pub padding: PaddingMode,
}

/// Role of one layer in the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    ConvFirst,
    /// `scale` indexes the dimension stage (0, 1, or 2).
    Residual { scale: usize },
    /// Pooling from stage `scale` to `scale + 1`.
    Pool { scale: usize },
    GlobalPool,
    Dense,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("residual block size m must be >= 1".into()));
        }
        if self.height == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        if self.d1 == 0 || self.classes == 0 {
            return Err(Error::Config("d1 and classes must be positive".into()));
        }
        Ok(())
    }

    /// `(h, w, d)` at dimension stage `s` (0-based, `s < 3`).
    pub fn scale_dims(&self, s: usize) -> (usize, usize, usize) {
        let mut h = self.height;
        let mut w = self.width;
        let mut d = self.d1;
        for _ in 0..s {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            d *= 2;
        }
        (h, w, d)
    }

    /// Channel count entering the fully connected layer.
    pub fn d3(&self) -> usize {
        4 * self.d1
    }

    /// Total number of layers, `3m + 3`.
    pub fn layer_count(&self) -> usize {
        3 * self.m + 3
    }

    pub fn layer_kind(&self, idx: usize) -> LayerKind {
        let m = self.m;
        if idx == 0 {
            LayerKind::ConvFirst
        } else if idx <= m {
            LayerKind::Residual { scale: 0 }
        } else if idx == m + 1 {
            LayerKind::Pool { scale: 0 }
        } else if idx <= 2 * m {
            LayerKind::Residual { scale: 1 }
        } else if idx == 2 * m + 1 {
            LayerKind::Pool { scale: 1 }
        } else if idx <= 3 * m {
            LayerKind::Residual { scale: 2 }
        } else if idx == 3 * m + 1 {
            LayerKind::GlobalPool
        } else if idx == 3 * m + 2 {
            LayerKind::Dense
        } else {
            panic!("layer index {idx} out of range for m={m}");
        }
    }

    /// Indices of all residual layers together with their dimension stage.
    pub fn residual_layers(&self) -> Vec<(usize, usize)> {
        (0..self.layer_count())
            .filter_map(|idx| match self.layer_kind(idx) {
                LayerKind::Residual { scale } => Some((idx, scale)),
                _ => None,
            })
            .collect()
    }
}

/// Second-normalization parameters inside a residual layer. Scale and shift
/// are structurally fixed to 1 and 0 (so the folded operator keeps the sign
/// and symmetry structure of the convolution); only statistics are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct BnFrozen {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl BnFrozen {
    pub fn identity(d: usize) -> Self {
        BnFrozen {
            mu: vec![0.0; d],
            sigma: vec![1.0; d],
        }
    }

    pub fn apply_eval(&self, x: &Feature64) -> Feature64 {
        let mut out = x.clone();
        for k in 0..x.depth() {
            let (m, s) = (self.mu[k], self.sigma[k]);
            for v in out.channel_data_mut(k) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv {
        filter: Filter64,
        /// One scalar per output channel.
        bias: Vec<f64>,
    },
    ResidualD {
        k1: Filter64,
        k2: Filter64,
        b1: Vec<f64>,
        b2: Vec<f64>,
        bn1: Option<BatchNormParams<f64>>,
        bn2: Option<BnFrozen>,
    },
    ResidualS {
        k: Filter64,
        b1: Vec<f64>,
        b2: Vec<f64>,
        bn1: Option<BatchNormParams<f64>>,
        bn2: Option<BnFrozen>,
    },
    Pool {
        filter: Filter64,
        bias: Vec<f64>,
    },
    GlobalPool,
    Dense {
        /// `classes x d3`.
        weight: DMatrix<f64>,
        bias: Vec<f64>,
    },
}

/// All learnable parameters, one entry per layer of the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub layers: Vec<LayerParams>,
}

impl ParamStore {
    /// All-zero parameters of the right shapes (identity normalization when
    /// batch norm is enabled).
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let n = KERNEL_SIZE;
        let mut layers = Vec::with_capacity(spec.layer_count());
        for idx in 0..spec.layer_count() {
            layers.push(match spec.layer_kind(idx) {
                LayerKind::ConvFirst => LayerParams::Conv {
                    filter: Filter64::zeros(n, spec.depth, spec.d1),
                    bias: vec![0.0; spec.d1],
                },
                LayerKind::Residual { scale } => {
                    let d = spec.scale_dims(scale).2;
                    let bn1 = spec.use_batchnorm.then(|| BatchNormParams::identity(d));
                    let bn2 = spec.use_batchnorm.then(|| BnFrozen::identity(d));
                    match spec.variant {
                        Variant::ResNetD => LayerParams::ResidualD {
                            k1: Filter64::zeros(n, d, d),
                            k2: Filter64::zeros(n, d, d),
                            b1: vec![0.0; d],
                            b2: vec![0.0; d],
                            bn1,
                            bn2,
                        },
                        Variant::ResNetS => LayerParams::ResidualS {
                            k: Filter64::zeros(n, d, d),
                            b1: vec![0.0; d],
                            b2: vec![0.0; d],
                            bn1,
                            bn2,
                        },
                    }
                }
                LayerKind::Pool { scale } => {
                    let d = spec.scale_dims(scale).2;
                    LayerParams::Pool {
                        filter: Filter64::zeros(n, d, 2 * d),
                        bias: vec![0.0; 2 * d],
                    }
                }
                LayerKind::GlobalPool => LayerParams::GlobalPool,
                LayerKind::Dense => LayerParams::Dense {
                    weight: DMatrix::zeros(spec.classes, spec.d3()),
                    bias: vec![0.0; spec.classes],
                },
            });
        }
        ParamStore { layers }
    }

    /// All trainable scalars in a fixed traversal order: per layer, filters
    /// first (k1 then k2 where applicable), then biases (b1, b2), then the
    /// learnable normalization scale and shift. Statistics and the frozen
    /// second normalization carry no trainable scalars. The dense weight is
    /// walked row-major.
    pub fn trainable(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for lp in &self.layers {
            match lp {
                LayerParams::Conv { filter, bias } | LayerParams::Pool { filter, bias } => {
                    out.extend_from_slice(filter.as_slice());
                    out.extend_from_slice(bias);
                }
                LayerParams::ResidualD {
                    k1,
                    k2,
                    b1,
                    b2,
                    bn1,
                    ..
                } => {
                    out.extend_from_slice(k1.as_slice());
                    out.extend_from_slice(k2.as_slice());
                    out.extend_from_slice(b1);
                    out.extend_from_slice(b2);
                    if let Some(bn) = bn1 {
                        out.extend_from_slice(&bn.gamma);
                        out.extend_from_slice(&bn.beta);
                    }
                }
                LayerParams::ResidualS { k, b1, b2, bn1, .. } => {
                    out.extend_from_slice(k.as_slice());
                    out.extend_from_slice(b1);
                    out.extend_from_slice(b2);
                    if let Some(bn) = bn1 {
                        out.extend_from_slice(&bn.gamma);
                        out.extend_from_slice(&bn.beta);
                    }
                }
                LayerParams::GlobalPool => {}
                LayerParams::Dense { weight, bias } => {
                    for r in 0..weight.nrows() {
                        for c in 0..weight.ncols() {
                            out.push(weight[(r, c)]);
                        }
                    }
                    out.extend_from_slice(bias);
                }
            }
        }
        out
    }

    /// Overwrite the trainable scalars from a flat vector produced by (or
    /// shaped like) [`ParamStore::trainable`].
    pub fn set_trainable(&mut self, values: &[f64]) -> Result<()> {
        let mut it = values.iter();
        let mut take = |dst: &mut f64| -> Result<()> {
            *dst = *it
                .next()
                .ok_or_else(|| Error::Shape("trainable vector too short".into()))?;
            Ok(())
        };
        for lp in &mut self.layers {
            match lp {
                LayerParams::Conv { filter, bias } | LayerParams::Pool { filter, bias } => {
                    for v in filter.as_mut_slice() {
                        take(v)?;
                    }
                    for v in bias.iter_mut() {
                        take(v)?;
                    }
                }
                LayerParams::ResidualD {
                    k1,
                    k2,
                    b1,
                    b2,
                    bn1,
                    ..
                } => {
                    for v in k1.as_mut_slice() {
                        take(v)?;
                    }
                    for v in k2.as_mut_slice() {
                        take(v)?;
                    }
                    for v in b1.iter_mut().chain(b2.iter_mut()) {
                        take(v)?;
                    }
                    if let Some(bn) = bn1 {
                        for v in bn.gamma.iter_mut().chain(bn.beta.iter_mut()) {
                            take(v)?;
                        }
                    }
                }
                LayerParams::ResidualS { k, b1, b2, bn1, .. } => {
                    for v in k.as_mut_slice() {
                        take(v)?;
                    }
                    for v in b1.iter_mut().chain(b2.iter_mut()) {
                        take(v)?;
                    }
                    if let Some(bn) = bn1 {
                        for v in bn.gamma.iter_mut().chain(bn.beta.iter_mut()) {
                            take(v)?;
                        }
                    }
                }
                LayerParams::GlobalPool => {}
                LayerParams::Dense { weight, bias } => {
                    for r in 0..weight.nrows() {
                        for c in 0..weight.ncols() {
                            take(&mut weight[(r, c)])?;
                        }
                    }
                    for v in bias.iter_mut() {
                        take(v)?;
                    }
                }
            }
        }
        if it.next().is_some() {
            return Err(Error::Shape("trainable vector too long".into()));
        }
        Ok(())
    }

    /// Check that every layer's parameters have the shapes the schedule
    /// demands.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layer_count() {
            return Err(Error::Shape(format!(
                "parameter store has {} layers, schedule needs {}",
                self.layers.len(),
                spec.layer_count()
            )));
        }
        for (idx, lp) in self.layers.iter().enumerate() {
            let ok = match (spec.layer_kind(idx), lp) {
                (LayerKind::ConvFirst, LayerParams::Conv { filter, bias }) => {
                    filter.d_in() == spec.depth
                        && filter.d_out() == spec.d1
                        && bias.len() == spec.d1
                }
                (LayerKind::Residual { scale }, LayerParams::ResidualD { k1, k2, b1, b2, .. }) => {
                    let d = spec.scale_dims(scale).2;
                    spec.variant == Variant::ResNetD
                        && [k1.d_in(), k1.d_out(), k2.d_in(), k2.d_out()] == [d; 4]
                        && b1.len() == d
                        && b2.len() == d
                }
                (LayerKind::Residual { scale }, LayerParams::ResidualS { k, b1, b2, .. }) => {
                    let d = spec.scale_dims(scale).2;
                    spec.variant == Variant::ResNetS
                        && k.d_in() == d
                        && k.d_out() == d
                        && b1.len() == d
                        && b2.len() == d
                }
                (LayerKind::Pool { scale }, LayerParams::Pool { filter, bias }) => {
                    let d = spec.scale_dims(scale).2;
                    filter.d_in() == d && filter.d_out() == 2 * d && bias.len() == 2 * d
                }
                (LayerKind::GlobalPool, LayerParams::GlobalPool) => true,
                (LayerKind::Dense, LayerParams::Dense { weight, bias }) => {
                    weight.nrows() == spec.classes
                        && weight.ncols() == spec.d3()
                        && bias.len() == spec.classes
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Shape(format!(
                    "layer {idx} parameters do not match the schedule"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layer maps (evaluation mode)
// ---------------------------------------------------------------------------

/// First layer: `A x + b`.
pub fn layer_conv_first(
    x: &Feature64,
    filter: &Filter64,
    bias: &[f64],
    pad: PaddingMode,
) -> Result<Feature64> {
    let mut y = conv2d(x, filter, 1, pad)?;
    y.add_channel_bias(bias);
    Ok(y)
}

/// Residual layer with a nonnegative second convolution:
/// `x' = (x - A2 (A1 x + b1)_+ + b2)_+`. The nonnegativity of `k2` is a
/// precondition; violations are reported, not repaired.
pub fn layer_resnet_d(
    x: &Feature64,
    k1: &Filter64,
    k2: &Filter64,
    b1: &[f64],
    b2: &[f64],
    pad: PaddingMode,
) -> Result<Feature64> {
    if k2.min_entry() < 0.0 {
        return Err(Error::Constraint(
            "second residual filter has a negative entry; project before applying".into(),
        ));
    }
    let mut u = conv2d(x, k1, 1, pad)?;
    u.add_channel_bias(b1);
    let v = relu(&u);
    let z = conv2d(&v, k2, 1, pad)?;
    let mut pre = x.clone();
    pre.axpy(-1.0, &z);
    pre.add_channel_bias(b2);
    Ok(relu(&pre))
}

/// Residual layer built from one filter and its adjoint:
/// `x' = (x - A^T (A x + b1)_+ + b2)_+`.
pub fn layer_resnet_s(
    x: &Feature64,
    k: &Filter64,
    b1: &[f64],
    b2: &[f64],
    pad: PaddingMode,
) -> Result<Feature64> {
    let mut u = conv2d(x, k, 1, pad)?;
    u.add_channel_bias(b1);
    let v = relu(&u);
    let z = adjoint_conv(&v, k, pad)?;
    let mut pre = x.clone();
    pre.axpy(-1.0, &z);
    pre.add_channel_bias(b2);
    Ok(relu(&pre))
}

/// 2D pooling layer: `x' = (E(P2(x)) - (A x |stride 2| + b)_+)_+`, doubling
/// channels and halving the spatial size.
pub fn layer_pool2d(
    x: &Feature64,
    filter: &Filter64,
    bias: &[f64],
    pad: PaddingMode,
) -> Result<Feature64> {
    let pooled = pad_channels(&pool2(x), 2 * x.depth())?;
    let mut q = conv2d(x, filter, 2, pad)?;
    q.add_channel_bias(bias);
    let q = relu(&q);
    let mut pre = pooled;
    pre.axpy(-1.0, &q);
    Ok(relu(&pre))
}

/// Global pooling layer: `x' = P_g((x)_+)`.
pub fn layer_global(x: &Feature64) -> Vec<f64> {
    pool_global(&relu(x))
}

/// Fully connected layer: `W x + b`.
pub fn layer_dense(x: &[f64], weight: &DMatrix<f64>, bias: &[f64]) -> Result<Vec<f64>> {
    if weight.ncols() != x.len() || weight.nrows() != bias.len() {
        return Err(Error::Shape(format!(
            "dense layer got weight {}x{}, input length {}, bias length {}",
            weight.nrows(),
            weight.ncols(),
            x.len(),
            bias.len()
        )));
    }
    let mut out = bias.to_vec();
    for r in 0..weight.nrows() {
        let mut acc = 0.0;
        for c in 0..weight.ncols() {
            acc += weight[(r, c)] * x[c];
        }
        out[r] += acc;
    }
    Ok(out)
}

fn layer_resnet_d_bn(
    x: &Feature64,
    k1: &Filter64,
    k2: &Filter64,
    b1: &[f64],
    b2: &[f64],
    bn1: &BatchNormParams<f64>,
    bn2: &BnFrozen,
    pad: PaddingMode,
) -> Result<Feature64> {
    if k2.min_entry() < 0.0 {
        return Err(Error::Constraint(
            "second residual filter has a negative entry; project before applying".into(),
        ));
    }
    let mut u = conv2d(x, k1, 1, pad)?;
    u.add_channel_bias(b1);
    let v = relu(&bn1.apply_eval(&u));
    let z = bn2.apply_eval(&conv2d(&v, k2, 1, pad)?);
    let mut pre = x.clone();
    pre.axpy(-1.0, &z);
    pre.add_channel_bias(b2);
    Ok(relu(&pre))
}

fn layer_resnet_s_bn(
    x: &Feature64,
    k: &Filter64,
    b1: &[f64],
    b2: &[f64],
    bn1: &BatchNormParams<f64>,
    bn2: &BnFrozen,
    pad: PaddingMode,
) -> Result<Feature64> {
    let mut u = conv2d(x, k, 1, pad)?;
    u.add_channel_bias(b1);
    let v = relu(&bn1.apply_eval(&u));
    let z = bn2.apply_eval(&adjoint_conv(&v, k, pad)?);
    let mut pre = x.clone();
    pre.axpy(-1.0, &z);
    pre.add_channel_bias(b2);
    Ok(relu(&pre))
}

// ---------------------------------------------------------------------------
// Folded view for certification
// ---------------------------------------------------------------------------

/// Effective affine content of one residual layer once eval-mode
/// normalization is folded in. Each operator is a raw filter plus an optional
/// per-output-channel scale: the effective map is `diag(scale) o conv`.
#[derive(Debug, Clone)]
pub struct FoldedResidual {
    pub filter1: Filter64,
    pub scale1: Option<Vec<f64>>,
    /// For the D form, the second filter (applied forward); for the S form,
    /// the shared filter (applied through its adjoint).
    pub filter2: Filter64,
    pub scale2: Option<Vec<f64>>,
    /// Effective bias inside the inner activation.
    pub b1: Vec<f64>,
    /// Effective bias added before the outer activation.
    pub b2: Vec<f64>,
    /// Whether the second operator is exactly the adjoint of the first
    /// (always true for the plain S form; folding with unequal per-channel
    /// scales breaks it).
    pub symmetric: bool,
}

impl FoldedResidual {
    /// First operator with the scale multiplied into the filter.
    pub fn scaled_filter1(&self) -> Filter64 {
        match &self.scale1 {
            None => self.filter1.clone(),
            Some(s) => self.filter1.scale_out_channels(s),
        }
    }

    /// Second operator with the scale multiplied into the filter (only
    /// meaningful for the D form, where it is applied as a forward
    /// convolution).
    pub fn scaled_filter2(&self) -> Filter64 {
        match &self.scale2 {
            None => self.filter2.clone(),
            Some(s) => self.filter2.scale_out_channels(s),
        }
    }
}

fn bn1_fold(bn: &BatchNormParams<f64>, b1: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let bias = (0..b1.len())
        .map(|c| bn.gamma[c] * (b1[c] - bn.mu[c]) / bn.sigma[c] + bn.beta[c])
        .collect();
    let scale = bn.gamma.iter().zip(&bn.sigma).map(|(g, s)| g / s).collect();
    (bias, scale)
}

fn bn2_fold(bn: &BnFrozen, b2: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let bias = b2
        .iter()
        .zip(bn.mu.iter().zip(&bn.sigma))
        .map(|(b, (m, s))| b + m / s)
        .collect();
    let scale = bn.sigma.iter().map(|s| 1.0 / s).collect();
    (bias, scale)
}

/// Fold the (eval-mode) normalization of a residual layer into effective
/// operators and biases, so certificates see what the forward pass applies.
pub fn fold_residual(lp: &LayerParams) -> Result<FoldedResidual> {
    match lp {
        LayerParams::ResidualD {
            k1,
            k2,
            b1,
            b2,
            bn1,
            bn2,
        } => {
            let (eb1, s1) = match bn1 {
                None => (b1.clone(), None),
                Some(bn) => {
                    let (b, s) = bn1_fold(bn, b1);
                    (b, Some(s))
                }
            };
            let (eb2, s2) = match bn2 {
                None => (b2.clone(), None),
                Some(bn) => {
                    let (b, s) = bn2_fold(bn, b2);
                    (b, Some(s))
                }
            };
            Ok(FoldedResidual {
                filter1: k1.clone(),
                scale1: s1,
                filter2: k2.clone(),
                scale2: s2,
                b1: eb1,
                b2: eb2,
                symmetric: false,
            })
        }
        LayerParams::ResidualS { k, b1, b2, bn1, bn2 } => {
            let (eb1, s1) = match bn1 {
                None => (b1.clone(), None),
                Some(bn) => {
                    let (b, s) = bn1_fold(bn, b1);
                    (b, Some(s))
                }
            };
            let (eb2, s2) = match bn2 {
                None => (b2.clone(), None),
                Some(bn) => {
                    let (b, s) = bn2_fold(bn, b2);
                    (b, Some(s))
                }
            };
            let symmetric = match (&s1, &s2) {
                (None, None) => true,
                (Some(a), Some(b)) => a.iter().zip(b).all(|(x, y)| x == y),
                _ => false,
            };
            Ok(FoldedResidual {
                filter1: k.clone(),
                scale1: s1,
                filter2: k.clone(),
                scale2: s2,
                b1: eb1,
                b2: eb2,
                symmetric,
            })
        }
        _ => Err(Error::Shape("not a residual layer".into())),
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Norms (and optionally the full feature) of one recorded state.
#[derive(Debug, Clone)]
pub struct TraceState {
    pub l2: f64,
    pub linf: f64,
    pub feature: Option<Feature64>,
}

/// Per-state record of a forward pass: `layer_count() + 1` entries, from the
/// input through the final logits (vector states are stored as 1x1xd
/// features).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub states: Vec<TraceState>,
}

impl ForwardTrace {
    fn push(&mut self, f: &Feature64, record: bool) {
        self.states.push(TraceState {
            l2: f.norm(NormKind::L2),
            linf: f.norm(NormKind::Linf),
            feature: record.then(|| f.clone()),
        });
    }
}

/// Run the network in evaluation mode, recording per-state norms (full
/// features only when `record` is set). Returns the logits and the trace.
pub fn forward(
    spec: &NetworkSpec,
    params: &ParamStore,
    x0: &Feature64,
    record: bool,
) -> Result<(Vec<f64>, ForwardTrace)> {
    spec.validate()?;
    params.validate(spec)?;
    if x0.dims() != (spec.height, spec.width, spec.depth) {
        return Err(Error::Shape(format!(
            "input dims {:?} do not match the network input {:?}",
            x0.dims(),
            (spec.height, spec.width, spec.depth)
        )));
    }
    let mut trace = ForwardTrace { states: Vec::new() };
    trace.push(x0, record);
    let mut cur = x0.clone();
    for (idx, lp) in params.layers.iter().enumerate() {
        let next = match lp {
            LayerParams::Conv { filter, bias } => {
                layer_conv_first(&cur, filter, bias, spec.padding)
            }
            LayerParams::ResidualD {
                k1,
                k2,
                b1,
                b2,
                bn1,
                bn2,
            } => match (bn1, bn2) {
                (Some(bn1), Some(bn2)) => {
                    layer_resnet_d_bn(&cur, k1, k2, b1, b2, bn1, bn2, spec.padding)
                }
                _ => layer_resnet_d(&cur, k1, k2, b1, b2, spec.padding),
            },
            LayerParams::ResidualS { k, b1, b2, bn1, bn2 } => match (bn1, bn2) {
                (Some(bn1), Some(bn2)) => {
                    layer_resnet_s_bn(&cur, k, b1, b2, bn1, bn2, spec.padding)
                }
                _ => layer_resnet_s(&cur, k, b1, b2, spec.padding),
            },
            LayerParams::Pool { filter, bias } => layer_pool2d(&cur, filter, bias, spec.padding),
            LayerParams::GlobalPool => Feature64::from_vector(layer_global(&cur)),
            LayerParams::Dense { weight, bias } => {
                layer_dense(cur.as_slice(), weight, bias).and_then(Feature64::from_vector)
            }
        };
        cur = next.map_err(|e| e.at_layer(idx))?;
        trace.push(&cur, record);
    }
    Ok((cur.as_slice().to_vec(), trace))
}

/// Forward pass without trace payload; returns logits only.
pub fn forward_logits(spec: &NetworkSpec, params: &ParamStore, x0: &Feature64) -> Result<Vec<f64>> {
    Ok(forward(spec, params, x0, false)?.0)
}

/// Argmax class prediction.
pub fn predict(spec: &NetworkSpec, params: &ParamStore, x0: &Feature64) -> Result<usize> {
    let logits = forward_logits(spec, params, x0)?;
    Ok(logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0))
}

// ---------------------------------------------------------------------------
// Model container format
// ---------------------------------------------------------------------------

const MODEL_MAGIC: &[u8; 4] = b"STBM";
const MODEL_VERSION: u8 = 1;

fn write_vec<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    write_tensor(w, &[v.len() as u32], v)
}

fn read_vec<R: Read>(r: &mut R, expect: usize) -> Result<Vec<f64>> {
    let (dims, data) = read_tensor(r)?;
    if dims.len() != 1 || dims[0] as usize != expect {
        return Err(Error::Format(format!(
            "expected a length-{expect} vector blob, got dims {dims:?}"
        )));
    }
    Ok(data)
}

fn write_bn<W: Write>(w: &mut W, bn1: &BatchNormParams<f64>, bn2: &BnFrozen) -> Result<()> {
    write_vec(w, &bn1.gamma)?;
    write_vec(w, &bn1.beta)?;
    write_vec(w, &bn1.mu)?;
    write_vec(w, &bn1.sigma)?;
    w.write_all(&bn1.epsilon.to_le_bytes())?;
    write_vec(w, &bn2.mu)?;
    write_vec(w, &bn2.sigma)?;
    Ok(())
}

fn read_bn<R: Read>(r: &mut R, d: usize) -> Result<(BatchNormParams<f64>, BnFrozen)> {
    let gamma = read_vec(r, d)?;
    let beta = read_vec(r, d)?;
    let mu = read_vec(r, d)?;
    let sigma = read_vec(r, d)?;
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    let epsilon = f64::from_le_bytes(buf);
    let bn1 = BatchNormParams {
        gamma,
        beta,
        mu,
        sigma,
        epsilon,
    };
    bn1.validate()?;
    let mu2 = read_vec(r, d)?;
    let sigma2 = read_vec(r, d)?;
    Ok((
        bn1,
        BnFrozen {
            mu: mu2,
            sigma: sigma2,
        },
    ))
}

/// Serialize spec plus parameters into one container.
pub fn write_model<W: Write>(w: &mut W, spec: &NetworkSpec, params: &ParamStore) -> Result<()> {
    params.validate(spec)?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&[MODEL_VERSION])?;
    let variant = match spec.variant {
        Variant::ResNetD => 0u8,
        Variant::ResNetS => 1u8,
    };
    w.write_all(&[variant])?;
    for v in [
        spec.m as u32,
        spec.height as u32,
        spec.width as u32,
        spec.depth as u32,
        spec.d1 as u32,
        spec.classes as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&[u8::from(spec.use_batchnorm)])?;
    let pad = match spec.padding {
        PaddingMode::Zero => 0u8,
        PaddingMode::Periodic => 1u8,
    };
    w.write_all(&[pad])?;
    w.write_all(&(KERNEL_SIZE as u32).to_le_bytes())?;

    for lp in &params.layers {
        match lp {
            LayerParams::Conv { filter, bias } => {
                w.write_all(&[1u8])?;
                filter.write_stbl(w)?;
                write_vec(w, bias)?;
            }
            LayerParams::ResidualD {
                k1,
                k2,
                b1,
                b2,
                bn1,
                bn2,
            } => {
                w.write_all(&[2u8])?;
                k1.write_stbl(w)?;
                k2.write_stbl(w)?;
                write_vec(w, b1)?;
                write_vec(w, b2)?;
                match (bn1, bn2) {
                    (Some(bn1), Some(bn2)) => {
                        w.write_all(&[1u8])?;
                        write_bn(w, bn1, bn2)?;
                    }
                    _ => w.write_all(&[0u8])?,
                }
            }
            LayerParams::ResidualS { k, b1, b2, bn1, bn2 } => {
                w.write_all(&[3u8])?;
                k.write_stbl(w)?;
                write_vec(w, b1)?;
                write_vec(w, b2)?;
                match (bn1, bn2) {
                    (Some(bn1), Some(bn2)) => {
                        w.write_all(&[1u8])?;
                        write_bn(w, bn1, bn2)?;
                    }
                    _ => w.write_all(&[0u8])?,
                }
            }
            LayerParams::Pool { filter, bias } => {
                w.write_all(&[4u8])?;
                filter.write_stbl(w)?;
                write_vec(w, bias)?;
            }
            LayerParams::GlobalPool => w.write_all(&[5u8])?,
            LayerParams::Dense { weight, bias } => {
                w.write_all(&[6u8])?;
                let rows = weight.nrows();
                let cols = weight.ncols();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        data.push(weight[(r, c)]);
                    }
                }
                write_tensor(w, &[rows as u32, cols as u32], &data)?;
                write_vec(w, bias)?;
            }
        }
    }
    Ok(())
}

/// Read a container written by [`write_model`].
pub fn read_model<R: Read>(r: &mut R) -> Result<(NetworkSpec, ParamStore)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "bad model magic {magic:?}, expected {MODEL_MAGIC:?}"
        )));
    }
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    if b1[0] != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {}",
            b1[0]
        )));
    }
    r.read_exact(&mut b1)?;
    let variant = match b1[0] {
        0 => Variant::ResNetD,
        1 => Variant::ResNetS,
        v => return Err(Error::Format(format!("unknown variant tag {v}"))),
    };
    let mut u32s = [0u32; 6];
    let mut buf4 = [0u8; 4];
    for slot in &mut u32s {
        r.read_exact(&mut buf4)?;
        *slot = u32::from_le_bytes(buf4);
    }
    r.read_exact(&mut b1)?;
    let use_batchnorm = b1[0] != 0;
    r.read_exact(&mut b1)?;
    let padding = match b1[0] {
        0 => PaddingMode::Zero,
        1 => PaddingMode::Periodic,
        v => return Err(Error::Format(format!("unknown padding tag {v}"))),
    };
    r.read_exact(&mut buf4)?;
    let kernel = u32::from_le_bytes(buf4) as usize;
    if kernel != KERNEL_SIZE {
        return Err(Error::Format(format!(
            "model kernel size {kernel} unsupported (expected {KERNEL_SIZE})"
        )));
    }
    let spec = NetworkSpec {
        variant,
        m: u32s[0] as usize,
        height: u32s[1] as usize,
        width: u32s[2] as usize,
        depth: u32s[3] as usize,
        d1: u32s[4] as usize,
        classes: u32s[5] as usize,
        use_batchnorm,
        padding,
    };
    spec.validate()?;

    let mut layers = Vec::with_capacity(spec.layer_count());
    for idx in 0..spec.layer_count() {
        r.read_exact(&mut b1)?;
        let lp = match b1[0] {
            1 => {
                let filter = Filter64::read_stbl(r)?;
                let d_out = filter.d_out();
                LayerParams::Conv {
                    filter,
                    bias: read_vec(r, d_out)?,
                }
            }
            2 => {
                let k1 = Filter64::read_stbl(r)?;
                let k2 = Filter64::read_stbl(r)?;
                let d = k1.d_out();
                let b1v = read_vec(r, d)?;
                let b2v = read_vec(r, d)?;
                r.read_exact(&mut b1)?;
                let (bn1, bn2) = if b1[0] != 0 {
                    let (a, b) = read_bn(r, d)?;
                    (Some(a), Some(b))
                } else {
                    (None, None)
                };
                LayerParams::ResidualD {
                    k1,
                    k2,
                    b1: b1v,
                    b2: b2v,
                    bn1,
                    bn2,
                }
            }
            3 => {
                let k = Filter64::read_stbl(r)?;
                let d = k.d_out();
                let b1v = read_vec(r, d)?;
                let b2v = read_vec(r, d)?;
                r.read_exact(&mut b1)?;
                let (bn1, bn2) = if b1[0] != 0 {
                    let (a, b) = read_bn(r, d)?;
                    (Some(a), Some(b))
                } else {
                    (None, None)
                };
                LayerParams::ResidualS {
                    k,
                    b1: b1v,
                    b2: b2v,
                    bn1,
                    bn2,
                }
            }
            4 => {
                let filter = Filter64::read_stbl(r)?;
                let d_out = filter.d_out();
                LayerParams::Pool {
                    filter,
                    bias: read_vec(r, d_out)?,
                }
            }
            5 => LayerParams::GlobalPool,
            6 => {
                let (dims, data) = read_tensor(r)?;
                if dims.len() != 2 {
                    return Err(Error::Format("expected rank-2 dense weight".into()));
                }
                let (rows, cols) = (dims[0] as usize, dims[1] as usize);
                let weight = DMatrix::from_row_slice(rows, cols, &data);
                LayerParams::Dense {
                    weight,
                    bias: read_vec(r, rows)?,
                }
            }
            t => {
                return Err(Error::Format(format!(
                    "unknown layer tag {t} at layer {idx}"
                )))
            }
        };
        layers.push(lp);
    }
    let params = ParamStore { layers };
    params.validate(&spec)?;
    Ok((spec, params))
}

/// Write a model container to a file path.
pub fn save_model(path: &Path, spec: &NetworkSpec, params: &ParamStore) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut f, spec, params)
}

/// Read a model container from a file path.
pub fn load_model(path: &Path) -> Result<(NetworkSpec, ParamStore)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_model(&mut f)
}

/// Render a forward trace as delimited text (one state per line).
pub fn write_trace<W: Write>(w: &mut W, trace: &ForwardTrace) -> Result<()> {
    writeln!(w, "state\tl2\tlinf")?;
    for (i, s) in trace.states.iter().enumerate() {
        writeln!(w, "{i}\t{:.17e}\t{:.17e}", s.l2, s.linf)?;
    }
    Ok(())
}
