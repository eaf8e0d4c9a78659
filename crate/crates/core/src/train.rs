//! Desk-scale training: softmax/cross-entropy objective with per-layer
//! regularizers, hand-written reverse-mode gradients for every layer, and
//! mini-batch gradient descent with step decay and constraint projections.

use crate::cert::{assemble_certificate, rescale_filter_l2, PowerOpts};
use crate::conv::{adjoint_conv, conv2d, conv_filter_grad, conv_transpose};
use crate::data::{Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::layer::{crop_channels, pad_channels, pool2, pool2_transpose, pool_global,
    pool_global_transpose};
use crate::network::{
    layer_dense, predict, LayerKind, LayerParams, NetworkSpec, ParamStore, Variant, KERNEL_SIZE,
};
use crate::Feature64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;

// ---------------------------------------------------------------------------
// Objective pieces
// ---------------------------------------------------------------------------

/// Softmax with max-shift for overflow safety; sums to 1 up to rounding.
pub fn softmax(u: &[f64]) -> Vec<f64> {
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = u.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Floor applied inside the logarithm so confidently wrong predictions keep
/// the loss finite.
pub const LOG_CLAMP: f64 = 1e-12;

/// Cross entropy `-u^T log(v)` between probability vectors.
pub fn cross_entropy(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(ui, vi)| {
            if *ui == 0.0 {
                0.0
            } else {
                -ui * vi.max(LOG_CLAMP).ln()
            }
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Optimizer settings. Defaults mirror the reference hyperparameters: batch
/// 128, initial rate 0.1 divided by 10 every 24k steps, 70k steps total,
/// penalty weight 1e-4.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Divide the rate by 10 after every this many steps.
    #[serde(default = "default_decay_steps")]
    pub decay_steps: usize,
    #[serde(default = "default_total_steps")]
    pub total_steps: usize,
    /// Regularization weight shared by all layers.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Clamp the second residual filters to be nonnegative after each step
    /// (required to keep the D form applicable).
    #[serde(default = "default_true")]
    pub project_nonneg: bool,
    /// Rescale residual filters to spectral norm at most sqrt(2) after each
    /// step. Off by default: the objective only penalizes norms, and the
    /// certificate reports violations either way.
    #[serde(default)]
    pub spectral_rescale: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
}

fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    0.1
}
fn default_decay_steps() -> usize {
    24_000
}
fn default_total_steps() -> usize {
    70_000
}
fn default_alpha() -> f64 {
    1e-4
}
fn default_true() -> bool {
    true
}
fn default_eval_interval() -> usize {
    500
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch(),
            learning_rate: default_lr(),
            decay_steps: default_decay_steps(),
            total_steps: default_total_steps(),
            alpha: default_alpha(),
            project_nonneg: true,
            spectral_rescale: false,
            seed: 0,
            eval_interval: default_eval_interval(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.decay_steps == 0 || self.total_steps < self.decay_steps {
            return Err(Error::Config(
                "need total_steps >= decay_steps >= 1".into(),
            ));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval interval must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Residual and pooling filters variance-scaled, the first convolution
    /// uniform-scaled, the dense weight truncated-normal with
    /// `sigma = 1/(d3 * classes)`.
    Default,
    /// Normal with variance `2 / fan_in` everywhere.
    VarianceScaling,
    /// Symmetric uniform range targeting unit output variance
    /// (`U(-sqrt(3/fan_in), sqrt(3/fan_in))`) everywhere.
    UniformScaling,
    /// Truncated normal everywhere: values beyond two standard deviations
    /// are redrawn.
    TruncatedNormal { sigma: f64 },
}

fn sample_variance_scaling(rng: &mut ChaCha8Rng, fan_in: usize) -> f64 {
    let std = (2.0 / fan_in as f64).sqrt();
    let z: f64 = StandardNormal.sample(rng);
    std * z
}

fn sample_uniform_scaling(rng: &mut ChaCha8Rng, fan_in: usize) -> f64 {
    let limit = (3.0 / fan_in as f64).sqrt();
    rng.random::<f64>() * 2.0 * limit - limit
}

fn sample_truncated_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let v = sigma * z;
        if v.abs() <= 2.0 * sigma {
            return v;
        }
    }
}

/// Build initialized parameters. Biases start at zero, normalization scale
/// and shift at one and zero. For the D variant the second residual filters
/// are clamped nonnegative right away so the store is valid.
pub fn init_params(spec: &NetworkSpec, scheme: InitScheme, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::zeros(spec);
    let n2 = KERNEL_SIZE * KERNEL_SIZE;
    let fill_filter = |f: &mut crate::Filter64, rng: &mut ChaCha8Rng, role: &str| {
        let fan_in = n2 * f.d_in();
        for v in f.as_mut_slice() {
            *v = match scheme {
                InitScheme::Default => match role {
                    "first" => sample_uniform_scaling(rng, fan_in),
                    _ => sample_variance_scaling(rng, fan_in),
                },
                InitScheme::VarianceScaling => sample_variance_scaling(rng, fan_in),
                InitScheme::UniformScaling => sample_uniform_scaling(rng, fan_in),
                InitScheme::TruncatedNormal { sigma } => sample_truncated_normal(rng, sigma),
            };
        }
    };
    let d3c = (spec.d3() * spec.classes) as f64;
    for lp in &mut params.layers {
        match lp {
            LayerParams::Conv { filter, .. } => fill_filter(filter, &mut rng, "first"),
            LayerParams::Pool { filter, .. } => fill_filter(filter, &mut rng, "pool"),
            LayerParams::ResidualD { k1, k2, .. } => {
                fill_filter(k1, &mut rng, "residual");
                fill_filter(k2, &mut rng, "residual");
                for v in k2.as_mut_slice() {
                    *v = v.max(0.0);
                }
            }
            LayerParams::ResidualS { k, .. } => fill_filter(k, &mut rng, "residual"),
            LayerParams::GlobalPool => {}
            LayerParams::Dense { weight, .. } => {
                let sigma = match scheme {
                    InitScheme::TruncatedNormal { sigma } => sigma,
                    _ => 1.0 / d3c,
                };
                for v in weight.iter_mut() {
                    *v = match scheme {
                        InitScheme::VarianceScaling => {
                            sample_variance_scaling(&mut rng, weight_fan_in(spec))
                        }
                        InitScheme::UniformScaling => {
                            sample_uniform_scaling(&mut rng, weight_fan_in(spec))
                        }
                        _ => sample_truncated_normal(&mut rng, sigma),
                    };
                }
            }
        }
    }
    params
}

fn weight_fan_in(spec: &NetworkSpec) -> usize {
    spec.d3()
}

// ---------------------------------------------------------------------------
// Batched forward with caches
// ---------------------------------------------------------------------------

struct BnCache {
    sigma: Vec<f64>,
    /// Normalized values (before scale/shift), one per example.
    xhat: Vec<Feature64>,
}

enum Cache {
    Conv {
        x: Vec<Feature64>,
    },
    Residual {
        x: Vec<Feature64>,
        /// Input of the inner activation (post-normalization when present).
        act_in: Vec<Feature64>,
        bn1: Option<BnCache>,
        v: Vec<Feature64>,
        bn2: Option<BnCache>,
        pre: Vec<Feature64>,
    },
    Pool {
        x: Vec<Feature64>,
        q_pre: Vec<Feature64>,
        pre: Vec<Feature64>,
    },
    Global {
        x: Vec<Feature64>,
    },
    Dense {
        x: Vec<Vec<f64>>,
    },
}

/// Per-channel statistics over a batch (count = batch * h * w).
fn batch_stats(batch: &[Feature64], epsilon: f64) -> (Vec<f64>, Vec<f64>) {
    let d = batch[0].depth();
    let count = (batch.len() * batch[0].height() * batch[0].width()) as f64;
    let mut mu = vec![0.0f64; d];
    for x in batch {
        for (k, m) in mu.iter_mut().enumerate() {
            for v in x.channel_data(k) {
                *m += v;
            }
        }
    }
    for m in &mut mu {
        *m /= count;
    }
    let mut var = vec![0.0f64; d];
    for x in batch {
        for (k, s) in var.iter_mut().enumerate() {
            let m = mu[k];
            for v in x.channel_data(k) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let sigma = var.iter().map(|v| (v / count + epsilon).sqrt()).collect();
    (mu, sigma)
}

/// Normalize a batch with fresh statistics; returns (normalized-and-scaled,
/// cache, stats).
fn bn_forward_train(
    batch: &[Feature64],
    gamma: &[f64],
    beta: &[f64],
    epsilon: f64,
) -> (Vec<Feature64>, BnCache, (Vec<f64>, Vec<f64>)) {
    let (mu, sigma) = batch_stats(batch, epsilon);
    let xhat: Vec<Feature64> = batch
        .iter()
        .map(|x| {
            let mut h = x.clone();
            for k in 0..x.depth() {
                let (m, s) = (mu[k], sigma[k]);
                for v in h.channel_data_mut(k) {
                    *v = (*v - m) / s;
                }
            }
            h
        })
        .collect();
    let out: Vec<Feature64> = xhat
        .iter()
        .map(|h| {
            let mut y = h.clone();
            for k in 0..y.depth() {
                let (g, b) = (gamma[k], beta[k]);
                for v in y.channel_data_mut(k) {
                    *v = g * *v + b;
                }
            }
            y
        })
        .collect();
    (
        out,
        BnCache {
            sigma: sigma.clone(),
            xhat,
        },
        (mu, sigma),
    )
}

/// Backward through batch normalization; returns the input gradients and
/// per-channel (d_gamma, d_beta).
fn bn_backward(
    cache: &BnCache,
    gamma: &[f64],
    gout: &[Feature64],
) -> (Vec<Feature64>, Vec<f64>, Vec<f64>) {
    let d = gout[0].depth();
    let count = (gout.len() * gout[0].height() * gout[0].width()) as f64;
    let mut sum_g = vec![0.0f64; d];
    let mut sum_gx = vec![0.0f64; d];
    for (g, xh) in gout.iter().zip(&cache.xhat) {
        for k in 0..d {
            for (gv, xv) in g.channel_data(k).iter().zip(xh.channel_data(k)) {
                sum_g[k] += gv;
                sum_gx[k] += gv * xv;
            }
        }
    }
    let gin: Vec<Feature64> = gout
        .iter()
        .zip(&cache.xhat)
        .map(|(g, xh)| {
            let mut out = g.clone();
            for k in 0..d {
                let scale = gamma[k] / cache.sigma[k];
                let mg = sum_g[k] / count;
                let mgx = sum_gx[k] / count;
                for (o, xv) in out.channel_data_mut(k).iter_mut().zip(xh.channel_data(k)) {
                    *o = scale * (*o - mg - xv * mgx);
                }
            }
            out
        })
        .collect();
    (gin, sum_gx, sum_g)
}

fn relu_batch(batch: &[Feature64]) -> Vec<Feature64> {
    batch.iter().map(crate::layer::relu).collect()
}

fn mask_by<F: Fn(f64) -> bool>(g: &Feature64, gate: &Feature64, keep: F) -> Feature64 {
    let mut out = g.clone();
    for (o, p) in out.as_mut_slice().iter_mut().zip(gate.as_slice()) {
        if !keep(*p) {
            *o = 0.0;
        }
    }
    out
}

fn channel_sums_into(g: &Feature64, acc: &mut [f64]) {
    for (k, a) in acc.iter_mut().enumerate() {
        for v in g.channel_data(k) {
            *a += v;
        }
    }
}

/// Statistics produced by one training-mode forward pass, for updating the
/// stored evaluation statistics.
pub struct BnBatchStats {
    pub layer: usize,
    pub stats1: (Vec<f64>, Vec<f64>),
    pub stats2: (Vec<f64>, Vec<f64>),
}

type BnStatsPair = ((Vec<f64>, Vec<f64>), (Vec<f64>, Vec<f64>));

/// Shared residual forward over a batch: the second operator is the forward
/// convolution with `k2` when present (the D form) and the adjoint of `k1`
/// otherwise (the S form).
#[allow(clippy::too_many_arguments)]
fn residual_forward(
    cur: Vec<Feature64>,
    k1: &crate::Filter64,
    k2: Option<&crate::Filter64>,
    b1: &[f64],
    b2: &[f64],
    bn1: &Option<crate::layer::BatchNormParams<f64>>,
    bn2: &Option<crate::network::BnFrozen>,
    pad: crate::conv::PaddingMode,
) -> Result<(Vec<Feature64>, Cache, Option<BnStatsPair>)> {
    let u_lin: Result<Vec<Feature64>> = cur
        .iter()
        .map(|x| {
            let mut u = conv2d(x, k1, 1, pad)?;
            u.add_channel_bias(b1);
            Ok(u)
        })
        .collect();
    let u_lin = u_lin?;
    let (act_in, bn1_cache, stats1) = match bn1 {
        Some(bn) => {
            let (out, cache, stats) = bn_forward_train(&u_lin, &bn.gamma, &bn.beta, bn.epsilon);
            (out, Some(cache), Some(stats))
        }
        None => (u_lin, None, None),
    };
    let v = relu_batch(&act_in);
    let z_lin: Result<Vec<Feature64>> = v
        .iter()
        .map(|vi| match k2 {
            Some(k2) => conv2d(vi, k2, 1, pad),
            None => adjoint_conv(vi, k1, pad),
        })
        .collect();
    let z_lin = z_lin?;
    let (z, bn2_cache, stats2) = match bn2 {
        Some(_) => {
            let d = z_lin[0].depth();
            let eps = bn1
                .as_ref()
                .map(|b| b.epsilon)
                .unwrap_or(crate::layer::BN_EPSILON);
            let (out, cache, stats) = bn_forward_train(&z_lin, &vec![1.0; d], &vec![0.0; d], eps);
            (out, Some(cache), Some(stats))
        }
        None => (z_lin, None, None),
    };
    let pre: Vec<Feature64> = cur
        .iter()
        .zip(&z)
        .map(|(x, zi)| {
            let mut p = x.clone();
            p.axpy(-1.0, zi);
            p.add_channel_bias(b2);
            p
        })
        .collect();
    let next = relu_batch(&pre);
    let stats = match (stats1, stats2) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };
    let cache = Cache::Residual {
        x: cur,
        act_in,
        bn1: bn1_cache,
        v,
        bn2: bn2_cache,
        pre,
    };
    Ok((next, cache, stats))
}

struct BatchForward {
    logits: Vec<Vec<f64>>,
    caches: Vec<Cache>,
    bn_stats: Vec<BnBatchStats>,
}

fn forward_batch(
    spec: &NetworkSpec,
    params: &ParamStore,
    images: &[Feature64],
) -> Result<BatchForward> {
    let pad = spec.padding;
    let mut cur: Vec<Feature64> = images.to_vec();
    let mut caches = Vec::with_capacity(params.layers.len());
    let mut bn_stats = Vec::new();
    let mut logits: Vec<Vec<f64>> = Vec::new();
    for (idx, lp) in params.layers.iter().enumerate() {
        match lp {
            LayerParams::Conv { filter, bias } => {
                let next: Result<Vec<Feature64>> = cur
                    .iter()
                    .map(|x| {
                        let mut y = conv2d(x, filter, 1, pad)?;
                        y.add_channel_bias(bias);
                        Ok(y)
                    })
                    .collect();
                caches.push(Cache::Conv { x: cur });
                cur = next.map_err(|e| e.at_layer(idx))?;
            }
            LayerParams::ResidualD {
                k1,
                k2,
                b1,
                b2,
                bn1,
                bn2,
            } => {
                // no nonnegativity check here: during training the
                // constraint is maintained by projection between steps, and
                // the objective itself is defined for any filter
                let (next, cache, stats) =
                    residual_forward(cur, k1, Some(k2), b1, b2, bn1, bn2, pad)
                        .map_err(|e| e.at_layer(idx))?;
                if let Some((s1, s2)) = stats {
                    bn_stats.push(BnBatchStats {
                        layer: idx,
                        stats1: s1,
                        stats2: s2,
                    });
                }
                caches.push(cache);
                cur = next;
            }
            LayerParams::ResidualS { k, b1, b2, bn1, bn2 } => {
                let (next, cache, stats) = residual_forward(cur, k, None, b1, b2, bn1, bn2, pad)
                    .map_err(|e| e.at_layer(idx))?;
                if let Some((s1, s2)) = stats {
                    bn_stats.push(BnBatchStats {
                        layer: idx,
                        stats1: s1,
                        stats2: s2,
                    });
                }
                caches.push(cache);
                cur = next;
            }
            LayerParams::Pool { filter, bias } => {
                let mut q_pre = Vec::with_capacity(cur.len());
                let mut pre = Vec::with_capacity(cur.len());
                let mut next = Vec::with_capacity(cur.len());
                for x in &cur {
                    let pooled = pad_channels(&pool2(x), 2 * x.depth())
                        .map_err(|e| e.at_layer(idx))?;
                    let mut q = conv2d(x, filter, 2, pad).map_err(|e| e.at_layer(idx))?;
                    q.add_channel_bias(bias);
                    let mut p = pooled;
                    p.axpy(-1.0, &crate::layer::relu(&q));
                    next.push(crate::layer::relu(&p));
                    q_pre.push(q);
                    pre.push(p);
                }
                caches.push(Cache::Pool {
                    x: cur,
                    q_pre,
                    pre,
                });
                cur = next;
            }
            LayerParams::GlobalPool => {
                let next: Vec<Feature64> = cur
                    .iter()
                    .map(|x| {
                        Feature64::from_vector(pool_global(&crate::layer::relu(x)))
                            .expect("channel count is positive")
                    })
                    .collect();
                caches.push(Cache::Global { x: cur });
                cur = next;
            }
            LayerParams::Dense { weight, bias } => {
                let xs: Vec<Vec<f64>> = cur.iter().map(|x| x.as_slice().to_vec()).collect();
                logits = xs
                    .iter()
                    .map(|x| layer_dense(x, weight, bias))
                    .collect::<Result<_>>()
                    .map_err(|e| e.at_layer(idx))?;
                caches.push(Cache::Dense { x: xs });
                cur = Vec::new();
            }
        }
    }
    Ok(BatchForward {
        logits,
        caches,
        bn_stats,
    })
}

// ---------------------------------------------------------------------------
// Regularizers
// ---------------------------------------------------------------------------

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Penalty value: for the D variant, entrywise-l1 on the first convolution
/// and the dense weight, half squared Euclidean on residual and pooling
/// filters (the nonnegativity constraint is handled by projection, not a
/// penalty term); for the S variant, half squared Euclidean everywhere.
pub fn regularizer(spec: &NetworkSpec, params: &ParamStore, alpha: f64) -> f64 {
    let mut total = 0.0;
    for lp in &params.layers {
        total += match (spec.variant, lp) {
            (Variant::ResNetD, LayerParams::Conv { filter, .. }) => alpha * l1(filter.as_slice()),
            (Variant::ResNetD, LayerParams::Dense { weight, .. }) => {
                alpha * weight.iter().map(|v| v.abs()).sum::<f64>()
            }
            (Variant::ResNetS, LayerParams::Conv { filter, .. }) => {
                0.5 * alpha * sq(filter.as_slice())
            }
            (Variant::ResNetS, LayerParams::Dense { weight, .. }) => {
                0.5 * alpha * weight.iter().map(|v| v * v).sum::<f64>()
            }
            (_, LayerParams::ResidualD { k1, k2, .. }) => {
                0.5 * alpha * (sq(k1.as_slice()) + sq(k2.as_slice()))
            }
            (_, LayerParams::ResidualS { k, .. }) => 0.5 * alpha * sq(k.as_slice()),
            (_, LayerParams::Pool { filter, .. }) => 0.5 * alpha * sq(filter.as_slice()),
            _ => 0.0,
        };
    }
    total
}

/// Subgradient of [`regularizer`] (the l1 subgradient at 0 is taken as 0),
/// accumulated into `grads`.
fn add_regularizer_grads(spec: &NetworkSpec, params: &ParamStore, alpha: f64, grads: &mut ParamStore) {
    for (lp, gp) in params.layers.iter().zip(&mut grads.layers) {
        match (spec.variant, lp, gp) {
            (
                Variant::ResNetD,
                LayerParams::Conv { filter, .. },
                LayerParams::Conv { filter: gf, .. },
            ) => {
                for (g, v) in gf.as_mut_slice().iter_mut().zip(filter.as_slice()) {
                    *g += alpha * v.signum() * f64::from(*v != 0.0);
                }
            }
            (
                Variant::ResNetS,
                LayerParams::Conv { filter, .. },
                LayerParams::Conv { filter: gf, .. },
            ) => {
                for (g, v) in gf.as_mut_slice().iter_mut().zip(filter.as_slice()) {
                    *g += alpha * v;
                }
            }
            (
                Variant::ResNetD,
                LayerParams::Dense { weight, .. },
                LayerParams::Dense { weight: gw, .. },
            ) => {
                for (g, v) in gw.iter_mut().zip(weight.iter()) {
                    *g += alpha * v.signum() * f64::from(*v != 0.0);
                }
            }
            (
                Variant::ResNetS,
                LayerParams::Dense { weight, .. },
                LayerParams::Dense { weight: gw, .. },
            ) => {
                for (g, v) in gw.iter_mut().zip(weight.iter()) {
                    *g += alpha * v;
                }
            }
            (
                _,
                LayerParams::ResidualD { k1, k2, .. },
                LayerParams::ResidualD {
                    k1: g1, k2: g2, ..
                },
            ) => {
                for (g, v) in g1.as_mut_slice().iter_mut().zip(k1.as_slice()) {
                    *g += alpha * v;
                }
                for (g, v) in g2.as_mut_slice().iter_mut().zip(k2.as_slice()) {
                    *g += alpha * v;
                }
            }
            (_, LayerParams::ResidualS { k, .. }, LayerParams::ResidualS { k: gk, .. }) => {
                for (g, v) in gk.as_mut_slice().iter_mut().zip(k.as_slice()) {
                    *g += alpha * v;
                }
            }
            (_, LayerParams::Pool { filter, .. }, LayerParams::Pool { filter: gf, .. }) => {
                for (g, v) in gf.as_mut_slice().iter_mut().zip(filter.as_slice()) {
                    *g += alpha * v;
                }
            }
            _ => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

/// Objective value on a batch (data term plus regularizers), using batch
/// statistics when normalization is enabled.
pub fn loss_value(
    spec: &NetworkSpec,
    params: &ParamStore,
    images: &[Feature64],
    labels: &[Vec<f64>],
    alpha: f64,
) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Shape("batch images and labels must pair up".into()));
    }
    let fwd = forward_batch(spec, params, images)?;
    let data: f64 = fwd
        .logits
        .iter()
        .zip(labels)
        .map(|(u, y)| cross_entropy(y, &softmax(u)))
        .sum();
    Ok(data + regularizer(spec, params, alpha))
}

/// One training evaluation: loss, gradients, and the batch statistics used
/// by any normalization layers.
pub struct LossGrad {
    pub loss: f64,
    pub grads: ParamStore,
    pub bn_stats: Vec<BnBatchStats>,
}

/// Objective value and reverse-mode gradients for every trainable parameter.
pub fn loss_total(
    spec: &NetworkSpec,
    params: &ParamStore,
    images: &[Feature64],
    labels: &[Vec<f64>],
    alpha: f64,
) -> Result<LossGrad> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Shape("batch images and labels must pair up".into()));
    }
    params.validate(spec)?;
    let fwd = forward_batch(spec, params, images)?;
    let mut loss = 0.0;
    // gradient of the data term in the logits: softmax minus target
    let mut grad_out: Vec<Vec<f64>> = Vec::with_capacity(images.len());
    for (u, y) in fwd.logits.iter().zip(labels) {
        let p = softmax(u);
        loss += cross_entropy(y, &p);
        grad_out.push(p.iter().zip(y).map(|(pi, yi)| pi - yi).collect());
    }
    loss += regularizer(spec, params, alpha);

    // zero-shaped accumulator; the zeros() constructor seeds normalization
    // scale at 1, which must not leak into the gradient
    let mut grads = ParamStore::zeros(spec);
    for lp in &mut grads.layers {
        if let LayerParams::ResidualD { bn1: Some(bn), .. }
        | LayerParams::ResidualS { bn1: Some(bn), .. } = lp
        {
            bn.gamma.iter_mut().for_each(|g| *g = 0.0);
        }
    }
    let pad = spec.padding;

    // walk the layers backwards; `gvec` carries vector gradients across the
    // dense/global boundary, `gfeat` feature gradients below it
    let mut gvec: Vec<Vec<f64>> = grad_out;
    let mut gfeat: Vec<Feature64> = Vec::new();
    for (idx, (lp, cache)) in params.layers.iter().zip(&fwd.caches).enumerate().rev() {
        match (lp, cache, &mut grads.layers[idx]) {
            (
                LayerParams::Dense { weight, .. },
                Cache::Dense { x },
                LayerParams::Dense {
                    weight: gw,
                    bias: gb,
                },
            ) => {
                let mut gx_all = Vec::with_capacity(x.len());
                for (xi, gi) in x.iter().zip(&gvec) {
                    for r in 0..weight.nrows() {
                        gb[r] += gi[r];
                        for c in 0..weight.ncols() {
                            gw[(r, c)] += gi[r] * xi[c];
                        }
                    }
                    let mut gx = vec![0.0; weight.ncols()];
                    for c in 0..weight.ncols() {
                        let mut acc = 0.0;
                        for r in 0..weight.nrows() {
                            acc += weight[(r, c)] * gi[r];
                        }
                        gx[c] = acc;
                    }
                    gx_all.push(gx);
                }
                gvec = gx_all;
            }
            (LayerParams::GlobalPool, Cache::Global { x }, LayerParams::GlobalPool) => {
                gfeat = x
                    .iter()
                    .zip(&gvec)
                    .map(|(xi, gi)| {
                        let spread = pool_global_transpose(gi, xi.height(), xi.width());
                        mask_by(&spread, xi, |p| p > 0.0)
                    })
                    .collect();
                gvec = Vec::new();
            }
            (
                LayerParams::Pool { filter, .. },
                Cache::Pool { x, q_pre, pre },
                LayerParams::Pool {
                    filter: gf,
                    bias: gb,
                },
            ) => {
                let mut gx_all = Vec::with_capacity(x.len());
                for ((xi, qi), (prei, gi)) in
                    x.iter().zip(q_pre).zip(pre.iter().zip(&gfeat))
                {
                    let g_pre = mask_by(gi, prei, |p| p > 0.0);
                    // pooled path
                    let g_p = crop_channels(&g_pre, xi.depth())?;
                    let mut gx = pool2_transpose(&g_p, xi.height(), xi.width());
                    // convolution path (entered with a minus sign)
                    let mut g_q = mask_by(&g_pre, qi, |p| p > 0.0);
                    g_q.scale(-1.0);
                    channel_sums_into(&g_q, gb);
                    let fg = conv_filter_grad(xi, &g_q, KERNEL_SIZE, 2, pad)?;
                    for (a, b) in gf.as_mut_slice().iter_mut().zip(fg.as_slice()) {
                        *a += b;
                    }
                    gx.axpy(
                        1.0,
                        &conv_transpose(&g_q, filter, xi.height(), xi.width(), 2, pad)?,
                    );
                    gx_all.push(gx);
                }
                gfeat = gx_all;
            }
            (
                LayerParams::ResidualD { k1, k2, bn1, .. },
                Cache::Residual {
                    x,
                    act_in,
                    bn1: bn1_cache,
                    v,
                    bn2: bn2_cache,
                    pre,
                },
                LayerParams::ResidualD {
                    k1: gk1,
                    k2: gk2,
                    b1: gb1,
                    b2: gb2,
                    bn1: gbn1,
                    ..
                },
            ) => {
                let g_pre: Vec<Feature64> = pre
                    .iter()
                    .zip(&gfeat)
                    .map(|(p, g)| mask_by(g, p, |v| v > 0.0))
                    .collect();
                for g in &g_pre {
                    channel_sums_into(g, gb2);
                }
                let g_z: Vec<Feature64> = g_pre
                    .iter()
                    .map(|g| {
                        let mut n = g.clone();
                        n.scale(-1.0);
                        n
                    })
                    .collect();
                let g_zlin = match bn2_cache {
                    Some(cache) => {
                        let ones = vec![1.0; g_z[0].depth()];
                        bn_backward(cache, &ones, &g_z).0
                    }
                    None => g_z,
                };
                let mut g_v = Vec::with_capacity(x.len());
                for (vi, gz) in v.iter().zip(&g_zlin) {
                    let fg = conv_filter_grad(vi, gz, KERNEL_SIZE, 1, pad)?;
                    for (a, b) in gk2.as_mut_slice().iter_mut().zip(fg.as_slice()) {
                        *a += b;
                    }
                    g_v.push(adjoint_conv(gz, k2, pad)?);
                }
                let g_actin: Vec<Feature64> = g_v
                    .iter()
                    .zip(act_in)
                    .map(|(g, a)| mask_by(g, a, |p| p > 0.0))
                    .collect();
                let g_ulin = match (bn1_cache, bn1) {
                    (Some(cache), Some(bn)) => {
                        let (gin, ggamma, gbeta) = bn_backward(cache, &bn.gamma, &g_actin);
                        if let Some(gbn) = gbn1 {
                            for (a, b) in gbn.gamma.iter_mut().zip(&ggamma) {
                                *a += b;
                            }
                            for (a, b) in gbn.beta.iter_mut().zip(&gbeta) {
                                *a += b;
                            }
                        }
                        gin
                    }
                    _ => g_actin,
                };
                let mut gx_all: Vec<Feature64> = g_pre;
                for ((xi, gu), gx) in x.iter().zip(&g_ulin).zip(&mut gx_all) {
                    channel_sums_into(gu, gb1);
                    let fg = conv_filter_grad(xi, gu, KERNEL_SIZE, 1, pad)?;
                    for (a, b) in gk1.as_mut_slice().iter_mut().zip(fg.as_slice()) {
                        *a += b;
                    }
                    gx.axpy(1.0, &adjoint_conv(gu, k1, pad)?);
                }
                gfeat = gx_all;
            }
            (
                LayerParams::ResidualS { k, bn1, .. },
                Cache::Residual {
                    x,
                    act_in,
                    bn1: bn1_cache,
                    v,
                    bn2: bn2_cache,
                    pre,
                },
                LayerParams::ResidualS {
                    k: gk,
                    b1: gb1,
                    b2: gb2,
                    bn1: gbn1,
                    ..
                },
            ) => {
                let g_pre: Vec<Feature64> = pre
                    .iter()
                    .zip(&gfeat)
                    .map(|(p, g)| mask_by(g, p, |v| v > 0.0))
                    .collect();
                for g in &g_pre {
                    channel_sums_into(g, gb2);
                }
                let g_z: Vec<Feature64> = g_pre
                    .iter()
                    .map(|g| {
                        let mut n = g.clone();
                        n.scale(-1.0);
                        n
                    })
                    .collect();
                let g_zlin = match bn2_cache {
                    Some(cache) => {
                        let ones = vec![1.0; g_z[0].depth()];
                        bn_backward(cache, &ones, &g_z).0
                    }
                    None => g_z,
                };
                // the adjoint application contributes to both the filter
                // gradient (with input/cotangent roles swapped) and the
                // activation gradient
                let mut g_v = Vec::with_capacity(x.len());
                for (vi, gz) in v.iter().zip(&g_zlin) {
                    let fg = conv_filter_grad(gz, vi, KERNEL_SIZE, 1, pad)?;
                    for (a, b) in gk.as_mut_slice().iter_mut().zip(fg.as_slice()) {
                        *a += b;
                    }
                    g_v.push(conv2d(gz, k, 1, pad)?);
                }
                let g_actin: Vec<Feature64> = g_v
                    .iter()
                    .zip(act_in)
                    .map(|(g, a)| mask_by(g, a, |p| p > 0.0))
                    .collect();
                let g_ulin = match (bn1_cache, bn1) {
                    (Some(cache), Some(bn)) => {
                        let (gin, ggamma, gbeta) = bn_backward(cache, &bn.gamma, &g_actin);
                        if let Some(gbn) = gbn1 {
                            for (a, b) in gbn.gamma.iter_mut().zip(&ggamma) {
                                *a += b;
                            }
                            for (a, b) in gbn.beta.iter_mut().zip(&gbeta) {
                                *a += b;
                            }
                        }
                        gin
                    }
                    _ => g_actin,
                };
                let mut gx_all: Vec<Feature64> = g_pre;
                for ((xi, gu), gx) in x.iter().zip(&g_ulin).zip(&mut gx_all) {
                    channel_sums_into(gu, gb1);
                    let fg = conv_filter_grad(xi, gu, KERNEL_SIZE, 1, pad)?;
                    for (a, b) in gk.as_mut_slice().iter_mut().zip(fg.as_slice()) {
                        *a += b;
                    }
                    gx.axpy(1.0, &adjoint_conv(gu, k, pad)?);
                }
                gfeat = gx_all;
            }
            (
                LayerParams::Conv { filter, .. },
                Cache::Conv { x },
                LayerParams::Conv {
                    filter: gf,
                    bias: gb,
                },
            ) => {
                let mut gx_all = Vec::with_capacity(x.len());
                for (xi, gi) in x.iter().zip(&gfeat) {
                    channel_sums_into(gi, gb);
                    let fg = conv_filter_grad(xi, gi, KERNEL_SIZE, 1, pad)?;
                    for (a, b) in gf.as_mut_slice().iter_mut().zip(fg.as_slice()) {
                        *a += b;
                    }
                    gx_all.push(conv_transpose(gi, filter, xi.height(), xi.width(), 1, pad)?);
                }
                gfeat = gx_all;
            }
            _ => unreachable!("cache and parameters walk the same schedule"),
        }
    }

    add_regularizer_grads(spec, params, alpha, &mut grads);
    Ok(LossGrad {
        loss,
        grads,
        bn_stats: fwd.bn_stats,
    })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// One history row.
#[derive(Debug, Clone)]
pub struct HistoryRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub test_accuracy: f64,
    pub growth_c: f64,
    pub sensitivity_a: f64,
}

/// Loss, accuracy, and certificate constants over the course of training.
#[derive(Debug, Clone, Default)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

/// Write history as delimited text.
pub fn write_history<W: Write>(w: &mut W, history: &History) -> Result<()> {
    writeln!(w, "step\tlr\tloss\ttest_accuracy\tgrowth_c\tsensitivity_a")?;
    for r in &history.records {
        writeln!(
            w,
            "{}\t{:.6e}\t{:.10e}\t{:.6}\t{:.10e}\t{:.10e}",
            r.step, r.lr, r.loss, r.test_accuracy, r.growth_c, r.sensitivity_a
        )?;
    }
    Ok(())
}

/// Trained parameters plus history; `diverged` carries the aborting step
/// when the loss stopped being finite.
pub struct TrainResult {
    pub params: ParamStore,
    pub history: History,
    pub diverged: Option<usize>,
}

/// Fraction of test examples whose argmax prediction matches the label.
pub fn accuracy(spec: &NetworkSpec, params: &ParamStore, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Shape("empty dataset".into()));
    }
    let mut hits = 0usize;
    for (i, img) in ds.images.iter().enumerate() {
        if predict(spec, params, img)? == ds.label_index(i) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// Clamp the second residual filters to be elementwise nonnegative.
pub fn project_nonneg(params: &mut ParamStore) {
    for lp in &mut params.layers {
        if let LayerParams::ResidualD { k2, .. } = lp {
            for v in k2.as_mut_slice() {
                *v = v.max(0.0);
            }
        }
    }
}

/// Rescale every residual filter so its operator norm is at most sqrt(2).
pub fn project_spectral(spec: &NetworkSpec, params: &mut ParamStore) -> Result<()> {
    let opts = PowerOpts::default();
    let target = std::f64::consts::SQRT_2;
    for idx in 0..params.layers.len() {
        if let LayerKind::Residual { scale } = spec.layer_kind(idx) {
            let (h, w, _) = spec.scale_dims(scale);
            match &mut params.layers[idx] {
                LayerParams::ResidualS { k, .. } => {
                    *k = rescale_filter_l2(k, h, w, 1, spec.padding, target, opts)?.0;
                }
                LayerParams::ResidualD { k1, k2, .. } => {
                    *k1 = rescale_filter_l2(k1, h, w, 1, spec.padding, target, opts)?.0;
                    *k2 = rescale_filter_l2(k2, h, w, 1, spec.padding, target, opts)?.0;
                }
                _ => {}
            }
        }
    }
    Ok(())
}

fn update_bn_stats(params: &mut ParamStore, stats: &[BnBatchStats]) {
    // stored statistics track the batch statistics with a fixed momentum;
    // this feeds evaluation mode and is outside the bare layer equations
    const MOMENTUM: f64 = 0.1;
    for s in stats {
        match &mut params.layers[s.layer] {
            LayerParams::ResidualD { bn1, bn2, .. } | LayerParams::ResidualS { bn1, bn2, .. } => {
                if let Some(bn) = bn1 {
                    for (dst, src) in bn.mu.iter_mut().zip(&s.stats1.0) {
                        *dst = (1.0 - MOMENTUM) * *dst + MOMENTUM * src;
                    }
                    for (dst, src) in bn.sigma.iter_mut().zip(&s.stats1.1) {
                        *dst = (1.0 - MOMENTUM) * *dst + MOMENTUM * src;
                    }
                }
                if let Some(bn) = bn2 {
                    for (dst, src) in bn.mu.iter_mut().zip(&s.stats2.0) {
                        *dst = (1.0 - MOMENTUM) * *dst + MOMENTUM * src;
                    }
                    for (dst, src) in bn.sigma.iter_mut().zip(&s.stats2.1) {
                        *dst = (1.0 - MOMENTUM) * *dst + MOMENTUM * src;
                    }
                }
            }
            _ => {}
        }
    }
}

/// Mini-batch gradient descent with step decay: the rate starts at
/// `learning_rate` and is divided by 10 after every `decay_steps` steps,
/// stopping after `total_steps`. After each step the configured projections
/// are applied. History records loss, test accuracy, and the certificate
/// constants at every evaluation interval.
pub fn train(spec: &NetworkSpec, config: &TrainConfig, data: &SplitDataset) -> Result<TrainResult> {
    spec.validate()?;
    config.validate()?;
    data.train.validate()?;
    data.test.validate()?;

    let mut params = init_params(spec, InitScheme::Default, config.seed);
    let mut history = History::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let n = data.train.len();
    let batch = config.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let record = |step: usize,
                      lr: f64,
                      loss: f64,
                      params: &ParamStore,
                      history: &mut History|
     -> Result<()> {
        let test_accuracy = accuracy(spec, params, &data.test)?;
        let cert = assemble_certificate(spec, params, PowerOpts::default())?;
        history.records.push(HistoryRecord {
            step,
            lr,
            loss,
            test_accuracy,
            growth_c: cert.growth_c,
            sensitivity_a: cert.sensitivity_a,
        });
        Ok(())
    };

    for step in 0..config.total_steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idxs = &order[cursor..cursor + batch];
        cursor += batch;
        let images: Vec<Feature64> = idxs.iter().map(|i| data.train.images[*i].clone()).collect();
        let labels: Vec<Vec<f64>> = idxs.iter().map(|i| data.train.labels[*i].clone()).collect();

        let lr = config.learning_rate * 0.1f64.powi((step / config.decay_steps) as i32);
        let out = loss_total(spec, &params, &images, &labels, config.alpha)?;
        if !out.loss.is_finite() {
            return Ok(TrainResult {
                params,
                history,
                diverged: Some(step),
            });
        }

        let mut flat = params.trainable();
        let gflat = out.grads.trainable();
        for (p, g) in flat.iter_mut().zip(&gflat) {
            *p -= lr * g;
        }
        params.set_trainable(&flat)?;
        update_bn_stats(&mut params, &out.bn_stats);
        if config.project_nonneg {
            project_nonneg(&mut params);
        }
        if config.spectral_rescale {
            project_spectral(spec, &mut params)?;
        }

        if (step + 1) % config.eval_interval == 0 || step + 1 == config.total_steps {
            record(step + 1, lr, out.loss, &params, &mut history)?;
        }
    }
    Ok(TrainResult {
        params,
        history,
        diverged: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::PaddingMode;
    use crate::data::SyntheticSpec;
    use approx::assert_relative_eq;

    #[test]
    fn bn_pair_matches_finite_differences() {
        use crate::tensor::Feature;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<Feature64> = (0..3)
            .map(|_| Feature::from_fn(2, 2, 2, |_, _, _| rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        let gamma = vec![1.3, 0.7];
        let beta = vec![0.2, -0.1];
        let eps = 1e-5;
        let weights: Vec<Feature64> = (0..3)
            .map(|_| Feature::from_fn(2, 2, 2, |_, _, _| rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        let value = |g: &[f64], b: &[f64], xs: &[Feature64]| -> f64 {
            let (out, _, _) = bn_forward_train(xs, g, b, eps);
            out.iter()
                .zip(&weights)
                .map(|(o, w)| crate::tensor::dot(o.as_slice(), w.as_slice()))
                .sum()
        };
        let (_, cache, _) = bn_forward_train(&batch, &gamma, &beta, eps);
        let (gin, ggamma, gbeta) = bn_backward(&cache, &gamma, &weights);
        let h = 1e-6;
        for k in 0..2 {
            let mut gp = gamma.clone();
            gp[k] += h;
            let mut gm = gamma.clone();
            gm[k] -= h;
            let fd = (value(&gp, &beta, &batch) - value(&gm, &beta, &batch)) / (2.0 * h);
            assert!(
                (ggamma[k] - fd).abs() < 1e-6,
                "gamma {k}: {} vs {fd}",
                ggamma[k]
            );
            let mut bp = beta.clone();
            bp[k] += h;
            let mut bm = beta.clone();
            bm[k] -= h;
            let fd = (value(&gamma, &bp, &batch) - value(&gamma, &bm, &batch)) / (2.0 * h);
            assert!((gbeta[k] - fd).abs() < 1e-6, "beta {k}");
        }
        for bi in 0..3usize {
            for idx in 0..8usize {
                let mut bp = batch.clone();
                bp[bi].as_mut_slice()[idx] += h;
                let mut bm = batch.clone();
                bm[bi].as_mut_slice()[idx] -= h;
                let fd = (value(&gamma, &beta, &bp) - value(&gamma, &beta, &bm)) / (2.0 * h);
                let an = gin[bi].as_slice()[idx];
                assert!((an - fd).abs() < 1e-5, "input {bi}/{idx}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let a = softmax(&[0.3, -1.2, 2.0]);
        let b = softmax(&[0.3 + 7.0, -1.2 + 7.0, 2.0 + 7.0]);
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
        assert_relative_eq!(a.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let p = softmax(&[1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()]);
        assert_relative_eq!(p[0], 1.0 / 6.0, max_relative = 1e-12);
        assert_relative_eq!(p[1], 2.0 / 6.0, max_relative = 1e-12);
        assert_relative_eq!(p[2], 3.0 / 6.0, max_relative = 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        assert_relative_eq!(
            cross_entropy(&[1.0, 0.0], &[0.5, 0.5]),
            std::f64::consts::LN_2,
            max_relative = 1e-12
        );
        let want = -0.5 * (0.25f64.ln() + 0.75f64.ln());
        assert_relative_eq!(
            cross_entropy(&[0.5, 0.5], &[0.25, 0.75]),
            want,
            max_relative = 1e-12
        );
        // clamped: finite under a confidently wrong prediction
        assert!(cross_entropy(&[1.0, 0.0], &[0.0, 1.0]).is_finite());
    }

    fn small_spec(variant: Variant, pad: PaddingMode, bn: bool) -> NetworkSpec {
        NetworkSpec {
            variant,
            m: 1,
            height: 4,
            width: 4,
            depth: 1,
            d1: 2,
            classes: 2,
            use_batchnorm: bn,
            padding: pad,
        }
    }

    fn small_batch(spec: &NetworkSpec, seed: u64, count: usize) -> (Vec<Feature64>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<Feature64> = (0..count)
            .map(|_| {
                Feature64::from_fn(spec.height, spec.width, spec.depth, |_, _, _| {
                    rng.random::<f64>()
                })
            })
            .collect();
        let labels: Vec<Vec<f64>> = (0..count)
            .map(|i| {
                let mut l = vec![0.0; spec.classes];
                l[i % spec.classes] = 1.0;
                l
            })
            .collect();
        (images, labels)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for variant in [Variant::ResNetD, Variant::ResNetS] {
            for pad in [PaddingMode::Periodic, PaddingMode::Zero] {
                for bn in [false, true] {
                    let spec = small_spec(variant, pad, bn);
                    let mut params = init_params(&spec, InitScheme::Default, 3);
                    // move biases off zero so no unit sits on a kink
                    let mut flat = params.trainable();
                    let mut rng = ChaCha8Rng::seed_from_u64(9);
                    for v in flat.iter_mut() {
                        if *v == 0.0 {
                            *v = 0.05 * (rng.random::<f64>() - 0.5);
                        }
                    }
                    params.set_trainable(&flat).unwrap();
                    if variant == Variant::ResNetD {
                        project_nonneg(&mut params);
                    }
                    let (images, labels) = small_batch(&spec, 11, 3);
                    let alpha = 1e-3;
                    let analytic = loss_total(&spec, &params, &images, &labels, alpha)
                        .unwrap()
                        .grads
                        .trainable();
                    let numeric = crate::oracle::finite_diff_gradients(
                        &spec, &params, &images, &labels, alpha, 1e-5,
                    )
                    .unwrap();
                    let mut worst = 0.0f64;
                    let mut worst_idx = 0;
                    for (i, (a, g)) in analytic.iter().zip(&numeric).enumerate() {
                        let rel = (a - g).abs() / a.abs().max(g.abs()).max(1.0);
                        if rel > worst {
                            worst = rel;
                            worst_idx = i;
                        }
                    }
                    assert!(
                        worst <= 1e-4,
                        "variant {variant:?} pad {pad:?} bn {bn}: worst relative error {worst} \
                         at coordinate {worst_idx} (analytic {}, numeric {})",
                        analytic[worst_idx],
                        numeric[worst_idx]
                    );
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let spec = small_spec(Variant::ResNetS, PaddingMode::Periodic, false);
        let data = SyntheticSpec {
            classes: 2,
            height: 4,
            width: 4,
            depth: 1,
            train_per_class: 8,
            test_per_class: 4,
            noise: 0.2,
            seed: 1,
        }
        .generate()
        .unwrap();
        let config = TrainConfig {
            batch_size: 4,
            learning_rate: 0.0,
            decay_steps: 10,
            total_steps: 10,
            alpha: 1e-4,
            eval_interval: 10,
            seed: 5,
            ..TrainConfig::default()
        };
        let before = init_params(&spec, InitScheme::Default, config.seed);
        let result = train(&spec, &config, &data).unwrap();
        assert_eq!(result.params.trainable(), before.trainable());
    }

    #[test]
    fn init_is_deterministic_and_respects_bounds() {
        let spec = small_spec(Variant::ResNetD, PaddingMode::Periodic, false);
        let a = init_params(&spec, InitScheme::Default, 7);
        let b = init_params(&spec, InitScheme::Default, 7);
        assert_eq!(a, b);
        // dense entries stay within two standard deviations
        let sigma = 1.0 / (spec.d3() * spec.classes) as f64;
        if let LayerParams::Dense { weight, .. } = a.layers.last().unwrap() {
            assert!(weight.iter().all(|v| v.abs() <= 2.0 * sigma));
        } else {
            panic!("expected dense layer");
        }
        // second residual filters are valid for the D form
        if let LayerParams::ResidualD { k2, .. } = &a.layers[1] {
            assert!(k2.min_entry() >= 0.0);
        } else {
            panic!("expected residual layer");
        }
    }

    #[test]
    fn variance_scaling_hits_its_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let fan_in = 18;
        let samples: Vec<f64> = (0..10_000)
            .map(|_| sample_variance_scaling(&mut rng, fan_in))
            .collect();
        let var = samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64;
        let target = 2.0 / fan_in as f64;
        assert!((var - target).abs() <= 0.2 * target, "var {var} vs {target}");
    }

    #[test]
    fn projection_is_idempotent() {
        let spec = small_spec(Variant::ResNetD, PaddingMode::Periodic, false);
        let mut params = init_params(&spec, InitScheme::VarianceScaling, 17);
        project_nonneg(&mut params);
        let once = params.clone();
        project_nonneg(&mut params);
        assert_eq!(params, once);
    }

    #[test]
    fn regularizer_decreases_toward_zero() {
        for variant in [Variant::ResNetD, Variant::ResNetS] {
            let spec = small_spec(variant, PaddingMode::Periodic, false);
            let params = init_params(&spec, InitScheme::Default, 19);
            let full = regularizer(&spec, &params, 1e-2);
            let mut shrunk = params.clone();
            let flat: Vec<f64> = shrunk.trainable().iter().map(|v| 0.5 * v).collect();
            shrunk.set_trainable(&flat).unwrap();
            assert!(regularizer(&spec, &shrunk, 1e-2) < full);
            assert_eq!(regularizer(&spec, &ParamStore::zeros(&spec), 1e-2), 0.0);
        }
    }

    #[test]
    fn short_training_run_reduces_loss_deterministically() {
        let spec = NetworkSpec {
            variant: Variant::ResNetS,
            m: 1,
            height: 8,
            width: 8,
            depth: 1,
            d1: 2,
            classes: 2,
            use_batchnorm: false,
            padding: PaddingMode::Periodic,
        };
        let data = SyntheticSpec {
            classes: 2,
            height: 8,
            width: 8,
            depth: 1,
            train_per_class: 32,
            test_per_class: 16,
            noise: 0.2,
            seed: 23,
        }
        .generate()
        .unwrap();
        let config = TrainConfig {
            batch_size: 16,
            learning_rate: 0.05,
            decay_steps: 80,
            total_steps: 100,
            alpha: 1e-4,
            eval_interval: 20,
            seed: 29,
            ..TrainConfig::default()
        };
        let r1 = train(&spec, &config, &data).unwrap();
        let r2 = train(&spec, &config, &data).unwrap();
        assert!(r1.diverged.is_none());
        let losses1: Vec<u64> = r1.history.records.iter().map(|r| r.loss.to_bits()).collect();
        let losses2: Vec<u64> = r2.history.records.iter().map(|r| r.loss.to_bits()).collect();
        assert_eq!(losses1, losses2);
        let first = r1.history.records.first().unwrap().loss;
        let last = r1.history.records.last().unwrap().loss;
        assert!(last < first, "loss went from {first} to {last}");
    }

    #[test]
    fn spectral_projection_caps_residual_norms() {
        let spec = small_spec(Variant::ResNetS, PaddingMode::Periodic, false);
        let mut params = init_params(&spec, InitScheme::Default, 31);
        if let LayerParams::ResidualS { k, .. } = &mut params.layers[1] {
            k.scale(20.0);
        }
        project_spectral(&spec, &mut params).unwrap();
        if let LayerParams::ResidualS { k, .. } = &params.layers[1] {
            let (norm, _) = crate::cert::opnorm_l2(
                k,
                spec.height,
                spec.width,
                1,
                spec.padding,
                PowerOpts::default(),
            )
            .unwrap();
            assert!(norm <= std::f64::consts::SQRT_2 * (1.0 + 1e-9));
        }
    }
}
