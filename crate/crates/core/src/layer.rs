//! Nonlinearities and structural operators: ReLU, batch normalization (with
//! affine folding), channel zero-padding, 2D average pooling, and global
//! average pooling.

use crate::conv::{conv_channel, PaddingMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Feature, Filter, Plane};

/// Elementwise `max(x, 0)` on a slice.
pub fn relu_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|v| v.max(T::zero())).collect()
}

/// Elementwise `max(x, 0)` on a feature. This is the projection onto the
/// nonnegative orthant (equivalently the proximal map of its indicator, for
/// any step size), and is non-expansive and 1-Lipschitz in every entrywise
/// p-norm.
pub fn relu<T: Scalar>(x: &Feature<T>) -> Feature<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu_in_place<T: Scalar>(x: &mut Feature<T>) {
    for v in x.as_mut_slice() {
        *v = v.max(T::zero());
    }
}

/// Per-channel batch normalization parameters.
///
/// `sigma` is the guarded standard deviation actually divided by, i.e.
/// `sqrt(var + epsilon)`; the epsilon guard (default 1e-5) keeps zero-variance
/// batches finite and is a numerical addition on top of the plain
/// mean/variance normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
    pub epsilon: T,
}

/// Default variance guard.
pub const BN_EPSILON: f64 = 1e-5;

impl<T: Scalar> BatchNormParams<T> {
    /// Fresh parameters for `d` channels: scale 1, shift 0, unit statistics.
    pub fn identity(d: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); d],
            beta: vec![T::zero(); d],
            mu: vec![T::zero(); d],
            sigma: vec![T::one(); d],
            epsilon: T::from_f64(BN_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.gamma.len();
        if self.beta.len() != d || self.mu.len() != d || self.sigma.len() != d {
            return Err(Error::Shape(
                "batch-norm parameter vectors must share one length".into(),
            ));
        }
        if self.epsilon <= T::zero() {
            return Err(Error::Config("batch-norm epsilon must be positive".into()));
        }
        if self.sigma.iter().any(|s| *s < self.epsilon) {
            return Err(Error::Config(
                "batch-norm sigma must be at least epsilon".into(),
            ));
        }
        Ok(())
    }

    /// Apply with the stored statistics: `gamma * (x - mu) / sigma + beta`
    /// per channel.
    pub fn apply_eval(&self, x: &Feature<T>) -> Feature<T> {
        debug_assert_eq!(x.depth(), self.channels());
        let mut out = x.clone();
        for k in 0..x.depth() {
            let (g, b, m, s) = (self.gamma[k], self.beta[k], self.mu[k], self.sigma[k]);
            for v in out.channel_data_mut(k) {
                *v = g * (*v - m) / s + b;
            }
        }
        out
    }

    /// Fold the normalization into a preceding convolution-plus-bias, giving
    /// the effective filter `gamma/sigma * K` (per output channel) and bias
    /// `gamma * (b - mu) / sigma + beta` so that applying the folded affine
    /// map reproduces `apply_eval(conv(x) + b)`.
    pub fn fold_conv(&self, filter: &Filter<T>, bias: &[T]) -> (Filter<T>, Vec<T>) {
        debug_assert_eq!(filter.d_out(), self.channels());
        debug_assert_eq!(bias.len(), self.channels());
        let scales: Vec<T> = self
            .gamma
            .iter()
            .zip(&self.sigma)
            .map(|(g, s)| *g / *s)
            .collect();
        let folded_filter = filter.scale_out_channels(&scales);
        let folded_bias: Vec<T> = (0..self.channels())
            .map(|k| self.gamma[k] * (bias[k] - self.mu[k]) / self.sigma[k] + self.beta[k])
            .collect();
        (folded_filter, folded_bias)
    }
}

/// Statistics actually used by one batch-norm application.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

/// Which statistics batch normalization draws on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics computed from the batch itself (per channel, over batch and
    /// spatial positions).
    Train,
    /// Stored statistics from `params`.
    Eval,
}

/// Normalize a batch of features per channel. In train mode the mean and the
/// guarded standard deviation come from the batch; in eval mode from
/// `params`. Returns the normalized batch and the statistics used.
pub fn batchnorm<T: Scalar>(
    batch: &[Feature<T>],
    params: &BatchNormParams<T>,
    mode: BnMode,
) -> Result<(Vec<Feature<T>>, BatchStats<T>)> {
    if batch.is_empty() {
        return Err(Error::Shape("batch normalization of an empty batch".into()));
    }
    let d = batch[0].depth();
    if d != params.channels() {
        return Err(Error::Shape(format!(
            "batch depth {d} does not match {} batch-norm channels",
            params.channels()
        )));
    }
    let stats = match mode {
        BnMode::Eval => BatchStats {
            mu: params.mu.clone(),
            sigma: params.sigma.clone(),
        },
        BnMode::Train => {
            let count = T::from_f64((batch.len() * batch[0].height() * batch[0].width()) as f64);
            let mut mu = vec![T::zero(); d];
            for x in batch {
                for (k, m) in mu.iter_mut().enumerate() {
                    for v in x.channel_data(k) {
                        *m += *v;
                    }
                }
            }
            for m in &mut mu {
                *m /= count;
            }
            let mut var = vec![T::zero(); d];
            for x in batch {
                for (k, s) in var.iter_mut().enumerate() {
                    let m = mu[k];
                    for v in x.channel_data(k) {
                        let dv = *v - m;
                        *s += dv * dv;
                    }
                }
            }
            let sigma = var
                .iter()
                .map(|v| (*v / count + params.epsilon).sqrt())
                .collect();
            BatchStats { mu, sigma }
        }
    };
    let out = batch
        .iter()
        .map(|x| {
            let mut y = x.clone();
            for k in 0..d {
                let (g, b, m, s) = (params.gamma[k], params.beta[k], stats.mu[k], stats.sigma[k]);
                for v in y.channel_data_mut(k) {
                    *v = g * (*v - m) / s + b;
                }
            }
            y
        })
        .collect();
    Ok((out, stats))
}

/// Channel zero-padding operator: extend from `d1` to `d2 > d1` channels,
/// copying the input into channels `d..d+d1` with `d = floor((d2-d1)/2)` and
/// zero elsewhere. Preserves every entrywise p-norm.
pub fn pad_channels<T: Scalar>(x: &Feature<T>, d2: usize) -> Result<Feature<T>> {
    let d1 = x.depth();
    if d2 <= d1 {
        return Err(Error::Shape(format!(
            "channel padding needs d2 > d1, got d1={d1}, d2={d2}"
        )));
    }
    let d = (d2 - d1) / 2;
    let mut out = Feature::zeros(x.height(), x.width(), d2);
    for k in 0..d1 {
        out.channel_data_mut(d + k).copy_from_slice(x.channel_data(k));
    }
    Ok(out)
}

/// Inverse embedding of [`pad_channels`]: extract the `d1` copied channels.
pub fn crop_channels<T: Scalar>(x: &Feature<T>, d1: usize) -> Result<Feature<T>> {
    let d2 = x.depth();
    if d2 <= d1 {
        return Err(Error::Shape(format!(
            "channel crop needs d2 > d1, got d1={d1}, d2={d2}"
        )));
    }
    let d = (d2 - d1) / 2;
    let mut out = Feature::zeros(x.height(), x.width(), d1);
    for k in 0..d1 {
        out.channel_data_mut(k).copy_from_slice(x.channel_data(d + k));
    }
    Ok(out)
}

/// 2D average pooling: per channel, the stride-2 convolution with the 2x2
/// window of weight 1/4 under zero padding. Output is
/// `ceil(h/2) x ceil(w/2) x d`.
///
/// Edge blocks that fall partly outside the input are still divided by 4
/// (the missing reads are zeros); this is what makes the operator
/// non-expansive in both the Euclidean and max norms.
pub fn pool2<T: Scalar>(x: &Feature<T>) -> Feature<T> {
    let quarter = T::from_f64(0.25);
    let kernel = Plane {
        height: 2,
        width: 2,
        data: vec![quarter; 4],
    };
    let (oh, ow) = crate::conv::out_dims(x.height(), x.width(), 2);
    let mut out = Feature::zeros(oh, ow, x.depth());
    for k in 0..x.depth() {
        let pooled = conv_channel(&x.channel(k), &kernel, 2, PaddingMode::Zero);
        out.set_channel(k, &pooled);
    }
    out
}

/// Transpose of [`pool2`] as a linear map: scatter each pooled value back to
/// its 2x2 block (clipped at the boundary) with weight 1/4.
pub fn pool2_transpose<T: Scalar>(cot: &Feature<T>, h: usize, w: usize) -> Feature<T> {
    let quarter = T::from_f64(0.25);
    let mut out = Feature::zeros(h, w, cot.depth());
    for k in 0..cot.depth() {
        for oi in 0..cot.height() {
            for oj in 0..cot.width() {
                let g = cot.get(oi, oj, k) * quarter;
                for di in 0..2 {
                    for dj in 0..2 {
                        let (p, q) = (2 * oi + di, 2 * oj + dj);
                        if p < h && q < w {
                            let prev = out.get(p, q, k);
                            out.set(p, q, k, prev + g);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Global average pooling: one mean per channel.
pub fn pool_global<T: Scalar>(x: &Feature<T>) -> Vec<T> {
    let count = T::from_f64((x.height() * x.width()) as f64);
    (0..x.depth())
        .map(|k| {
            x.channel_data(k)
                .iter()
                .fold(T::zero(), |a, v| a + *v)
                / count
        })
        .collect()
}

/// Transpose of [`pool_global`]: spread each channel value uniformly.
pub fn pool_global_transpose<T: Scalar>(cot: &[T], h: usize, w: usize) -> Feature<T> {
    let scale = T::one() / T::from_f64((h * w) as f64);
    let mut out = Feature::zeros(h, w, cot.len());
    for (k, g) in cot.iter().enumerate() {
        let v = *g * scale;
        for slot in out.channel_data_mut(k) {
            *slot = v;
        }
    }
    out
}
