//! Operator-norm estimation and stability certificates.
//!
//! A certificate aggregates, per layer, the induced operator norms of the
//! (folded) linear maps, and assembles from them two constants:
//!
//! - the growth constant `c`, a sum of bias norms bounding how much the
//!   output norm can exceed the input norm, and
//! - the sensitivity constant `a`, a product of per-layer expansion factors
//!   bounding the output perturbation per unit of input perturbation.
//!
//! For the D variant the growth bound is stated in the max norm and `a`
//! multiplies a factor for every layer; for the S variant both bounds are
//! Euclidean and `a` contains only the two pooling-layer factors, so it is
//! independent of the residual depth. Hypotheses (norm caps, nonnegativity,
//! symmetry of the folded pair) are recorded as flags; failed flags mark the
//! corresponding bound conditional instead of aborting assembly.

use crate::conv::{conv2d, conv_transpose, out_dims, PaddingMode};
use crate::error::{Error, Result};
use crate::layer::relu_slice;
use crate::network::{
    fold_residual, forward, LayerKind, LayerParams, NetworkSpec, ParamStore, Variant,
};
use crate::tensor::{norm_slice, NormKind};
use crate::{Feature64, Filter64};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

/// Fixed start-vector seed; certificates must be deterministic.
const POWER_SEED: u64 = 0x5354_424C; // "STBL"

/// Power-iteration settings.
#[derive(Debug, Clone, Copy)]
pub struct PowerOpts {
    /// Relative change of the singular-value estimate that counts as
    /// converged (required on three consecutive iterations).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerOpts {
    fn default() -> Self {
        PowerOpts {
            tol: 1e-9,
            max_iter: 5000,
        }
    }
}

/// A linear operator given by matrix-free forward and transpose products.
pub trait LinOp {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, v: &[f64]) -> Vec<f64>;
}

/// Convolution operator on an `h x w` grid with optional per-channel scales:
/// `out_scale o conv o in_scale`.
pub struct ConvOp<'a> {
    pub filter: &'a Filter64,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub pad: PaddingMode,
    pub in_scale: Option<&'a [f64]>,
    pub out_scale: Option<&'a [f64]>,
}

impl<'a> ConvOp<'a> {
    pub fn plain(filter: &'a Filter64, h: usize, w: usize, stride: usize, pad: PaddingMode) -> Self {
        ConvOp {
            filter,
            h,
            w,
            stride,
            pad,
            in_scale: None,
            out_scale: None,
        }
    }
}

fn scale_channels(f: &mut Feature64, s: &[f64]) {
    for (k, v) in s.iter().enumerate() {
        for slot in f.channel_data_mut(k) {
            *slot *= *v;
        }
    }
}

impl LinOp for ConvOp<'_> {
    fn input_dim(&self) -> usize {
        self.h * self.w * self.filter.d_in()
    }

    fn output_dim(&self) -> usize {
        let (oh, ow) = out_dims(self.h, self.w, self.stride);
        oh * ow * self.filter.d_out()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut x = Feature64::new(self.h, self.w, self.filter.d_in(), v.to_vec())
            .expect("dimension mismatch in ConvOp::apply");
        if let Some(s) = self.in_scale {
            scale_channels(&mut x, s);
        }
        let mut y = conv2d(&x, self.filter, self.stride, self.pad)
            .expect("depth mismatch in ConvOp::apply");
        if let Some(s) = self.out_scale {
            scale_channels(&mut y, s);
        }
        y.vectorize()
    }

    fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let (oh, ow) = out_dims(self.h, self.w, self.stride);
        let mut y = Feature64::new(oh, ow, self.filter.d_out(), v.to_vec())
            .expect("dimension mismatch in ConvOp::apply_transpose");
        if let Some(s) = self.out_scale {
            scale_channels(&mut y, s);
        }
        let mut x = conv_transpose(&y, self.filter, self.h, self.w, self.stride, self.pad)
            .expect("depth mismatch in ConvOp::apply_transpose");
        if let Some(s) = self.in_scale {
            scale_channels(&mut x, s);
        }
        x.vectorize()
    }
}

/// Dense matrix as a [`LinOp`].
pub struct DenseOp<'a>(pub &'a DMatrix<f64>);

impl LinOp for DenseOp<'_> {
    fn input_dim(&self) -> usize {
        self.0.ncols()
    }
    fn output_dim(&self) -> usize {
        self.0.nrows()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let x = nalgebra::DVector::from_column_slice(v);
        (self.0 * x).as_slice().to_vec()
    }
    fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let x = nalgebra::DVector::from_column_slice(v);
        (self.0.transpose() * x).as_slice().to_vec()
    }
}

fn unit_random(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let n = norm_slice(&v, NormKind::L2);
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    } else {
        v[0] = 1.0;
    }
    v
}

/// Largest singular value of `op` by power iteration on `A^T A`, with a
/// deterministic seeded start vector. Converges when the relative change of
/// the estimate stays below `opts.tol` for three consecutive iterations
/// (plus a short polish phase); one safeguard restart with a fresh start
/// vector is attempted on stagnation.
pub fn power_iteration(op: &dyn LinOp, opts: PowerOpts) -> Result<(f64, usize)> {
    let mut total_iters = 0usize;
    for attempt in 0..2u64 {
        let mut v = unit_random(op.input_dim(), POWER_SEED.wrapping_add(attempt));
        let mut prev = f64::NAN;
        let mut hits = 0usize;
        for _ in 0..opts.max_iter {
            total_iters += 1;
            let w = op.apply(&v);
            let sigma = norm_slice(&w, NormKind::L2);
            if sigma == 0.0 {
                // a random vector annihilated by A: treat as the zero operator
                return Ok((0.0, total_iters));
            }
            let u = op.apply_transpose(&w);
            let un = norm_slice(&u, NormKind::L2);
            if un == 0.0 {
                return Ok((sigma, total_iters));
            }
            v = u;
            for x in &mut v {
                *x /= un;
            }
            if prev.is_finite() && (sigma - prev).abs() <= opts.tol * sigma.max(f64::MIN_POSITIVE) {
                hits += 1;
                if hits >= 3 {
                    // polish: a few extra iterations sharpen the estimate
                    // when the top singular values are close
                    let mut est = sigma;
                    for _ in 0..20 {
                        total_iters += 1;
                        let w = op.apply(&v);
                        est = norm_slice(&w, NormKind::L2);
                        let u = op.apply_transpose(&w);
                        let un = norm_slice(&u, NormKind::L2);
                        if un == 0.0 {
                            break;
                        }
                        v = u;
                        for x in &mut v {
                            *x /= un;
                        }
                    }
                    return Ok((est, total_iters));
                }
            } else {
                hits = 0;
            }
            prev = sigma;
        }
        if attempt == 1 {
            return Err(Error::NoConvergence {
                estimate: prev,
                iterations: total_iters,
            });
        }
    }
    unreachable!()
}

/// Induced Euclidean norm of the (strided) convolution operator, matrix-free.
pub fn opnorm_l2(
    filter: &Filter64,
    h: usize,
    w: usize,
    stride: usize,
    pad: PaddingMode,
    opts: PowerOpts,
) -> Result<(f64, usize)> {
    power_iteration(&ConvOp::plain(filter, h, w, stride, pad), opts)
}

/// Exact induced max-norm (maximum absolute row sum) of the stride-1
/// convolution operator on an `h x w` grid. Coefficients landing on the same
/// input cell are merged before taking absolute values, so the value is
/// exact even when the window wraps onto itself; rows are summed in column
/// order, matching the dense reference bit for bit.
pub fn opnorm_linf(filter: &Filter64, h: usize, w: usize, pad: PaddingMode) -> f64 {
    let n = filter.n() as isize;
    let (lo, hi, shift) = if n % 2 == 1 {
        (-(n - 1) / 2, (n - 1) / 2, (n - 1) / 2)
    } else {
        (1 - n / 2, n / 2, n / 2 - 1)
    };
    let cols = h * w * filter.d_in();
    let mut row = vec![0.0f64; cols];
    let mut best = 0.0f64;
    for c_out in 0..filter.d_out() {
        for oi in 0..h {
            for oj in 0..w {
                row.iter_mut().for_each(|v| *v = 0.0);
                for c_in in 0..filter.d_in() {
                    for l in lo..=hi {
                        let pi = oi as isize + l;
                        let p = match pad {
                            PaddingMode::Periodic => pi.rem_euclid(h as isize) as usize,
                            PaddingMode::Zero => {
                                if pi < 0 || pi >= h as isize {
                                    continue;
                                }
                                pi as usize
                            }
                        };
                        for k in lo..=hi {
                            let qj = oj as isize + k;
                            let q = match pad {
                                PaddingMode::Periodic => qj.rem_euclid(w as isize) as usize,
                                PaddingMode::Zero => {
                                    if qj < 0 || qj >= w as isize {
                                        continue;
                                    }
                                    qj as usize
                                }
                            };
                            let ka = (l + shift) as usize;
                            let kb = (k + shift) as usize;
                            row[c_in * h * w + p * w + q] += filter.get(ka, kb, c_in, c_out);
                        }
                    }
                }
                let mut sum = 0.0;
                for v in &row {
                    sum += v.abs();
                }
                best = best.max(sum);
            }
        }
    }
    best
}

/// Maximum absolute row sum of a dense matrix.
pub fn dense_opnorm_linf(w: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for r in 0..w.nrows() {
        let mut acc = 0.0;
        for c in 0..w.ncols() {
            acc += w[(r, c)].abs();
        }
        best = best.max(acc);
    }
    best
}

/// Largest singular value of a dense matrix, via the same power iteration
/// certificates use.
pub fn dense_opnorm_l2(w: &DMatrix<f64>, opts: PowerOpts) -> Result<(f64, usize)> {
    power_iteration(&DenseOp(w), opts)
}

/// Rescale a filter so the induced Euclidean norm of its convolution
/// operator is at most `target`: `K <- K * min(1, target / |A|)`. Returns the
/// rescaled filter and the norm measured before rescaling.
pub fn rescale_filter_l2(
    filter: &Filter64,
    h: usize,
    w: usize,
    stride: usize,
    pad: PaddingMode,
    target: f64,
    opts: PowerOpts,
) -> Result<(Filter64, f64)> {
    let (norm, _) = opnorm_l2(filter, h, w, stride, pad, opts)?;
    if norm <= target || norm == 0.0 {
        return Ok((filter.clone(), norm));
    }
    let mut scaled = filter.clone();
    scaled.scale(target / norm);
    Ok((scaled, norm))
}

// ---------------------------------------------------------------------------
// Certificate assembly
// ---------------------------------------------------------------------------

/// Euclidean norm of a per-channel constant bias viewed as a feature on an
/// `h x w` grid: each channel contributes `h*w` copies of its scalar.
fn bias_l2_on_grid(bias: &[f64], h: usize, w: usize) -> f64 {
    ((h * w) as f64).sqrt() * norm_slice(bias, NormKind::L2)
}

fn bias_linf(bias: &[f64]) -> f64 {
    norm_slice(bias, NormKind::Linf)
}

/// One row of the certificate's per-layer table.
#[derive(Debug, Clone)]
pub struct LayerCert {
    pub index: usize,
    pub kind: String,
    /// Stable-order named values (operator norms, bias norms).
    pub values: Vec<(String, f64)>,
}

/// One recorded hypothesis.
#[derive(Debug, Clone)]
pub struct CertFlag {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

/// Assembled stability certificate.
#[derive(Debug, Clone)]
pub struct StabilityCertificate {
    pub variant: Variant,
    pub m: usize,
    /// Norm the growth bound is stated in: max norm for D, Euclidean for S.
    pub growth_norm: NormKind,
    /// Growth constant: `|xN| <= |x0| + c` in `growth_norm`.
    pub growth_c: f64,
    /// Sensitivity constant: `|xN - yN|_2 <= a * |x0 - y0|_2`.
    pub sensitivity_a: f64,
    pub layers: Vec<LayerCert>,
    pub flags: Vec<CertFlag>,
    /// All hypotheses of the growth bound hold.
    pub growth_valid: bool,
    /// All hypotheses of the sensitivity bound hold.
    pub sensitivity_valid: bool,
}

impl StabilityCertificate {
    fn failed_flags(&self) -> Vec<&CertFlag> {
        self.flags.iter().filter(|f| !f.ok).collect()
    }

    /// Render as machine-diffable key/value text with a per-layer table.
    /// Field order is stable.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format = stbl-certificate/1");
        let variant = match self.variant {
            Variant::ResNetD => "resnet-d",
            Variant::ResNetS => "resnet-s",
        };
        let _ = writeln!(s, "variant = {variant}");
        let _ = writeln!(s, "m = {}", self.m);
        let norm = match self.growth_norm {
            NormKind::Linf => "linf",
            _ => "l2",
        };
        let _ = writeln!(s, "growth.norm = {norm}");
        let _ = writeln!(s, "growth.c = {:.15e}", self.growth_c);
        let _ = writeln!(s, "growth.valid = {}", self.growth_valid);
        let _ = writeln!(s, "sensitivity.a = {:.15e}", self.sensitivity_a);
        let _ = writeln!(s, "sensitivity.valid = {}", self.sensitivity_valid);
        for flag in &self.flags {
            let status = if flag.ok { "ok" } else { "violated" };
            let _ = writeln!(s, "flag.{} = {status} ({})", flag.name, flag.detail);
        }
        for layer in &self.layers {
            for (name, value) in &layer.values {
                let _ = writeln!(
                    s,
                    "layer[{:02}].{}.{} = {:.15e}",
                    layer.index, layer.kind, name, value
                );
            }
        }
        s
    }
}

/// Compute per-layer operator norms and assemble the growth and sensitivity
/// constants with the hypothesis flags. Violated hypotheses set flags; they
/// never abort assembly.
pub fn assemble_certificate(
    spec: &NetworkSpec,
    params: &ParamStore,
    opts: PowerOpts,
) -> Result<StabilityCertificate> {
    spec.validate()?;
    params.validate(spec)?;
    let pad = spec.padding;
    let sqrt2 = std::f64::consts::SQRT_2;

    let mut layers = Vec::new();
    let mut flags: Vec<CertFlag> = Vec::new();

    let mut growth_c = 0.0f64;
    let mut sensitivity_a = 1.0f64;

    // hypothesis trackers
    let mut k2_nonneg = true;
    let mut k2_min = f64::INFINITY;
    let mut residual_norm_max = 0.0f64;
    let mut symmetric_ok = true;
    let mut first_conv_norm = 0.0f64;
    let mut dense_norm = 0.0f64;

    for (idx, lp) in params.layers.iter().enumerate() {
        match (spec.layer_kind(idx), lp) {
            (LayerKind::ConvFirst, LayerParams::Conv { filter, bias }) => {
                let (h, w) = (spec.height, spec.width);
                let (l2, _) = opnorm_l2(filter, h, w, 1, pad, opts)?;
                let linf = opnorm_linf(filter, h, w, pad);
                match spec.variant {
                    Variant::ResNetD => {
                        first_conv_norm = linf;
                        growth_c += bias_linf(bias);
                    }
                    Variant::ResNetS => {
                        first_conv_norm = l2;
                        growth_c += bias_l2_on_grid(bias, h, w);
                    }
                }
                sensitivity_a *= l2;
                layers.push(LayerCert {
                    index: idx,
                    kind: "conv".into(),
                    values: vec![
                        ("opnorm_l2".into(), l2),
                        ("opnorm_linf".into(), linf),
                        ("bias_linf".into(), bias_linf(bias)),
                        ("bias_l2".into(), bias_l2_on_grid(bias, h, w)),
                    ],
                });
            }
            (LayerKind::Residual { scale }, _) => {
                let (h, w, _) = spec.scale_dims(scale);
                let folded = fold_residual(lp)?;
                let op1 = ConvOp {
                    filter: &folded.filter1,
                    h,
                    w,
                    stride: 1,
                    pad,
                    in_scale: None,
                    out_scale: folded.scale1.as_deref(),
                };
                let (n1, _) = power_iteration(&op1, opts)?;
                // the second operator's transpose structure:
                // D applies scale o conv(filter2); S applies scale o adjoint,
                // whose norm equals that of conv(filter2) o scale.
                let (in_s, out_s) = match spec.variant {
                    Variant::ResNetD => (None, folded.scale2.as_deref()),
                    Variant::ResNetS => (folded.scale2.as_deref(), None),
                };
                let op2 = ConvOp {
                    filter: &folded.filter2,
                    h,
                    w,
                    stride: 1,
                    pad,
                    in_scale: in_s,
                    out_scale: out_s,
                };
                let (n2, _) = power_iteration(&op2, opts)?;
                let b1_l2 = bias_l2_on_grid(&folded.b1, h, w);
                let b2_l2 = bias_l2_on_grid(&folded.b2, h, w);
                let b2_linf = bias_linf(&folded.b2);
                match spec.variant {
                    Variant::ResNetD => {
                        growth_c += b2_linf;
                        sensitivity_a *= 1.0 + n1 * n2;
                        if let LayerParams::ResidualD { k2, .. } = lp {
                            let min = k2.min_entry();
                            k2_min = k2_min.min(min);
                            if min < 0.0 {
                                k2_nonneg = false;
                            }
                        }
                    }
                    Variant::ResNetS => {
                        growth_c += sqrt2 * b1_l2 + b2_l2;
                        residual_norm_max = residual_norm_max.max(n1).max(n2);
                        if !folded.symmetric {
                            symmetric_ok = false;
                        }
                    }
                }
                layers.push(LayerCert {
                    index: idx,
                    kind: "residual".into(),
                    values: vec![
                        ("opnorm_l2_a1".into(), n1),
                        ("opnorm_l2_a2".into(), n2),
                        ("bias_b1_l2".into(), b1_l2),
                        ("bias_b2_l2".into(), b2_l2),
                        ("bias_b2_linf".into(), b2_linf),
                    ],
                });
            }
            (LayerKind::Pool { scale }, LayerParams::Pool { filter, .. }) => {
                let (h, w, _) = spec.scale_dims(scale);
                let (l2, _) = opnorm_l2(filter, h, w, 2, pad, opts)?;
                sensitivity_a *= 1.0 + l2;
                layers.push(LayerCert {
                    index: idx,
                    kind: "pool".into(),
                    values: vec![("opnorm_l2".into(), l2)],
                });
            }
            (LayerKind::GlobalPool, LayerParams::GlobalPool) => {
                // parameter-free and non-expansive; contributes factor 1
                layers.push(LayerCert {
                    index: idx,
                    kind: "global-pool".into(),
                    values: vec![("lipschitz_l2".into(), 1.0)],
                });
            }
            (LayerKind::Dense, LayerParams::Dense { weight, bias }) => {
                let (l2, _) = dense_opnorm_l2(weight, opts)?;
                let linf = dense_opnorm_linf(weight);
                match spec.variant {
                    Variant::ResNetD => {
                        dense_norm = linf;
                        growth_c += bias_linf(bias);
                    }
                    Variant::ResNetS => {
                        dense_norm = l2;
                        growth_c += norm_slice(bias, NormKind::L2);
                    }
                }
                sensitivity_a *= l2;
                layers.push(LayerCert {
                    index: idx,
                    kind: "dense".into(),
                    values: vec![
                        ("opnorm_l2".into(), l2),
                        ("opnorm_linf".into(), linf),
                        ("bias_linf".into(), bias_linf(bias)),
                        ("bias_l2".into(), norm_slice(bias, NormKind::L2)),
                    ],
                });
            }
            _ => unreachable!("validated parameter store"),
        }
    }

    // the S-variant sensitivity constant keeps only the pooling factors
    if spec.variant == Variant::ResNetS {
        sensitivity_a = 1.0;
        for layer in &layers {
            if layer.kind == "pool" {
                sensitivity_a *= 1.0 + layer.values[0].1;
            }
        }
    }

    let (growth_valid, sensitivity_valid) = match spec.variant {
        Variant::ResNetD => {
            flags.push(CertFlag {
                name: "first_conv_norm".into(),
                ok: first_conv_norm <= 1.0,
                detail: format!("|A0|_inf = {first_conv_norm:.6e} <= 1"),
            });
            flags.push(CertFlag {
                name: "dense_norm".into(),
                ok: dense_norm <= 1.0,
                detail: format!("|W|_inf = {dense_norm:.6e} <= 1"),
            });
            flags.push(CertFlag {
                name: "residual_k2_nonneg".into(),
                ok: k2_nonneg,
                detail: format!("min entry = {k2_min:.6e} >= 0"),
            });
            let growth = first_conv_norm <= 1.0 && dense_norm <= 1.0 && k2_nonneg;
            (growth, k2_nonneg)
        }
        Variant::ResNetS => {
            flags.push(CertFlag {
                name: "first_conv_norm".into(),
                ok: first_conv_norm <= 1.0,
                detail: format!("|A0|_2 = {first_conv_norm:.6e} <= 1"),
            });
            flags.push(CertFlag {
                name: "dense_norm".into(),
                ok: dense_norm <= 1.0,
                detail: format!("|W|_2 = {dense_norm:.6e} <= 1"),
            });
            flags.push(CertFlag {
                name: "residual_norm".into(),
                ok: residual_norm_max <= sqrt2,
                detail: format!("max |A|_2 = {residual_norm_max:.6e} <= sqrt(2)"),
            });
            flags.push(CertFlag {
                name: "residual_symmetric".into(),
                ok: symmetric_ok,
                detail: "folded operator pair is adjoint".into(),
            });
            let all = first_conv_norm <= 1.0
                && dense_norm <= 1.0
                && residual_norm_max <= sqrt2
                && symmetric_ok;
            (all, all)
        }
    };

    Ok(StabilityCertificate {
        variant: spec.variant,
        m: spec.m,
        growth_norm: match spec.variant {
            Variant::ResNetD => NormKind::Linf,
            Variant::ResNetS => NormKind::L2,
        },
        growth_c,
        sensitivity_a,
        layers,
        flags,
        growth_valid,
        sensitivity_valid,
    })
}

// ---------------------------------------------------------------------------
// Verification campaigns
// ---------------------------------------------------------------------------

/// Slack tolerance for bound comparisons: forward passes and constants carry
/// rounding of order machine epsilon times the bound scale.
fn bound_tol(bound: f64) -> f64 {
    1e-9 * bound.abs().max(1.0)
}

/// One growth check.
#[derive(Debug, Clone)]
pub struct GrowthEntry {
    pub input_norm: f64,
    pub output_norm: f64,
    pub bound: f64,
    pub slack: f64,
    pub violated: bool,
    /// Per-state (l2, linf) norms, kept when the bound is violated.
    pub trace: Option<Vec<(f64, f64)>>,
}

/// Result of a growth-verification campaign.
#[derive(Debug, Clone)]
pub struct GrowthReport {
    pub certificate: StabilityCertificate,
    /// Reason verification was skipped (failed hypothesis flags), if it was.
    pub skipped: Option<String>,
    pub entries: Vec<GrowthEntry>,
    pub violations: usize,
}

/// Check `|xN| <= |x0| + c` (in the certificate's norm) on each input.
pub fn verify_growth(
    spec: &NetworkSpec,
    params: &ParamStore,
    inputs: &[Feature64],
    opts: PowerOpts,
) -> Result<GrowthReport> {
    let certificate = assemble_certificate(spec, params, opts)?;
    if !certificate.growth_valid {
        let failed: Vec<String> = certificate
            .failed_flags()
            .iter()
            .map(|f| f.name.clone())
            .collect();
        return Ok(GrowthReport {
            certificate,
            skipped: Some(format!(
                "growth hypotheses violated ({}); bound is conditional",
                failed.join(", ")
            )),
            entries: Vec::new(),
            violations: 0,
        });
    }
    let kind = certificate.growth_norm;
    let mut entries = Vec::with_capacity(inputs.len());
    let mut violations = 0;
    for x0 in inputs {
        let (_, trace) = forward(spec, params, x0, false)?;
        let pick = |s: &crate::network::TraceState| match kind {
            NormKind::Linf => s.linf,
            _ => s.l2,
        };
        let input_norm = pick(&trace.states[0]);
        let output_norm = pick(trace.states.last().unwrap());
        let bound = input_norm + certificate.growth_c;
        let slack = bound - output_norm;
        let violated = output_norm > bound + bound_tol(bound);
        if violated {
            violations += 1;
        }
        entries.push(GrowthEntry {
            input_norm,
            output_norm,
            bound,
            slack,
            violated,
            trace: violated.then(|| trace.states.iter().map(|s| (s.l2, s.linf)).collect()),
        });
    }
    Ok(GrowthReport {
        certificate,
        skipped: None,
        entries,
        violations,
    })
}

/// One sensitivity check.
#[derive(Debug, Clone)]
pub struct SensitivityEntry {
    pub input_dist: f64,
    pub output_dist: f64,
    pub bound: f64,
    pub slack: f64,
    pub violated: bool,
}

/// Result of a sensitivity-verification campaign.
#[derive(Debug, Clone)]
pub struct SensitivityReport {
    pub certificate: StabilityCertificate,
    pub skipped: Option<String>,
    pub entries: Vec<SensitivityEntry>,
    pub violations: usize,
}

/// Check `|xN - yN|_2 <= a |x0 - y0|_2` on each input pair.
pub fn verify_sensitivity(
    spec: &NetworkSpec,
    params: &ParamStore,
    pairs: &[(Feature64, Feature64)],
    opts: PowerOpts,
) -> Result<SensitivityReport> {
    let certificate = assemble_certificate(spec, params, opts)?;
    if !certificate.sensitivity_valid {
        let failed: Vec<String> = certificate
            .failed_flags()
            .iter()
            .map(|f| f.name.clone())
            .collect();
        return Ok(SensitivityReport {
            certificate,
            skipped: Some(format!(
                "sensitivity hypotheses violated ({}); bound is conditional",
                failed.join(", ")
            )),
            entries: Vec::new(),
            violations: 0,
        });
    }
    let mut entries = Vec::with_capacity(pairs.len());
    let mut violations = 0;
    for (x0, y0) in pairs {
        let xn = forward(spec, params, x0, false)?.0;
        let yn = forward(spec, params, y0, false)?.0;
        let mut diff0 = x0.clone();
        diff0.axpy(-1.0, y0);
        let input_dist = diff0.norm(NormKind::L2);
        let diff_n: Vec<f64> = xn.iter().zip(&yn).map(|(a, b)| a - b).collect();
        let output_dist = norm_slice(&diff_n, NormKind::L2);
        let bound = certificate.sensitivity_a * input_dist;
        let slack = bound - output_dist;
        let violated = output_dist > bound + bound_tol(bound);
        if violated {
            violations += 1;
        }
        entries.push(SensitivityEntry {
            input_dist,
            output_dist,
            bound,
            slack,
            violated,
        });
    }
    Ok(SensitivityReport {
        certificate,
        skipped: None,
        entries,
        violations,
    })
}

// ---------------------------------------------------------------------------
// Non-expansiveness check for the symmetric residual map
// ---------------------------------------------------------------------------

/// Operator for [`check_lemma_nonexpansive`]: a square dense matrix or a
/// square convolution.
pub enum LemmaOperator<'a> {
    Dense(&'a DMatrix<f64>),
    Conv {
        filter: &'a Filter64,
        h: usize,
        w: usize,
        pad: PaddingMode,
    },
}

/// Result of sampling `F(x) = x - A^T (A x + b)_+` for expansion.
#[derive(Debug, Clone)]
pub struct LemmaReport {
    pub opnorm: f64,
    /// Whether `|A|_2 <= sqrt(2)` (the hypothesis under which `F` is
    /// non-expansive).
    pub hypothesis: bool,
    pub max_ratio: f64,
    pub violations: usize,
    pub trials: usize,
}

/// Sample random pairs and record the largest expansion ratio
/// `|F(x) - F(y)|_2 / |x - y|_2`. Under the norm hypothesis the ratio never
/// exceeds one; without it the report typically carries an expansion witness.
pub fn check_lemma_nonexpansive(
    op: &LemmaOperator<'_>,
    b: &[f64],
    trials: usize,
    seed: u64,
) -> Result<LemmaReport> {
    let (dim, opnorm) = match op {
        LemmaOperator::Dense(m) => {
            if m.nrows() != m.ncols() {
                return Err(Error::Shape("lemma operator must be square".into()));
            }
            (m.ncols(), dense_opnorm_l2(m, PowerOpts::default())?.0)
        }
        LemmaOperator::Conv { filter, h, w, pad } => {
            if filter.d_in() != filter.d_out() {
                return Err(Error::Shape(
                    "lemma operator needs matching channel counts".into(),
                ));
            }
            let dim = h * w * filter.d_in();
            let norm = opnorm_l2(filter, *h, *w, 1, *pad, PowerOpts::default())?.0;
            (dim, norm)
        }
    };
    if b.len() != dim {
        return Err(Error::Shape(format!(
            "bias length {} does not match operator dimension {dim}",
            b.len()
        )));
    }
    type Pullback<'f> = Box<dyn Fn(&[f64]) -> Vec<f64> + 'f>;
    let apply_f = |x: &[f64]| -> Vec<f64> {
        let (ax, back): (Vec<f64>, Pullback) = match op {
            LemmaOperator::Dense(m) => {
                let v = nalgebra::DVector::from_column_slice(x);
                let ax = (*m * v).as_slice().to_vec();
                let m = *m;
                (
                    ax,
                    Box::new(move |u: &[f64]| {
                        let v = nalgebra::DVector::from_column_slice(u);
                        (m.transpose() * v).as_slice().to_vec()
                    }),
                )
            }
            LemmaOperator::Conv { filter, h, w, pad } => {
                let xf = Feature64::new(*h, *w, filter.d_in(), x.to_vec()).unwrap();
                let ax = conv2d(&xf, filter, 1, *pad).unwrap().vectorize();
                let (filter, h, w, pad) = (*filter, *h, *w, *pad);
                (
                    ax,
                    Box::new(move |u: &[f64]| {
                        let uf = Feature64::new(h, w, filter.d_out(), u.to_vec()).unwrap();
                        conv_transpose(&uf, filter, h, w, 1, pad).unwrap().vectorize()
                    }),
                )
            }
        };
        let inner: Vec<f64> = ax.iter().zip(b).map(|(a, bb)| a + bb).collect();
        let act = relu_slice(&inner);
        let pulled = back(&act);
        x.iter().zip(&pulled).map(|(xi, p)| xi - p).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_ratio = 0.0f64;
    let mut violations = 0usize;
    for _ in 0..trials {
        let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let y: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let dn = norm_slice(&d, NormKind::L2);
        if dn < 1e-9 {
            continue;
        }
        let fx = apply_f(&x);
        let fy = apply_f(&y);
        let fd: Vec<f64> = fx.iter().zip(&fy).map(|(a, b)| a - b).collect();
        let fdn = norm_slice(&fd, NormKind::L2);
        // absolute cushion: each F evaluation carries rounding of a few ulps
        // of the state scale, which swamps the ratio for nearly coincident
        // pairs
        if fdn > dn * (1.0 + 1e-12) + 1e-12 {
            violations += 1;
        }
        if dn >= 1e-6 {
            max_ratio = max_ratio.max(fdn / dn);
        }
    }
    Ok(LemmaReport {
        opnorm,
        hypothesis: opnorm <= std::f64::consts::SQRT_2 + 1e-9,
        max_ratio,
        violations,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::materialize;
    use crate::network::LayerParams;
    use approx::assert_relative_eq;

    fn rand_filter(rng: &mut ChaCha8Rng, n: usize, di: usize, dj: usize) -> Filter64 {
        Filter64::from_fn(n, di, dj, |_, _, _, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn svd_top(filter: &Filter64, h: usize, w: usize, stride: usize, pad: PaddingMode) -> f64 {
        let m = materialize(filter, h, w, stride, pad).unwrap().to_dmatrix();
        m.svd(false, false).singular_values[0]
    }

    #[test]
    fn opnorm_l2_scaled_identity() {
        let mut k = Filter64::identity(3, 2);
        k.scale(2.0);
        let (est, _) = opnorm_l2(&k, 5, 5, 1, PaddingMode::Periodic, PowerOpts::default()).unwrap();
        assert_relative_eq!(est, 2.0, max_relative = 1e-9);
    }

    #[test]
    fn opnorm_l2_zero_filter() {
        let k = Filter64::zeros(3, 2, 2);
        let (est, _) = opnorm_l2(&k, 4, 4, 1, PaddingMode::Zero, PowerOpts::default()).unwrap();
        assert_eq!(est, 0.0);
    }

    #[test]
    fn opnorm_l2_matches_dense_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..25 {
            let n = rng.random_range(2..4);
            let di = rng.random_range(1..3);
            let dj = rng.random_range(1..3);
            let stride = rng.random_range(1..3);
            let pad = if rng.random::<bool>() {
                PaddingMode::Periodic
            } else {
                PaddingMode::Zero
            };
            let k = rand_filter(&mut rng, n, di, dj);
            let (est, _) = opnorm_l2(
                &k,
                6,
                6,
                stride,
                pad,
                PowerOpts {
                    tol: 1e-12,
                    max_iter: 20000,
                },
            )
            .unwrap();
            let want = svd_top(&k, 6, 6, stride, pad);
            assert!(
                (est - want).abs() <= 1e-8 * want.max(1.0),
                "estimate {est} vs svd {want}"
            );
        }
    }

    #[test]
    fn opnorm_linf_examples() {
        let ones = Filter64::from_fn(3, 1, 1, |_, _, _, _| 1.0);
        assert_eq!(opnorm_linf(&ones, 5, 5, PaddingMode::Periodic), 9.0);
        let id = Filter64::identity(3, 2);
        assert_eq!(opnorm_linf(&id, 4, 4, PaddingMode::Periodic), 1.0);
    }

    #[test]
    fn opnorm_linf_matches_dense_row_sums_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..30 {
            let n = rng.random_range(2..4);
            let di = rng.random_range(1..3);
            let dj = rng.random_range(1..3);
            let h = rng.random_range(1..6);
            let w = rng.random_range(1..6);
            // dyadic entries keep every partial sum exact
            let k = Filter64::from_fn(n, di, dj, |_, _, _, _| {
                (rng.random_range(-8i32..=8) as f64) / 8.0
            });
            for pad in [PaddingMode::Periodic, PaddingMode::Zero] {
                let got = opnorm_linf(&k, h, w, pad);
                let want = materialize(&k, h, w, 1, pad).unwrap().max_abs_row_sum();
                assert_eq!(got.to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn opnorm_linf_zero_pad_below_periodic() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..30 {
            let k = rand_filter(&mut rng, 3, 2, 2);
            let zero = opnorm_linf(&k, 6, 6, PaddingMode::Zero);
            let per = opnorm_linf(&k, 6, 6, PaddingMode::Periodic);
            assert!(zero <= per + 1e-12);
        }
    }

    #[test]
    fn power_iteration_on_dense() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let (est, _) = dense_opnorm_l2(&m, PowerOpts::default()).unwrap();
        assert_relative_eq!(est, 3.0, max_relative = 1e-9);
        assert_eq!(dense_opnorm_linf(&m), 3.0);
    }

    #[test]
    fn lemma_zero_operator_is_identity() {
        let m = DMatrix::zeros(3, 3);
        let report =
            check_lemma_nonexpansive(&LemmaOperator::Dense(&m), &[0.0; 3], 1000, 1).unwrap();
        assert!(report.hypothesis);
        assert_relative_eq!(report.max_ratio, 1.0, max_relative = 1e-12);
        assert_eq!(report.violations, 0);
    }

    #[test]
    fn lemma_sqrt2_scalar_is_nonexpansive() {
        let m = DMatrix::from_row_slice(1, 1, &[std::f64::consts::SQRT_2]);
        let report =
            check_lemma_nonexpansive(&LemmaOperator::Dense(&m), &[0.0], 100_000, 2).unwrap();
        assert!(report.hypothesis);
        assert_eq!(report.violations, 0);
        assert!(report.max_ratio <= 1.0 + 1e-8);
    }

    #[test]
    fn lemma_large_scalar_expands() {
        let m = DMatrix::from_row_slice(1, 1, &[2.1]);
        let report =
            check_lemma_nonexpansive(&LemmaOperator::Dense(&m), &[0.0], 10_000, 3).unwrap();
        assert!(!report.hypothesis);
        assert!(report.violations > 0);
        // slope on the positive axis is 1 - 2.1^2 = -3.41
        assert!(report.max_ratio > 3.0);

        // the scan at operator norm 3 finds pairs expanding by up to
        // |1 - 9| = 8
        let m = DMatrix::from_row_slice(1, 1, &[3.0]);
        let report =
            check_lemma_nonexpansive(&LemmaOperator::Dense(&m), &[0.0], 10_000, 4).unwrap();
        assert!(!report.hypothesis);
        assert!(report.max_ratio > 7.5 && report.max_ratio <= 8.0 + 1e-9);
    }

    fn admissible_s_spec(m: usize) -> NetworkSpec {
        NetworkSpec {
            variant: Variant::ResNetS,
            m,
            height: 8,
            width: 8,
            depth: 1,
            d1: 2,
            classes: 2,
            use_batchnorm: false,
            padding: PaddingMode::Periodic,
        }
    }

    fn make_admissible_s(spec: &NetworkSpec, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::zeros(spec);
        let opts = PowerOpts::default();
        for idx in 0..spec.layer_count() {
            match (&spec.layer_kind(idx), &mut params.layers[idx]) {
                (LayerKind::ConvFirst, LayerParams::Conv { filter, bias }) => {
                    let mut k = rand_filter(&mut rng, 3, spec.depth, spec.d1);
                    k = rescale_filter_l2(&k, spec.height, spec.width, 1, spec.padding, 0.95, opts)
                        .unwrap()
                        .0;
                    *filter = k;
                    for v in bias.iter_mut() {
                        *v = (rng.random::<f64>() - 0.5) * 0.1;
                    }
                }
                (LayerKind::Residual { scale }, LayerParams::ResidualS { k, b1, b2, .. }) => {
                    let (h, w, d) = spec.scale_dims(*scale);
                    let kk = rand_filter(&mut rng, 3, d, d);
                    *k = rescale_filter_l2(&kk, h, w, 1, spec.padding, 1.4, opts).unwrap().0;
                    for v in b1.iter_mut().chain(b2.iter_mut()) {
                        *v = (rng.random::<f64>() - 0.5) * 0.1;
                    }
                }
                (LayerKind::Pool { scale }, LayerParams::Pool { filter, bias }) => {
                    let (h, w, d) = spec.scale_dims(*scale);
                    let kk = rand_filter(&mut rng, 3, d, 2 * d);
                    *filter = rescale_filter_l2(&kk, h, w, 2, spec.padding, 1.5, opts).unwrap().0;
                    for v in bias.iter_mut() {
                        *v = (rng.random::<f64>() - 0.5) * 0.1;
                    }
                }
                (LayerKind::Dense, LayerParams::Dense { weight, bias }) => {
                    for v in weight.iter_mut() {
                        *v = rng.random::<f64>() - 0.5;
                    }
                    let norm = dense_opnorm_l2(weight, opts).unwrap().0;
                    if norm > 0.95 {
                        *weight *= 0.95 / norm;
                    }
                    for v in bias.iter_mut() {
                        *v = (rng.random::<f64>() - 0.5) * 0.1;
                    }
                }
                _ => {}
            }
        }
        params
    }

    #[test]
    fn zero_bias_networks_have_zero_growth_constant() {
        let spec = admissible_s_spec(1);
        let params = ParamStore::zeros(&spec);
        let cert = assemble_certificate(&spec, &params, PowerOpts::default()).unwrap();
        assert_eq!(cert.growth_c, 0.0);
        assert!(cert.growth_valid);
    }

    #[test]
    fn sensitivity_constant_matches_term_by_term_product() {
        // independent re-evaluation of the assembled product from the
        // recorded per-layer norms
        let spec = NetworkSpec {
            variant: Variant::ResNetD,
            m: 2,
            height: 6,
            width: 6,
            depth: 1,
            d1: 2,
            classes: 3,
            use_batchnorm: false,
            padding: PaddingMode::Periodic,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut params = ParamStore::zeros(&spec);
        for lp in &mut params.layers {
            match lp {
                LayerParams::Conv { filter, .. } | LayerParams::Pool { filter, .. } => {
                    for v in filter.as_mut_slice() {
                        *v = rng.random::<f64>() - 0.5;
                    }
                }
                LayerParams::ResidualD { k1, k2, .. } => {
                    for v in k1.as_mut_slice() {
                        *v = rng.random::<f64>() - 0.5;
                    }
                    for v in k2.as_mut_slice() {
                        *v = rng.random::<f64>() * 0.5;
                    }
                }
                LayerParams::Dense { weight, .. } => {
                    for v in weight.iter_mut() {
                        *v = rng.random::<f64>() - 0.5;
                    }
                }
                _ => {}
            }
        }
        let cert = assemble_certificate(&spec, &params, PowerOpts::default()).unwrap();
        let mut expected = 1.0f64;
        for layer in &cert.layers {
            match layer.kind.as_str() {
                "conv" | "dense" => expected *= layer.values[0].1,
                "residual" => expected *= 1.0 + layer.values[0].1 * layer.values[1].1,
                "pool" => expected *= 1.0 + layer.values[0].1,
                _ => {}
            }
        }
        assert_eq!(cert.sensitivity_a.to_bits(), expected.to_bits());
    }

    #[test]
    fn growth_constant_is_monotone_in_biases() {
        let spec = admissible_s_spec(1);
        let mut params = make_admissible_s(&spec, 50);
        let c0 = assemble_certificate(&spec, &params, PowerOpts::default())
            .unwrap()
            .growth_c;
        if let LayerParams::ResidualS { b1, .. } = &mut params.layers[1] {
            for v in b1.iter_mut() {
                *v *= 3.0;
            }
        }
        let c1 = assemble_certificate(&spec, &params, PowerOpts::default())
            .unwrap()
            .growth_c;
        assert!(c1 >= c0);
    }

    #[test]
    fn sensitivity_constant_is_monotone_in_filters() {
        let spec = NetworkSpec {
            variant: Variant::ResNetD,
            m: 1,
            ..admissible_s_spec(1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut params = ParamStore::zeros(&spec);
        for lp in &mut params.layers {
            if let LayerParams::ResidualD { k1, k2, .. } = lp {
                for v in k1.as_mut_slice() {
                    *v = rng.random::<f64>() - 0.5;
                }
                for v in k2.as_mut_slice() {
                    *v = rng.random::<f64>() * 0.5;
                }
            }
        }
        let a0 = assemble_certificate(&spec, &params, PowerOpts::default())
            .unwrap()
            .sensitivity_a;
        for lp in &mut params.layers {
            if let LayerParams::ResidualD { k1, .. } = lp {
                k1.scale(2.0);
            }
        }
        let a1 = assemble_certificate(&spec, &params, PowerOpts::default())
            .unwrap()
            .sensitivity_a;
        assert!(a1 >= a0);
    }

    #[test]
    fn s_sensitivity_constant_ignores_residual_depth() {
        let mut certs = Vec::new();
        for m in 1..=4 {
            let spec = admissible_s_spec(m);
            // seed fixed so the pooling filters are identical across m:
            // they are drawn after the same number of rng draws only when we
            // construct them explicitly, so rebuild with shared filters
            let mut params = make_admissible_s(&spec, 60);
            let shared = make_admissible_s(&admissible_s_spec(1), 60);
            // overwrite non-residual layers with the m=1 ones
            let src: Vec<&LayerParams> = shared.layers.iter().collect();
            let m1 = 1usize;
            if let (LayerParams::Conv { .. }, _) = (&src[0], 0) {
                params.layers[0] = src[0].clone();
            }
            params.layers[m + 1] = src[m1 + 1].clone();
            params.layers[2 * m + 1] = src[2 * m1 + 1].clone();
            let last = params.layers.len() - 1;
            params.layers[last] = src[src.len() - 1].clone();
            let cert = assemble_certificate(&spec, &params, PowerOpts::default()).unwrap();
            certs.push(cert.sensitivity_a);
        }
        for a in &certs[1..] {
            assert_eq!(a.to_bits(), certs[0].to_bits());
        }
    }

    #[test]
    fn growth_verification_passes_on_admissible_s_networks() {
        let spec = admissible_s_spec(1);
        let params = make_admissible_s(&spec, 70);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let inputs: Vec<Feature64> = (0..5)
            .map(|_| Feature64::from_fn(8, 8, 1, |_, _, _| rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        let report = verify_growth(&spec, &params, &inputs, PowerOpts::default()).unwrap();
        assert!(report.skipped.is_none());
        assert_eq!(report.violations, 0);
        let pairs: Vec<(Feature64, Feature64)> = (0..5)
            .map(|_| {
                (
                    Feature64::from_fn(8, 8, 1, |_, _, _| rng.random::<f64>() * 2.0 - 1.0),
                    Feature64::from_fn(8, 8, 1, |_, _, _| rng.random::<f64>() * 2.0 - 1.0),
                )
            })
            .collect();
        let sreport = verify_sensitivity(&spec, &params, &pairs, PowerOpts::default()).unwrap();
        assert!(sreport.skipped.is_none());
        assert_eq!(sreport.violations, 0);
    }

    #[test]
    fn violated_hypotheses_skip_verification_with_diagnostic() {
        let spec = admissible_s_spec(1);
        let mut params = make_admissible_s(&spec, 80);
        if let LayerParams::Dense { weight, .. } = params.layers.last_mut().unwrap() {
            *weight *= 50.0;
        }
        let report = verify_growth(&spec, &params, &[], PowerOpts::default()).unwrap();
        let msg = report.skipped.expect("expected skipped verification");
        assert!(msg.contains("dense_norm"));
    }

    #[test]
    fn zero_network_growth_holds_trivially() {
        let spec = admissible_s_spec(2);
        let params = ParamStore::zeros(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let inputs: Vec<Feature64> = (0..3)
            .map(|_| Feature64::from_fn(8, 8, 1, |_, _, _| rng.random::<f64>()))
            .collect();
        let report = verify_growth(&spec, &params, &inputs, PowerOpts::default()).unwrap();
        assert_eq!(report.violations, 0);
        for e in &report.entries {
            assert_eq!(e.output_norm, 0.0);
        }
    }

    #[test]
    fn certificate_render_is_stable() {
        let spec = admissible_s_spec(1);
        let params = make_admissible_s(&spec, 90);
        let cert = assemble_certificate(&spec, &params, PowerOpts::default()).unwrap();
        let a = cert.render();
        let b = assemble_certificate(&spec, &params, PowerOpts::default())
            .unwrap()
            .render();
        assert_eq!(a, b);
        assert!(a.contains("growth.c"));
        assert!(a.contains("layer[00].conv.opnorm_l2"));
    }
}
