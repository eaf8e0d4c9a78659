//! Brute-force reference suites: dense-matrix equivalence over a shape grid,
//! the explicit circulant block template, the filter/matrix norm relation,
//! the adjoint pairing identity, and finite-difference gradients. These are
//! the independent routes the fast paths are checked against; the CLI
//! exposes them under the `oracle` subcommand.

use crate::conv::{adjoint_conv, conv2d, materialize, norm_relation_check, PaddingMode};
use crate::error::Result;
use crate::network::{NetworkSpec, ParamStore};
use crate::tensor::{dot, norm_slice, NormKind};
use crate::train::loss_value;
use crate::{Feature64, Filter64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;

/// Central finite differences of the training objective over the trainable
/// parameter vector. Pure forward evaluations; independent of the
/// reverse-mode path it is used to check.
pub fn finite_diff_gradients(
    spec: &NetworkSpec,
    params: &ParamStore,
    images: &[Feature64],
    labels: &[Vec<f64>],
    alpha: f64,
    h: f64,
) -> Result<Vec<f64>> {
    let base = params.trainable();
    let mut grads = Vec::with_capacity(base.len());
    let mut work = params.clone();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        work.set_trainable(&plus)?;
        let up = loss_value(spec, &work, images, labels, alpha)?;
        let mut minus = base.clone();
        minus[i] -= h;
        work.set_trainable(&minus)?;
        let down = loss_value(spec, &work, images, labels, alpha)?;
        grads.push((up - down) / (2.0 * h));
    }
    Ok(grads)
}

/// Outcome of one oracle suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Worst relative (or absolute, for the adjoint suite) deviation seen.
    pub worst: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn rand_feature(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> Feature64 {
    Feature64::from_fn(h, w, d, |_, _, _| rng.random::<f64>() * 2.0 - 1.0)
}

fn rand_filter(rng: &mut ChaCha8Rng, n: usize, di: usize, dj: usize) -> Filter64 {
    Filter64::from_fn(n, di, dj, |_, _, _, _| rng.random::<f64>() * 2.0 - 1.0)
}

/// Direct convolution versus the materialized matrix, over the full grid
/// `h, w <= 8`, `d_in, d_out <= 3`, `n in {2, 3}`, `stride in {1, 2}`, both
/// paddings, with `per_shape` random instances each; agreement to relative
/// 1e-12.
pub fn matrix_equivalence_grid(per_shape: usize, seed: u64) -> SuiteReport {
    let mut shapes = Vec::new();
    for h in 1..=8usize {
        for w in 1..=8usize {
            for d_in in 1..=3usize {
                for d_out in 1..=3usize {
                    for n in [2usize, 3] {
                        for stride in [1usize, 2] {
                            for pad in [PaddingMode::Zero, PaddingMode::Periodic] {
                                shapes.push((h, w, d_in, d_out, n, stride, pad));
                            }
                        }
                    }
                }
            }
        }
    }
    let results: Vec<(usize, usize, f64)> = shapes
        .par_iter()
        .enumerate()
        .map(|(i, &(h, w, d_in, d_out, n, stride, pad))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut failures = 0usize;
            let mut worst = 0.0f64;
            for _ in 0..per_shape {
                let k = rand_filter(&mut rng, n, d_in, d_out);
                let x = rand_feature(&mut rng, h, w, d_in);
                let a = materialize(&k, h, w, stride, pad).expect("desk-scale materialization");
                let via_matrix = a.matvec(&x.vectorize());
                let direct = conv2d(&x, &k, stride, pad)
                    .expect("validated shapes")
                    .vectorize();
                let scale = norm_slice(&direct, NormKind::Linf)
                    .max(norm_slice(&via_matrix, NormKind::Linf))
                    .max(1.0);
                let dev = via_matrix
                    .iter()
                    .zip(&direct)
                    .map(|(u, v)| (u - v).abs())
                    .fold(0.0f64, f64::max)
                    / scale;
                worst = worst.max(dev);
                if dev > 1e-12 {
                    failures += 1;
                }
            }
            (per_shape, failures, worst)
        })
        .collect();
    let mut cases = 0;
    let mut failures = 0;
    let mut worst = 0.0f64;
    for (c, f, w) in results {
        cases += c;
        failures += f;
        worst = worst.max(w);
    }
    SuiteReport {
        name: "matrix-equivalence".into(),
        cases,
        failures,
        worst,
    }
}

/// Independent construction of the 32x32 matrix for a 3x3 filter with two
/// channels on a 4x4 periodic grid, from the circulant block template: block
/// `(i, j)` lays out, per output row, the kernel rows as `(U2, U3, 0, U1)`
/// cyclically, and each `U` repeats the same pattern over kernel columns.
pub fn block_template_matrix(filter: &Filter64) -> Vec<f64> {
    assert_eq!(
        (filter.n(), filter.d_in(), filter.d_out()),
        (3, 2, 2),
        "template is stated for n=3, two channels"
    );
    // cyclic offset -> kernel index (0-based): 0 -> row 1, 1 -> row 2,
    // 2 -> unreachable, 3 -> row 0
    fn tap(offset: usize) -> Option<usize> {
        match offset {
            0 => Some(1),
            1 => Some(2),
            3 => Some(0),
            _ => None,
        }
    }
    let mut mat = vec![0.0f64; 32 * 32];
    for out_ch in 0..2 {
        for in_ch in 0..2 {
            for out_row in 0..4 {
                for out_col in 0..4 {
                    for in_row in 0..4 {
                        for in_col in 0..4 {
                            let l = tap((in_row + 4 - out_row) % 4);
                            let m = tap((in_col + 4 - out_col) % 4);
                            let v = match (l, m) {
                                (Some(l), Some(m)) => filter.get(l, m, in_ch, out_ch),
                                _ => 0.0,
                            };
                            let row = out_ch * 16 + out_row * 4 + out_col;
                            let col = in_ch * 16 + in_row * 4 + in_col;
                            mat[row * 32 + col] = v;
                        }
                    }
                }
            }
        }
    }
    mat
}

/// Compare the materialized matrix against [`block_template_matrix`] for
/// random two-channel 3x3 filters; the layouts must agree exactly.
pub fn block_template_suite(count: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..count {
        let k = rand_filter(&mut rng, 3, 2, 2);
        let a = materialize(&k, 4, 4, 1, PaddingMode::Periodic).expect("32x32");
        let want = block_template_matrix(&k);
        let dev = a
            .data
            .iter()
            .zip(&want)
            .map(|(u, v)| (u - v).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(dev);
        if dev != 0.0 {
            failures += 1;
        }
    }
    SuiteReport {
        name: "block-template".into(),
        cases: count,
        failures,
        worst,
    }
}

/// Entrywise norm relation between filters and their periodic stride-1
/// matrices, for `p in {1, 2}`.
pub fn norm_relation_suite(count: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..count {
        let n = rng.random_range(2..4usize);
        let d_in = rng.random_range(1..4usize);
        let d_out = rng.random_range(1..4usize);
        let h = rng.random_range(n..9usize);
        let w = rng.random_range(n..9usize);
        let k = rand_filter(&mut rng, n, d_in, d_out);
        for p in [1.0, 2.0] {
            let rel = norm_relation_check(&k, h, w, p, PaddingMode::Periodic)
                .expect("periodic relation");
            let dev = (rel.lhs - rel.rhs).abs() / rel.lhs.abs().max(rel.rhs.abs()).max(1.0);
            worst = worst.max(dev);
            if !rel.equal {
                failures += 1;
            }
        }
    }
    SuiteReport {
        name: "norm-relation".into(),
        cases: count * 2,
        failures,
        worst,
    }
}

/// Pairing identity `<K*u, x> = <u, adjoint(x, K)>` on unit-scaled random
/// triples, to 1e-10 absolute.
pub fn adjoint_identity_suite(count: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..count {
        let n = rng.random_range(1..4usize);
        let d_in = rng.random_range(1..4usize);
        let d_out = rng.random_range(1..4usize);
        let h = rng.random_range(1..9usize);
        let w = rng.random_range(1..9usize);
        let pad = if rng.random::<bool>() {
            PaddingMode::Periodic
        } else {
            PaddingMode::Zero
        };
        let k = rand_filter(&mut rng, n, d_in, d_out);
        let mut u = rand_feature(&mut rng, h, w, d_in);
        let un = u.norm(NormKind::L2);
        if un > 0.0 {
            u.scale(1.0 / un);
        }
        let mut x = rand_feature(&mut rng, h, w, d_out);
        let xn = x.norm(NormKind::L2);
        if xn > 0.0 {
            x.scale(1.0 / xn);
        }
        let ku = conv2d(&u, &k, 1, pad).expect("validated shapes");
        let adj = adjoint_conv(&x, &k, pad).expect("validated shapes");
        let dev = (dot(ku.as_slice(), x.as_slice()) - dot(u.as_slice(), adj.as_slice())).abs();
        worst = worst.max(dev);
        if dev > 1e-10 {
            failures += 1;
        }
    }
    SuiteReport {
        name: "adjoint-identity".into(),
        cases: count,
        failures,
        worst,
    }
}

/// Sparsity cap of materialized matrices: at most `n^2 h w d_in d_out`
/// nonzero entries.
pub fn sparsity_suite(count: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..count {
        let n = rng.random_range(2..4usize);
        let d_in = rng.random_range(1..4usize);
        let d_out = rng.random_range(1..4usize);
        let h = rng.random_range(1..9usize);
        let w = rng.random_range(1..9usize);
        let pad = if rng.random::<bool>() {
            PaddingMode::Periodic
        } else {
            PaddingMode::Zero
        };
        let k = rand_filter(&mut rng, n, d_in, d_out);
        let a = materialize(&k, h, w, 1, pad).expect("desk scale");
        let cap = n * n * h * w * d_in * d_out;
        let nnz = a.count_nonzeros();
        worst = worst.max(nnz as f64 / cap as f64);
        if nnz > cap {
            failures += 1;
        }
    }
    SuiteReport {
        name: "sparsity".into(),
        cases: count,
        failures,
        worst,
    }
}

/// The standard oracle run backing the CLI subcommand: the full shape grid
/// plus template, norm-relation, adjoint, and sparsity suites.
pub fn run_all(per_shape: usize, seed: u64) -> Vec<SuiteReport> {
    vec![
        matrix_equivalence_grid(per_shape, seed),
        block_template_suite(25, seed.wrapping_add(1)),
        norm_relation_suite(100, seed.wrapping_add(2)),
        adjoint_identity_suite(200, seed.wrapping_add(3)),
        sparsity_suite(100, seed.wrapping_add(4)),
    ]
}

/// One line per suite, stable order.
pub fn render_reports(reports: &[SuiteReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        let _ = writeln!(
            s,
            "{}: {status} ({} cases, {} failures, worst deviation {:.3e})",
            r.name, r.cases, r.failures, r.worst
        );
    }
    s
}
