//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use stbl_core::cert::{
    assemble_certificate, check_lemma_nonexpansive, dense_opnorm_linf, opnorm_linf,
    rescale_filter_l2, verify_growth, verify_sensitivity, LemmaOperator, PowerOpts,
};
use stbl_core::conv::PaddingMode;
use stbl_core::data::SyntheticSpec;
use stbl_core::inclusion::{
    bound_envelope, integrate, step_fb, Activation, EnvelopeKind, InclusionProblem,
    InclusionVariant, Schedule, Trajectory,
};
use stbl_core::layer::{pad_channels, pool2, pool_global, relu_slice};
use stbl_core::network::{LayerKind, LayerParams, NetworkSpec, ParamStore, Variant};
use stbl_core::oracle;
use stbl_core::robustness::{evaluate_under_noise, NoiseKind, NoiseSpec};
use stbl_core::tensor::{norm_slice, Feature, NormKind};
use stbl_core::train::{accuracy, loss_total, train, InitScheme, TrainConfig};
use stbl_core::{Feature64, Filter64};
use std::sync::OnceLock;
use std::time::Instant;

fn pass(criterion: usize, name: &str, detail: String) {
    println!("acceptance {criterion:02} ({name}): PASS - {detail}");
}

// ---------------------------------------------------------------------------
// 1. Convolution matrix oracle over the full shape grid
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_matrix_oracle_grid() {
    let start = Instant::now();
    let report = oracle::matrix_equivalence_grid(50, 0xACCE01);
    let elapsed = start.elapsed();
    assert_eq!(report.failures, 0, "worst deviation {}", report.worst);
    assert!(
        elapsed.as_secs() < 60,
        "grid took {:.1}s, budget is 60s",
        elapsed.as_secs_f64()
    );
    pass(
        1,
        "matrix oracle grid",
        format!(
            "{} instances, worst relative deviation {:.2e}, {:.1}s",
            report.cases,
            report.worst,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Explicit circulant block template
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_block_template() {
    let report = oracle::block_template_suite(50, 0xACCE02);
    assert_eq!(report.failures, 0);
    assert_eq!(report.worst, 0.0, "template must match exactly");
    pass(
        2,
        "block template",
        format!("{} random filters reproduced exactly", report.cases),
    );
}

// ---------------------------------------------------------------------------
// 3. Filter/matrix norm relation
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_norm_relation() {
    let report = oracle::norm_relation_suite(100, 0xACCE03);
    assert_eq!(report.failures, 0, "worst deviation {}", report.worst);
    pass(
        3,
        "norm relation",
        format!(
            "100 filters x p in {{1,2}}, worst relative deviation {:.2e}",
            report.worst
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Adjoint pairing identity
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_adjoint_identity() {
    let report = oracle::adjoint_identity_suite(200, 0xACCE04);
    assert_eq!(report.failures, 0, "worst deviation {}", report.worst);
    pass(
        4,
        "adjoint identity",
        format!("200 triples, worst absolute deviation {:.2e}", report.worst),
    );
}

// ---------------------------------------------------------------------------
// 5. Non-expansiveness / isometry suites
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_nonexpansiveness_suites() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE05);
    let mut violations = 0usize;
    for _ in 0..1000 {
        let (h, w, d) = (
            rng.random_range(1..9),
            rng.random_range(1..9),
            rng.random_range(1..4),
        );
        let x = Feature::from_fn(h, w, d, |_, _, _| rng.random::<f64>() * 4.0 - 2.0);
        let p = pool2(&x);
        if p.norm(NormKind::L2) > x.norm(NormKind::L2) + 1e-14 {
            violations += 1;
        }
        if p.norm(NormKind::Linf) > x.norm(NormKind::Linf) + 1e-14 {
            violations += 1;
        }
        let g = pool_global(&x);
        if norm_slice(&g, NormKind::L2) > x.norm(NormKind::L2) + 1e-14 {
            violations += 1;
        }
        if norm_slice(&g, NormKind::Linf) > x.norm(NormKind::Linf) + 1e-14 {
            violations += 1;
        }
    }
    for _ in 0..1000 {
        let len = rng.random_range(1..24);
        let x: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
        let y: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
        let (xp, yp) = (relu_slice(&x), relu_slice(&y));
        for kind in [NormKind::L1, NormKind::L2, NormKind::Linf] {
            if norm_slice(&xp, kind) > norm_slice(&x, kind) + 1e-14 {
                violations += 1;
            }
            let dp: Vec<f64> = xp.iter().zip(&yp).map(|(a, b)| a - b).collect();
            let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            if norm_slice(&dp, kind) > norm_slice(&d, kind) + 1e-14 {
                violations += 1;
            }
        }
    }
    for _ in 0..1000 {
        let d1 = rng.random_range(1..4);
        let d2 = d1 + rng.random_range(1..4);
        let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
        let x = Feature::from_fn(h, w, d1, |_, _, _| rng.random::<f64>() * 4.0 - 2.0);
        let e = pad_channels(&x, d2).unwrap();
        for kind in [NormKind::L1, NormKind::L2, NormKind::Linf] {
            if e.norm(kind) != x.norm(kind) {
                violations += 1;
            }
        }
    }
    assert_eq!(violations, 0);
    pass(
        5,
        "non-expansiveness suites",
        "pooling, activation, and channel padding: 1000 cases each, zero violations".into(),
    );
}

// ---------------------------------------------------------------------------
// 6. Non-expansiveness of the symmetric residual map
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_symmetric_map_nonexpansive() {
    let sqrt2 = std::f64::consts::SQRT_2;
    let results: Vec<(usize, f64)> = (0..50u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xACCE06 + i);
            let d = rng.random_range(1..9usize);
            let mut a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let top = a.clone().svd(false, false).singular_values[0];
            if top > 0.0 {
                a *= sqrt2 / top * (0.2 + 0.8 * rng.random::<f64>());
            }
            let b: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
            let report =
                check_lemma_nonexpansive(&LemmaOperator::Dense(&a), &b, 100_000, 1000 + i)
                    .unwrap();
            assert!(report.hypothesis, "rescaled operator must satisfy the cap");
            (report.violations, report.max_ratio)
        })
        .collect();
    let total_violations: usize = results.iter().map(|r| r.0).sum();
    let max_ratio = results.iter().map(|r| r.1).fold(0.0f64, f64::max);
    assert_eq!(total_violations, 0);

    // explicit expansion witness for a scalar operator above the cap
    let m = DMatrix::from_row_slice(1, 1, &[2.1]);
    let witness = check_lemma_nonexpansive(&LemmaOperator::Dense(&m), &[0.0], 10_000, 6).unwrap();
    assert!(!witness.hypothesis);
    assert!(witness.max_ratio > 1.0);
    pass(
        6,
        "symmetric residual map",
        format!(
            "50 operators x 1e5 pairs, zero violations (max ratio {:.9}); \
             expansion witness at 2.1 has ratio {:.3}",
            max_ratio, witness.max_ratio
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Decay-variant growth and sensitivity bounds
// ---------------------------------------------------------------------------

fn admissible_d_network(m: usize, seed: u64) -> (NetworkSpec, ParamStore) {
    let spec = NetworkSpec {
        variant: Variant::ResNetD,
        m,
        height: 8,
        width: 8,
        depth: 1,
        d1: 2,
        classes: 2,
        use_batchnorm: false,
        padding: PaddingMode::Periodic,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::zeros(&spec);
    for idx in 0..spec.layer_count() {
        match (&spec.layer_kind(idx), &mut params.layers[idx]) {
            (LayerKind::ConvFirst, LayerParams::Conv { filter, bias }) => {
                let mut k = Filter64::from_fn(3, 1, 2, |_, _, _, _| rng.random::<f64>() - 0.5);
                let norm = opnorm_linf(&k, 8, 8, spec.padding);
                if norm > 0.95 {
                    k.scale(0.95 / norm);
                }
                *filter = k;
                for v in bias.iter_mut() {
                    *v = (rng.random::<f64>() - 0.5) * 0.2;
                }
            }
            (LayerKind::Residual { scale }, LayerParams::ResidualD { k1, k2, b1, b2, .. }) => {
                let d = spec.scale_dims(*scale).2;
                *k1 = Filter64::from_fn(3, d, d, |_, _, _, _| (rng.random::<f64>() - 0.5) * 0.6);
                *k2 = Filter64::from_fn(3, d, d, |_, _, _, _| rng.random::<f64>() * 0.3);
                for v in b1.iter_mut().chain(b2.iter_mut()) {
                    *v = (rng.random::<f64>() - 0.5) * 0.2;
                }
            }
            (LayerKind::Pool { scale }, LayerParams::Pool { filter, bias }) => {
                let d = spec.scale_dims(*scale).2;
                *filter = Filter64::from_fn(3, d, 2 * d, |_, _, _, _| {
                    (rng.random::<f64>() - 0.5) * 0.5
                });
                for v in bias.iter_mut() {
                    *v = (rng.random::<f64>() - 0.5) * 0.2;
                }
            }
            (LayerKind::Dense, LayerParams::Dense { weight, bias }) => {
                for v in weight.iter_mut() {
                    *v = rng.random::<f64>() - 0.5;
                }
                let norm = dense_opnorm_linf(weight);
                if norm > 0.95 {
                    *weight *= 0.95 / norm;
                }
                for v in bias.iter_mut() {
                    *v = (rng.random::<f64>() - 0.5) * 0.2;
                }
            }
            _ => {}
        }
    }
    (spec, params)
}

#[test]
fn criterion_07_decay_variant_bounds() {
    let opts = PowerOpts::default();
    let outcomes: Vec<(usize, usize)> = (0..200u64)
        .into_par_iter()
        .map(|i| {
            let m = 1 + (i % 3) as usize;
            let (spec, params) = admissible_d_network(m, 0xACCE07 + i);
            let mut rng = ChaCha8Rng::seed_from_u64(0x708 + i);
            let inputs: Vec<Feature64> = (0..10)
                .map(|_| Feature::from_fn(8, 8, 1, |_, _, _| rng.random::<f64>() * 2.0 - 1.0))
                .collect();
            let growth = verify_growth(&spec, &params, &inputs, opts).unwrap();
            assert!(
                growth.skipped.is_none(),
                "constructed network must be admissible"
            );
            let pairs: Vec<(Feature64, Feature64)> = (0..10)
                .map(|_| {
                    (
                        Feature::from_fn(8, 8, 1, |_, _, _| rng.random::<f64>() * 2.0 - 1.0),
                        Feature::from_fn(8, 8, 1, |_, _, _| rng.random::<f64>() * 2.0 - 1.0),
                    )
                })
                .collect();
            let sens = verify_sensitivity(&spec, &params, &pairs, opts).unwrap();
            assert!(sens.skipped.is_none());
            (growth.violations, sens.violations)
        })
        .collect();
    let growth_violations: usize = outcomes.iter().map(|o| o.0).sum();
    let sens_violations: usize = outcomes.iter().map(|o| o.1).sum();
    assert_eq!(growth_violations, 0);
    assert_eq!(sens_violations, 0);
    pass(
        7,
        "decay-variant bounds",
        "200 admissible networks x 10 inputs and 10 pairs: zero violations".into(),
    );
}

// ---------------------------------------------------------------------------
// 8. Symmetric-variant depth independence
// ---------------------------------------------------------------------------

fn admissible_s_network(m: usize, seed: u64) -> (NetworkSpec, ParamStore) {
    let spec = NetworkSpec {
        variant: Variant::ResNetS,
        m,
        height: 8,
        width: 8,
        depth: 1,
        d1: 2,
        classes: 2,
        use_batchnorm: false,
        padding: PaddingMode::Periodic,
    };
    let opts = PowerOpts::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::zeros(&spec);
    for idx in 0..spec.layer_count() {
        match (&spec.layer_kind(idx), &mut params.layers[idx]) {
            (LayerKind::ConvFirst, LayerParams::Conv { filter, bias }) => {
                let k = Filter64::from_fn(3, 1, 2, |_, _, _, _| rng.random::<f64>() - 0.5);
                *filter = rescale_filter_l2(&k, 8, 8, 1, spec.padding, 0.95, opts).unwrap().0;
                for v in bias.iter_mut() {
                    *v = (rng.random::<f64>() - 0.5) * 0.2;
                }
            }
            (LayerKind::Residual { scale }, LayerParams::ResidualS { k, b1, b2, .. }) => {
                let (h, w, d) = spec.scale_dims(*scale);
                let kk = Filter64::from_fn(3, d, d, |_, _, _, _| rng.random::<f64>() - 0.5);
                *k = rescale_filter_l2(&kk, h, w, 1, spec.padding, 1.4, opts).unwrap().0;
                for v in b1.iter_mut().chain(b2.iter_mut()) {
                    *v = (rng.random::<f64>() - 0.5) * 0.2;
                }
            }
            (LayerKind::Pool { scale }, LayerParams::Pool { filter, bias }) => {
                let (h, w, d) = spec.scale_dims(*scale);
                let kk = Filter64::from_fn(3, d, 2 * d, |_, _, _, _| rng.random::<f64>() - 0.5);
                *filter = rescale_filter_l2(&kk, h, w, 2, spec.padding, 1.5, opts).unwrap().0;
                for v in bias.iter_mut() {
                    *v = (rng.random::<f64>() - 0.5) * 0.2;
                }
            }
            (LayerKind::Dense, LayerParams::Dense { weight, bias }) => {
                for v in weight.iter_mut() {
                    *v = rng.random::<f64>() - 0.5;
                }
                let norm = stbl_core::cert::dense_opnorm_l2(weight, opts).unwrap().0;
                if norm > 0.95 {
                    *weight *= 0.95 / norm;
                }
                for v in bias.iter_mut() {
                    *v = (rng.random::<f64>() - 0.5) * 0.2;
                }
            }
            _ => {}
        }
    }
    (spec, params)
}

#[test]
fn criterion_08_symmetric_depth_independence() {
    // build networks for m = 1..6 sharing the exact non-residual parameters
    let (base_spec, base_params) = admissible_s_network(1, 0xACCE08);
    let opts = PowerOpts::default();
    let mut constants = Vec::new();
    let mut total_pairs = 0usize;
    let mut violations = 0usize;
    for m in 1..=6usize {
        let (spec, mut params) = admissible_s_network(m, 0xACCE08 + m as u64);
        params.layers[0] = base_params.layers[0].clone();
        params.layers[m + 1] = base_params.layers[2].clone(); // first pooling (m=1 index 2)
        params.layers[2 * m + 1] = base_params.layers[3].clone(); // second pooling
        let last = params.layers.len() - 1;
        params.layers[last] = base_params.layers[base_params.layers.len() - 1].clone();
        let cert = assemble_certificate(&spec, &params, opts).unwrap();
        assert!(cert.sensitivity_valid, "m={m} network must be admissible");
        constants.push(cert.sensitivity_a);
        let mut rng = ChaCha8Rng::seed_from_u64(0x808 + m as u64);
        let pairs: Vec<(Feature64, Feature64)> = (0..334)
            .map(|_| {
                (
                    Feature::from_fn(8, 8, 1, |_, _, _| rng.random::<f64>() * 2.0 - 1.0),
                    Feature::from_fn(8, 8, 1, |_, _, _| rng.random::<f64>() * 2.0 - 1.0),
                )
            })
            .collect();
        let report = verify_sensitivity(&spec, &params, &pairs, opts).unwrap();
        assert!(report.skipped.is_none());
        total_pairs += report.entries.len();
        violations += report.violations;
    }
    let _ = base_spec;
    for a in &constants[1..] {
        assert_eq!(
            a.to_bits(),
            constants[0].to_bits(),
            "sensitivity constant must be bitwise identical across the depth sweep"
        );
    }
    assert!(total_pairs >= 2000);
    assert_eq!(violations, 0);
    pass(
        8,
        "symmetric depth independence",
        format!(
            "a = {:.12e} bitwise identical for m in 1..=6; {} pairs, zero violations",
            constants[0], total_pairs
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Continuous-time integration and envelopes
// ---------------------------------------------------------------------------

fn scalar_exponential(horizon: f64) -> InclusionProblem {
    InclusionProblem::general(
        Schedule::constant(DMatrix::from_row_slice(1, 1, &[1.0])),
        Schedule::constant(DMatrix::from_row_slice(1, 1, &[-1.0])),
        Schedule::constant(DVector::zeros(1)),
        Schedule::constant(DVector::zeros(1)),
        horizon,
        DVector::from_column_slice(&[1.0]),
    )
    .unwrap()
}

fn random_schedule_times(rng: &mut ChaCha8Rng, horizon: f64) -> Vec<f64> {
    let knots = rng.random_range(1..4usize);
    let mut times = vec![0.0];
    for _ in 1..knots {
        times.push(rng.random::<f64>() * horizon);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    times
}

fn random_problem(rng: &mut ChaCha8Rng, variant: InclusionVariant) -> InclusionProblem {
    let d = rng.random_range(1..9usize);
    let horizon = 1.0;
    let times = random_schedule_times(rng, horizon);
    let scale_to = |m: DMatrix<f64>, cap: f64, rng: &mut ChaCha8Rng| -> DMatrix<f64> {
        let top = m.clone().svd(false, false).singular_values[0];
        if top > 0.0 {
            let target = cap * (0.3 + 0.7 * rng.random::<f64>());
            m * (target / top)
        } else {
            m
        }
    };
    let mats = |rng: &mut ChaCha8Rng, nonneg: bool, times: &[f64]| -> Schedule<DMatrix<f64>> {
        let values: Vec<DMatrix<f64>> = times
            .iter()
            .map(|_| {
                let m = DMatrix::from_fn(d, d, |_, _| {
                    if nonneg {
                        rng.random::<f64>()
                    } else {
                        rng.random::<f64>() * 2.0 - 1.0
                    }
                });
                scale_to(m, 1.2, rng)
            })
            .collect();
        Schedule::new(times.to_vec(), values).unwrap()
    };
    let vecs = |rng: &mut ChaCha8Rng, times: &[f64]| -> Schedule<DVector<f64>> {
        let values: Vec<DVector<f64>> = times
            .iter()
            .map(|_| DVector::from_fn(d, |_, _| rng.random::<f64>() - 0.5))
            .collect();
        Schedule::new(times.to_vec(), values).unwrap()
    };
    let x0 = DVector::from_fn(d, |_, _| rng.random::<f64>());
    let b1 = vecs(rng, &times);
    let b2 = vecs(rng, &times);
    match variant {
        InclusionVariant::General => InclusionProblem::general(
            mats(rng, false, &times),
            mats(rng, false, &times),
            b1,
            b2,
            horizon,
            x0,
        )
        .unwrap(),
        InclusionVariant::Decay => InclusionProblem::decay(
            mats(rng, false, &times),
            mats(rng, true, &times),
            b1,
            b2,
            horizon,
            x0,
        )
        .unwrap(),
        InclusionVariant::Symmetric => {
            InclusionProblem::symmetric(mats(rng, false, &times), b1, b2, horizon, x0).unwrap()
        }
    }
}

#[test]
fn criterion_09_continuous_time() {
    let start = Instant::now();

    // scalar exponential at the stated step size
    let p = scalar_exponential(1.0);
    let traj = integrate(&p, 1e-4).unwrap();
    let err = (traj.final_state()[0] - std::f64::consts::E).abs() / std::f64::consts::E;
    assert!(err <= 1e-3, "relative error {err}");

    // observed convergence order on the closed-form solution
    let mut errors = Vec::new();
    for k in 0..4 {
        let tau = 1e-2 / 2f64.powi(k);
        let t = integrate(&p, tau).unwrap();
        errors.push((t.final_state()[0] - std::f64::consts::E).abs());
    }
    for w in errors.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(
            (0.8..=1.2).contains(&order),
            "observed order {order} outside [0.8, 1.2]"
        );
    }

    // envelope campaign over random admissible problems
    let violations: usize = (0..500u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xACCE09 + i);
            let variant = match i % 3 {
                0 => InclusionVariant::General,
                1 => InclusionVariant::Decay,
                _ => InclusionVariant::Symmetric,
            };
            let problem = random_problem(&mut rng, variant);
            let tau = 2e-3;
            let traj = integrate(&problem, tau).unwrap();
            let mut alt = problem.clone();
            alt.x0 = DVector::from_fn(problem.dim, |_, _| rng.random::<f64>());
            let other = integrate(&alt, tau).unwrap();
            let mut v = 0usize;
            let mut kinds: Vec<EnvelopeKind> =
                vec![EnvelopeKind::GrowthGeneral, EnvelopeKind::SensitivityGeneral];
            match variant {
                InclusionVariant::Decay => kinds.push(EnvelopeKind::GrowthDecay),
                InclusionVariant::Symmetric => {
                    kinds.push(EnvelopeKind::GrowthSymmetric);
                    kinds.push(EnvelopeKind::SensitivitySymmetric);
                }
                InclusionVariant::General => {}
            }
            for kind in kinds {
                let needs_pair = matches!(
                    kind,
                    EnvelopeKind::SensitivityGeneral | EnvelopeKind::SensitivitySymmetric
                );
                let rep =
                    bound_envelope(&problem, &traj, needs_pair.then_some(&other), kind).unwrap();
                v += rep.violations;
            }
            v
        })
        .sum();
    assert_eq!(violations, 0);

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 120,
        "continuous-time suite took {:.1}s, budget is 120s",
        elapsed.as_secs_f64()
    );
    pass(
        9,
        "continuous time",
        format!(
            "exponential error {err:.2e} at tau=1e-4; order-1 convergence confirmed; \
             500 problems x all envelopes, zero violations; {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Discrete residual block approaches the integrated dynamics
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_discrete_continuous_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE10);
    let d = 4;
    let mut a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let top = a.clone().svd(false, false).singular_values[0];
    a *= 1.3 / top;
    let b1 = DVector::from_fn(d, |_, _| rng.random::<f64>() - 0.5);
    let b2 = DVector::from_fn(d, |_, _| rng.random::<f64>() - 0.5);
    let x0 = DVector::from_fn(d, |_, _| rng.random::<f64>());
    let problem = InclusionProblem::symmetric(
        Schedule::constant(a.clone()),
        Schedule::constant(b1.clone()),
        Schedule::constant(b2.clone()),
        1.0,
        x0.clone(),
    )
    .unwrap();
    let reference = integrate(&problem, 1e-5).unwrap();
    let target = reference.final_state();

    let a2 = a.transpose();
    let mut diffs = Vec::new();
    for n in [10usize, 20, 40, 80] {
        let tau = 1.0 / n as f64;
        let mut x = x0.clone();
        for _ in 0..n {
            // a shared-weight symmetric residual layer is exactly one
            // splitting step with the layer count playing 1/tau
            x = step_fb(&x, tau, &a, &a2, &b1, &b2, Activation::ReLU);
        }
        let diff = (x - target).amax();
        diffs.push(diff);
    }
    for w in diffs.windows(2) {
        assert!(
            w[1] < w[0],
            "sup-norm differences must decrease strictly: {diffs:?}"
        );
    }
    pass(
        10,
        "discrete-continuous consistency",
        format!("sup-norm differences {diffs:?} strictly decreasing"),
    );
}

// ---------------------------------------------------------------------------
// 11. Analytic gradients match finite differences
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_gradient_check() {
    for variant in [Variant::ResNetD, Variant::ResNetS] {
        let spec = NetworkSpec {
            variant,
            m: 1,
            height: 8,
            width: 8,
            depth: 1,
            d1: 2,
            classes: 2,
            use_batchnorm: false,
            padding: PaddingMode::Periodic,
        };
        let mut params = stbl_core::train::init_params(&spec, InitScheme::Default, 3);
        let mut flat = params.trainable();
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE11);
        for v in flat.iter_mut() {
            if *v == 0.0 {
                *v = 0.05 * (rng.random::<f64>() - 0.5);
            }
        }
        params.set_trainable(&flat).unwrap();
        if variant == Variant::ResNetD {
            stbl_core::train::project_nonneg(&mut params);
        }
        let images: Vec<Feature64> = (0..3)
            .map(|_| Feature::from_fn(8, 8, 1, |_, _, _| rng.random::<f64>()))
            .collect();
        let labels: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let mut l = vec![0.0; 2];
                l[i % 2] = 1.0;
                l
            })
            .collect();
        let alpha = 1e-3;
        let analytic = loss_total(&spec, &params, &images, &labels, alpha)
            .unwrap()
            .grads
            .trainable();
        let numeric =
            oracle::finite_diff_gradients(&spec, &params, &images, &labels, alpha, 1e-5).unwrap();
        let mut worst = 0.0f64;
        for (a, g) in analytic.iter().zip(&numeric) {
            let rel = (a - g).abs() / a.abs().max(g.abs()).max(1.0);
            worst = worst.max(rel);
        }
        assert!(
            worst <= 1e-4,
            "variant {variant:?}: worst relative error {worst}"
        );
        pass(
            11,
            "gradient check",
            format!(
                "variant {variant:?}: {} parameters, worst relative error {worst:.2e}",
                analytic.len()
            ),
        );
    }
}

// ---------------------------------------------------------------------------
// 12 and 13 share one trained network
// ---------------------------------------------------------------------------

struct TrainedFixture {
    spec: NetworkSpec,
    params: ParamStore,
    test: stbl_core::data::Dataset,
    final_accuracy: f64,
}

fn trained_fixture() -> &'static TrainedFixture {
    static FIXTURE: OnceLock<TrainedFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        // reference configuration, frozen after the initial training run:
        // seed 7 reaches test accuracy 1.0 within 2000 steps
        let spec = NetworkSpec {
            variant: Variant::ResNetD,
            m: 1,
            height: 8,
            width: 8,
            depth: 1,
            d1: 4,
            classes: 2,
            use_batchnorm: true,
            padding: PaddingMode::Periodic,
        };
        let data = SyntheticSpec {
            classes: 2,
            height: 8,
            width: 8,
            depth: 1,
            train_per_class: 64,
            test_per_class: 32,
            noise: 0.2,
            seed: 5,
        }
        .generate()
        .unwrap();
        let config = TrainConfig {
            batch_size: 16,
            learning_rate: 0.1,
            decay_steps: 1500,
            total_steps: 2000,
            alpha: 1e-4,
            project_nonneg: true,
            spectral_rescale: false,
            seed: 7,
            eval_interval: 500,
        };
        let result = train(&spec, &config, &data).unwrap();
        assert!(result.diverged.is_none());
        let final_accuracy = accuracy(&spec, &result.params, &data.test).unwrap();
        TrainedFixture {
            spec,
            params: result.params,
            test: data.test,
            final_accuracy,
        }
    })
}

#[test]
fn criterion_12_desk_scale_training() {
    let fx = trained_fixture();
    assert!(
        fx.final_accuracy >= 0.95,
        "test accuracy {} below 0.95",
        fx.final_accuracy
    );
    pass(
        12,
        "desk-scale training",
        format!(
            "two-class 8x8 blobs, 2000 steps, seed 7: test accuracy {:.4}",
            fx.final_accuracy
        ),
    );
}

#[test]
fn criterion_13_robustness_harness() {
    let fx = trained_fixture();
    let noises = vec![
        NoiseSpec {
            kind: NoiseKind::Unstructured { sigma: 0.02 },
            seed: 13,
        },
        NoiseSpec {
            kind: NoiseKind::Unstructured { sigma: 0.05 },
            seed: 13,
        },
        NoiseSpec {
            kind: NoiseKind::Structured {
                epsilon: 0.25,
                x0: fx.test.images[0].clone(),
            },
            seed: 13,
        },
    ];
    let table = evaluate_under_noise(
        &fx.spec,
        &fx.params,
        &fx.test,
        &noises,
        PowerOpts::default(),
    )
    .unwrap();
    // the decay-variant sensitivity bound applies unconditionally, so the
    // certificate comparison is a hard assertion
    assert!(table.rows.iter().all(|r| r.bound_checked));
    let violations: usize = table.rows.iter().map(|r| r.bound_violations).sum();
    assert_eq!(violations, 0, "output shift exceeded the certificate bound");
    let acc_002 = table.rows[0].accuracy;
    let acc_005 = table.rows[1].accuracy;
    assert!(
        acc_005 <= acc_002,
        "accuracy must not improve with more noise: {acc_005} vs {acc_002}"
    );
    pass(
        13,
        "robustness harness",
        format!(
            "bound violations 0; accuracy {:.4} at sigma=0.02, {:.4} at sigma=0.05 \
             (clean {:.4})",
            acc_002, acc_005, table.clean_accuracy
        ),
    );
}

// ---------------------------------------------------------------------------
// Shared-trajectory sanity used by several criteria above
// ---------------------------------------------------------------------------

#[test]
fn trajectories_stay_in_the_orthant() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCEFF);
    let problem = random_problem(&mut rng, InclusionVariant::General);
    let traj: Trajectory = integrate(&problem, 1e-3).unwrap();
    assert!(traj
        .states
        .iter()
        .all(|s| s.iter().all(|v| *v >= 0.0)));
}
