//! Continuous-time side of the residual update: integrate the projected
//! dynamics
//!
//! ```text
//! x' in -N(x) - A2(t) s(A1(t) x + b1(t)) + b2(t),   x(t) >= 0
//! ```
//!
//! by forward-backward splitting (explicit force step, then projection onto
//! the nonnegative orthant), check the hypotheses the well-posedness result
//! needs, and evaluate the growth/sensitivity envelopes that bound every
//! trajectory.
//!
//! Weights and biases are piecewise-constant schedules, so all the
//! exponential-of-integral terms in the envelopes are computed by exact
//! segment-wise quadrature; envelope violations are then attributable to the
//! integrator alone.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;

/// Piecewise-constant schedule: `values[i]` holds on `[times[i], times[i+1])`
/// and the last value extends to infinity. `times[0]` must be 0.
#[derive(Debug, Clone)]
pub struct Schedule<V> {
    times: Vec<f64>,
    values: Vec<V>,
}

impl<V> Schedule<V> {
    pub fn new(times: Vec<f64>, values: Vec<V>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::Config(
                "schedule needs one value per breakpoint".into(),
            ));
        }
        if times[0] != 0.0 {
            return Err(Error::Config("schedule must start at t = 0".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config(
                "schedule breakpoints must be finite and strictly increasing".into(),
            ));
        }
        Ok(Schedule { times, values })
    }

    pub fn constant(value: V) -> Self {
        Schedule {
            times: vec![0.0],
            values: vec![value],
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[V] {
        &self.values
    }

    /// Value in force at time `t` (clamped below to the first knot).
    pub fn value_at(&self, t: f64) -> &V {
        let idx = match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        &self.values[idx]
    }

    pub fn map<U>(&self, f: impl Fn(&V) -> U) -> Schedule<U> {
        Schedule {
            times: self.times.clone(),
            values: self.values.iter().map(f).collect(),
        }
    }
}

/// Union of several breakpoint lists, sorted and deduplicated.
fn merge_knots(lists: &[&[f64]]) -> Vec<f64> {
    let mut all: Vec<f64> = lists.iter().flat_map(|l| l.iter().copied()).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    all
}

/// Activation applied inside the force term.
#[derive(Clone, Copy)]
pub enum Activation {
    ReLU,
    /// Arbitrary scalar hook; envelope results are only meaningful when it
    /// is contractive with value 0 at 0.
    Custom { name: &'static str, f: fn(f64) -> f64 },
}

impl std::fmt::Debug for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::ReLU => write!(f, "ReLU"),
            Activation::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::ReLU => x.max(0.0),
            Activation::Custom { f, .. } => f(x),
        }
    }

    pub fn apply_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        v.map(|x| self.apply(x))
    }
}

/// Structural family of the weight pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InclusionVariant {
    /// No structural constraint on the weights.
    General,
    /// `A2(t)` elementwise nonnegative; trajectories decay when `b2 <= 0`.
    Decay,
    /// `A2(t) = A1(t)^T`; perturbations never expand.
    Symmetric,
}

/// A projected dynamics problem on the nonnegative orthant.
#[derive(Debug, Clone)]
pub struct InclusionProblem {
    pub dim: usize,
    pub variant: InclusionVariant,
    pub a1: Schedule<DMatrix<f64>>,
    pub a2: Schedule<DMatrix<f64>>,
    pub b1: Schedule<DVector<f64>>,
    pub b2: Schedule<DVector<f64>>,
    pub activation: Activation,
    pub horizon: f64,
    pub x0: DVector<f64>,
}

fn check_common(
    dim: usize,
    a1: &Schedule<DMatrix<f64>>,
    a2: &Schedule<DMatrix<f64>>,
    b1: &Schedule<DVector<f64>>,
    b2: &Schedule<DVector<f64>>,
    horizon: f64,
    x0: &DVector<f64>,
) -> Result<()> {
    if horizon <= 0.0 || !horizon.is_finite() {
        return Err(Error::Config("horizon must be positive".into()));
    }
    if x0.len() != dim {
        return Err(Error::Config("initial state has the wrong dimension".into()));
    }
    if x0.iter().any(|v| *v < 0.0) {
        return Err(Error::Config(
            "initial state must lie in the nonnegative orthant".into(),
        ));
    }
    for m in a1.values().iter().chain(a2.values()) {
        if m.nrows() != dim || m.ncols() != dim {
            return Err(Error::Config("weight matrices must be dim x dim".into()));
        }
    }
    for v in b1.values().iter().chain(b2.values()) {
        if v.len() != dim {
            return Err(Error::Config("biases must have length dim".into()));
        }
    }
    Ok(())
}

impl InclusionProblem {
    pub fn general(
        a1: Schedule<DMatrix<f64>>,
        a2: Schedule<DMatrix<f64>>,
        b1: Schedule<DVector<f64>>,
        b2: Schedule<DVector<f64>>,
        horizon: f64,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let dim = x0.len();
        check_common(dim, &a1, &a2, &b1, &b2, horizon, &x0)?;
        Ok(InclusionProblem {
            dim,
            variant: InclusionVariant::General,
            a1,
            a2,
            b1,
            b2,
            activation: Activation::ReLU,
            horizon,
            x0,
        })
    }

    /// Decay form: every `A2` knot must be elementwise nonnegative.
    pub fn decay(
        a1: Schedule<DMatrix<f64>>,
        a2: Schedule<DMatrix<f64>>,
        b1: Schedule<DVector<f64>>,
        b2: Schedule<DVector<f64>>,
        horizon: f64,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let dim = x0.len();
        check_common(dim, &a1, &a2, &b1, &b2, horizon, &x0)?;
        if a2.values().iter().any(|m| m.iter().any(|v| *v < 0.0)) {
            return Err(Error::Constraint(
                "decay form requires elementwise nonnegative second weights".into(),
            ));
        }
        Ok(InclusionProblem {
            dim,
            variant: InclusionVariant::Decay,
            a1,
            a2,
            b1,
            b2,
            activation: Activation::ReLU,
            horizon,
            x0,
        })
    }

    /// Symmetric form: the second weight is the transpose of the first at
    /// every knot.
    pub fn symmetric(
        a: Schedule<DMatrix<f64>>,
        b1: Schedule<DVector<f64>>,
        b2: Schedule<DVector<f64>>,
        horizon: f64,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let a2 = a.map(|m| m.transpose());
        let dim = x0.len();
        check_common(dim, &a, &a2, &b1, &b2, horizon, &x0)?;
        Ok(InclusionProblem {
            dim,
            variant: InclusionVariant::Symmetric,
            a1: a,
            a2,
            b1,
            b2,
            activation: Activation::ReLU,
            horizon,
            x0,
        })
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.activation = act;
        self
    }

    fn all_knots(&self) -> Vec<f64> {
        merge_knots(&[
            self.a1.times(),
            self.a2.times(),
            self.b1.times(),
            self.b2.times(),
        ])
    }
}

/// One splitting step: `x' = (x - tau A2 s(A1 x + b1) + tau b2)_+`, i.e. an
/// explicit step on the force followed by projection onto the orthant.
pub fn step_fb(
    x: &DVector<f64>,
    tau: f64,
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    b1: &DVector<f64>,
    b2: &DVector<f64>,
    act: Activation,
) -> DVector<f64> {
    let inner = act.apply_vec(&(a1 * x + b1));
    let pre = x - (a2 * inner - b2) * tau;
    pre.map(|v| v.max(0.0))
}

/// Time-stamped states of one integration run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub tau: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least x0")
    }

    pub fn max_state_norm(&self) -> f64 {
        self.states.iter().map(|s| s.norm()).fold(0.0, f64::max)
    }
}

/// Integrate with fixed step `tau` (the final step is clipped to land exactly
/// on the horizon). States stay in the orthant by construction; a non-finite
/// state aborts with the offending step index.
pub fn integrate(problem: &InclusionProblem, tau: f64) -> Result<Trajectory> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config("step size must be positive".into()));
    }
    let horizon = problem.horizon;
    let steps = ((horizon / tau) - 1e-9).ceil().max(1.0) as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(problem.x0.clone());
    let mut x = problem.x0.clone();
    for k in 0..steps {
        let t = (k as f64) * tau;
        let t_next = ((k + 1) as f64 * tau).min(horizon);
        let dt = t_next - t;
        x = step_fb(
            &x,
            dt,
            problem.a1.value_at(t),
            problem.a2.value_at(t),
            problem.b1.value_at(t),
            problem.b2.value_at(t),
            problem.activation,
        );
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: k + 1 });
        }
        times.push(t_next);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states, tau })
}

/// Largest singular value of a small dense matrix.
pub fn matrix_l2_norm(m: &DMatrix<f64>) -> f64 {
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values[0]
}

/// Outcome of checking the well-posedness hypotheses.
#[derive(Debug, Clone)]
pub struct HypothesesReport {
    pub sigma_contractive: bool,
    pub sigma_zero_at_zero: bool,
    /// `sup_t |A1(t)|_2 |A2(t)|_2` over schedule knots.
    pub lipschitz_c: f64,
    /// Per knot: `max(c, |A2(t)|_2 |b1(t)|_2 + |b2(t)|_2)`.
    pub beta: Vec<(f64, f64)>,
    pub x0_nonneg: bool,
    /// For the decay form: all second weights elementwise nonnegative.
    pub a2_nonneg: Option<bool>,
    /// For the symmetric form: `A2 = A1^T` at every knot.
    pub symmetric: Option<bool>,
    pub ok: bool,
}

/// Report-only check of the existence hypotheses: activation contractivity
/// (sampled) with value 0 at 0, the uniform bound on `|A1||A2|`, the linear
/// growth envelope of the force, and the structural constraints of the
/// variant.
pub fn hypotheses_check(problem: &InclusionProblem, samples: usize, seed: u64) -> HypothesesReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = problem.activation;
    let mut contractive = true;
    for _ in 0..samples.max(1) {
        let u = rng.random::<f64>() * 10.0 - 5.0;
        let v = rng.random::<f64>() * 10.0 - 5.0;
        if (act.apply(u) - act.apply(v)).abs() > (u - v).abs() * (1.0 + 1e-12) + 1e-12 {
            contractive = false;
            break;
        }
    }
    let zero_at_zero = act.apply(0.0) == 0.0;

    let knots = problem.all_knots();
    let mut c = 0.0f64;
    for t in &knots {
        let n1 = matrix_l2_norm(problem.a1.value_at(*t));
        let n2 = matrix_l2_norm(problem.a2.value_at(*t));
        c = c.max(n1 * n2);
    }
    let beta: Vec<(f64, f64)> = knots
        .iter()
        .map(|t| {
            let n2 = matrix_l2_norm(problem.a2.value_at(*t));
            let nb1 = problem.b1.value_at(*t).norm();
            let nb2 = problem.b2.value_at(*t).norm();
            (*t, c.max(n2 * nb1 + nb2))
        })
        .collect();

    let x0_nonneg = problem.x0.iter().all(|v| *v >= 0.0);
    let a2_nonneg = (problem.variant == InclusionVariant::Decay).then(|| {
        problem
            .a2
            .values()
            .iter()
            .all(|m| m.iter().all(|v| *v >= 0.0))
    });
    let symmetric = (problem.variant == InclusionVariant::Symmetric).then(|| {
        knots.iter().all(|t| {
            let a1 = problem.a1.value_at(*t);
            let a2 = problem.a2.value_at(*t);
            a2 == &a1.transpose()
        })
    });

    let ok = contractive
        && zero_at_zero
        && x0_nonneg
        && a2_nonneg.unwrap_or(true)
        && symmetric.unwrap_or(true);
    HypothesesReport {
        sigma_contractive: contractive,
        sigma_zero_at_zero: zero_at_zero,
        lipschitz_c: c,
        beta,
        x0_nonneg,
        a2_nonneg,
        symmetric,
        ok,
    }
}

// ---------------------------------------------------------------------------
// Exact envelopes for piecewise-constant data
// ---------------------------------------------------------------------------

/// Evaluator for `c0 * exp(F(t)) + int_0^t g(s) exp(F(t) - F(s)) ds` with
/// piecewise-constant `f` (where `F(t) = int_0^t f`) and `g`. All integrals
/// are segment-exact.
#[derive(Debug, Clone)]
struct LinearEnvelope {
    knots: Vec<f64>,
    f_vals: Vec<f64>,
    g_vals: Vec<f64>,
    /// `F` at each knot.
    cum_f: Vec<f64>,
    /// `int_0^knot g(s) exp(-F(s)) ds` at each knot.
    cum_j: Vec<f64>,
}

impl LinearEnvelope {
    fn new(f: &Schedule<f64>, g: &Schedule<f64>) -> Self {
        let knots = merge_knots(&[f.times(), g.times()]);
        let f_vals: Vec<f64> = knots.iter().map(|t| *f.value_at(*t)).collect();
        let g_vals: Vec<f64> = knots.iter().map(|t| *g.value_at(*t)).collect();
        let mut cum_f = vec![0.0; knots.len()];
        let mut cum_j = vec![0.0; knots.len()];
        for i in 1..knots.len() {
            let dt = knots[i] - knots[i - 1];
            cum_f[i] = cum_f[i - 1] + f_vals[i - 1] * dt;
            cum_j[i] = cum_j[i - 1] + Self::segment_j(f_vals[i - 1], g_vals[i - 1], cum_f[i - 1], dt);
        }
        LinearEnvelope {
            knots,
            f_vals,
            g_vals,
            cum_f,
            cum_j,
        }
    }

    /// `int_a^{a+dt} g exp(-F(s)) ds` on a segment where `f`, `g` are
    /// constant and `F(a) = fa`.
    fn segment_j(f: f64, g: f64, fa: f64, dt: f64) -> f64 {
        if g == 0.0 || dt == 0.0 {
            return 0.0;
        }
        let base = (-fa).exp();
        if f == 0.0 {
            g * base * dt
        } else {
            g * base * (1.0 - (-f * dt).exp()) / f
        }
    }

    fn segment_index(&self, t: f64) -> usize {
        match self
            .knots
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        }
    }

    /// `F(t)`.
    fn big_f(&self, t: f64) -> f64 {
        let i = self.segment_index(t);
        self.cum_f[i] + self.f_vals[i] * (t - self.knots[i])
    }

    fn eval(&self, c0: f64, t: f64) -> f64 {
        let i = self.segment_index(t);
        let j = self.cum_j[i]
            + Self::segment_j(self.f_vals[i], self.g_vals[i], self.cum_f[i], t - self.knots[i]);
        let ft = self.big_f(t);
        c0 * ft.exp() + ft.exp() * j
    }
}

/// Which trajectory bound to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvelopeKind {
    /// General growth: `|x(t)| <= |x0| e^{int |A1||A2|} + int (|A2||b1| +
    /// |(b2)_+|) e^{...}`.
    GrowthGeneral,
    /// General sensitivity: `|x - y| <= |x0 - y0| e^{int |A1||A2|}`.
    SensitivityGeneral,
    /// Decay-form growth: `|x(t)| <= |x0| + int |(b2)_+|`.
    GrowthDecay,
    /// Symmetric-form growth: `|x(t)| <= |x0| + int |(-A^T s(b1) + b2)_+|`.
    GrowthSymmetric,
    /// Symmetric-form sensitivity: `|x - y| <= |x0 - y0|`.
    SensitivitySymmetric,
}

/// One envelope sample.
#[derive(Debug, Clone, Copy)]
pub struct EnvelopePoint {
    pub t: f64,
    pub value: f64,
    pub bound: f64,
    pub slack: f64,
}

/// Envelope evaluation along a trajectory.
#[derive(Debug, Clone)]
pub struct EnvelopeReport {
    pub kind: EnvelopeKind,
    pub points: Vec<EnvelopePoint>,
    pub violations: usize,
    /// Comparison tolerance actually used.
    pub tol: f64,
}

fn positive_part_norm(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.max(0.0).powi(2)).sum::<f64>().sqrt()
}

fn schedule_f(problem: &InclusionProblem) -> Schedule<f64> {
    let knots = problem.all_knots();
    let vals: Vec<f64> = knots
        .iter()
        .map(|t| matrix_l2_norm(problem.a1.value_at(*t)) * matrix_l2_norm(problem.a2.value_at(*t)))
        .collect();
    Schedule::new(knots, vals).expect("knots are valid")
}

fn zero_schedule() -> Schedule<f64> {
    Schedule::constant(0.0)
}

/// Tolerance for envelope comparisons: the splitting scheme overshoots tight
/// bounds by one step of the force scale.
fn envelope_tol(problem: &InclusionProblem, trajs: &[&Trajectory]) -> f64 {
    let knots = problem.all_knots();
    let mut beta_sup = 0.0f64;
    let mut c = 0.0f64;
    for t in &knots {
        let n1 = matrix_l2_norm(problem.a1.value_at(*t));
        let n2 = matrix_l2_norm(problem.a2.value_at(*t));
        c = c.max(n1 * n2);
    }
    for t in &knots {
        let n2 = matrix_l2_norm(problem.a2.value_at(*t));
        let nb1 = problem.b1.value_at(*t).norm();
        let nb2 = problem.b2.value_at(*t).norm();
        beta_sup = beta_sup.max(c.max(n2 * nb1 + nb2));
    }
    let max_norm = trajs.iter().map(|t| t.max_state_norm()).fold(0.0, f64::max);
    let tau = trajs.iter().map(|t| t.tau).fold(0.0, f64::max);
    (5.0 * tau * beta_sup * (1.0 + max_norm)).max(1e-9)
}

/// Evaluate one bound along a trajectory (growth kinds) or a pair of
/// trajectories sharing the same time grid (sensitivity kinds).
pub fn bound_envelope(
    problem: &InclusionProblem,
    traj: &Trajectory,
    other: Option<&Trajectory>,
    kind: EnvelopeKind,
) -> Result<EnvelopeReport> {
    match kind {
        EnvelopeKind::GrowthDecay if problem.variant != InclusionVariant::Decay => {
            return Err(Error::Unsupported(
                "decay-form growth bound needs a decay-form problem".into(),
            ));
        }
        EnvelopeKind::GrowthSymmetric | EnvelopeKind::SensitivitySymmetric
            if problem.variant != InclusionVariant::Symmetric =>
        {
            return Err(Error::Unsupported(
                "symmetric-form bounds need a symmetric-form problem".into(),
            ));
        }
        _ => {}
    }
    let needs_pair = matches!(
        kind,
        EnvelopeKind::SensitivityGeneral | EnvelopeKind::SensitivitySymmetric
    );
    if needs_pair {
        let Some(o) = other else {
            return Err(Error::Config(
                "sensitivity envelopes need a second trajectory".into(),
            ));
        };
        if o.times.len() != traj.times.len() {
            return Err(Error::Config(
                "paired trajectories must share the time grid".into(),
            ));
        }
    }

    let knots = problem.all_knots();
    let envelope = match kind {
        EnvelopeKind::GrowthGeneral => {
            let f = schedule_f(problem);
            let g_vals: Vec<f64> = knots
                .iter()
                .map(|t| {
                    let n2 = matrix_l2_norm(problem.a2.value_at(*t));
                    let nb1 = problem.b1.value_at(*t).norm();
                    let b2p = positive_part_norm(problem.b2.value_at(*t));
                    n2 * nb1 + b2p
                })
                .collect();
            let g = Schedule::new(knots.clone(), g_vals)?;
            LinearEnvelope::new(&f, &g)
        }
        EnvelopeKind::SensitivityGeneral => LinearEnvelope::new(&schedule_f(problem), &zero_schedule()),
        EnvelopeKind::GrowthDecay => {
            let g_vals: Vec<f64> = knots
                .iter()
                .map(|t| positive_part_norm(problem.b2.value_at(*t)))
                .collect();
            let g = Schedule::new(knots.clone(), g_vals)?;
            LinearEnvelope::new(&zero_schedule(), &g)
        }
        EnvelopeKind::GrowthSymmetric => {
            let g_vals: Vec<f64> = knots
                .iter()
                .map(|t| {
                    let a = problem.a1.value_at(*t);
                    let sb1 = problem.activation.apply_vec(problem.b1.value_at(*t));
                    let v = problem.b2.value_at(*t) - a.transpose() * sb1;
                    positive_part_norm(&v)
                })
                .collect();
            let g = Schedule::new(knots.clone(), g_vals)?;
            LinearEnvelope::new(&zero_schedule(), &g)
        }
        EnvelopeKind::SensitivitySymmetric => LinearEnvelope::new(&zero_schedule(), &zero_schedule()),
    };

    let c0 = if needs_pair {
        (traj.states[0].clone() - other.unwrap().states[0].clone()).norm()
    } else {
        traj.states[0].norm()
    };

    let trajs: Vec<&Trajectory> = match other {
        Some(o) => vec![traj, o],
        None => vec![traj],
    };
    let tol = envelope_tol(problem, &trajs);

    let mut points = Vec::with_capacity(traj.times.len());
    let mut violations = 0;
    for (i, t) in traj.times.iter().enumerate() {
        let value = if needs_pair {
            (traj.states[i].clone() - other.unwrap().states[i].clone()).norm()
        } else {
            traj.states[i].norm()
        };
        let bound = envelope.eval(c0, *t);
        let slack = bound + tol - value;
        if slack < 0.0 {
            violations += 1;
        }
        points.push(EnvelopePoint {
            t: *t,
            value,
            bound,
            slack,
        });
    }
    Ok(EnvelopeReport {
        kind,
        points,
        violations,
        tol,
    })
}

// ---------------------------------------------------------------------------
// Integral-inequality envelope
// ---------------------------------------------------------------------------

/// Explicit bound for a nonnegative `u` satisfying
/// `u(t) <= c + int_0^t f u + g u^alpha`:
///
/// - `0 <= alpha < 1`: `u^(1-a) <= c^(1-a) e^{(1-a)F(t)} +
///   (1-a) int g(s) e^{(1-a)(F(t)-F(s))} ds`, solved for `u`;
/// - `alpha = 1`: the linear form `u <= c exp(int f + g)` (the general
///   formula's exponent vanishes at `alpha = 1`, leaving the vacuous `u <=
///   c`, so the standard linear bound is used instead);
/// - `alpha > 1` is unsupported.
pub fn gronwall(
    c: f64,
    f: &Schedule<f64>,
    g: &Schedule<f64>,
    alpha: f64,
    t_grid: &[f64],
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Unsupported(format!(
            "integral envelope supports 0 <= alpha <= 1, got {alpha}"
        )));
    }
    if c < 0.0 {
        return Err(Error::Config("constant c must be nonnegative".into()));
    }
    if f.values().iter().chain(g.values()).any(|v| *v < 0.0) {
        return Err(Error::Config("f and g must be nonnegative".into()));
    }
    if alpha == 1.0 {
        let knots = merge_knots(&[f.times(), g.times()]);
        let sum_vals: Vec<f64> = knots
            .iter()
            .map(|t| f.value_at(*t) + g.value_at(*t))
            .collect();
        let sum = Schedule::new(knots, sum_vals)?;
        let env = LinearEnvelope::new(&sum, &zero_schedule());
        return Ok(t_grid.iter().map(|t| c * env.big_f(*t).exp()).collect());
    }
    let one_minus = 1.0 - alpha;
    let fa = f.map(|v| one_minus * v);
    let ga = g.map(|v| one_minus * v);
    let env = LinearEnvelope::new(&fa, &ga);
    let c_pow = c.powf(one_minus);
    Ok(t_grid
        .iter()
        .map(|t| env.eval(c_pow, *t).max(0.0).powf(1.0 / one_minus))
        .collect())
}

/// Export a trajectory as delimited text: `t, x1..xd, l2, [bound]`.
pub fn write_trajectory<W: Write>(
    w: &mut W,
    traj: &Trajectory,
    bounds: Option<&EnvelopeReport>,
) -> Result<()> {
    let dim = traj.states[0].len();
    let mut header = String::from("t");
    for i in 1..=dim {
        header.push_str(&format!("\tx{i}"));
    }
    header.push_str("\tl2");
    if bounds.is_some() {
        header.push_str("\tbound");
    }
    writeln!(w, "{header}")?;
    for (i, t) in traj.times.iter().enumerate() {
        let mut line = format!("{t:.12e}");
        for v in traj.states[i].iter() {
            line.push_str(&format!("\t{v:.12e}"));
        }
        line.push_str(&format!("\t{:.12e}", traj.states[i].norm()));
        if let Some(rep) = bounds {
            line.push_str(&format!("\t{:.12e}", rep.points[i].bound));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
