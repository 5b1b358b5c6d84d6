//! Fixed-step RK4 integration of the interconnection and Monte Carlo
//! ensembles over initial conditions and bounded inputs.
//!
//! Everything here is empirical: a run either settles within a radius
//! that grows with the input level or it does not, and the report is a
//! tally of runs.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::comparison::ComparisonFn;
use crate::expr::{EvalError, Expr};
use crate::intervals::SmallGainIntervals;
use crate::regions::{build_region, distance_to_set, InnerComposition, RegionError, StorageFn};
use crate::verify::{AxisBox, CheckReport, DpiBlock};

pub const DEFAULT_BLOWUP: f64 = 1e8;
/// Tolerance on `f(0, 0) = 0`.
pub const EQUILIBRIUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("step must be positive and not exceed t_end (h = {h}, t_end = {t_end})")]
    BadStep { h: f64, t_end: f64 },
    #[error("{what} has dimension {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("tail fraction {0} outside (0, 0.5]")]
    TailFraction(f64),
    #[error("trajectory was truncated")]
    TruncatedTrajectory,
    #[error("f(0, 0) component {component} is {value}, not 0")]
    NonzeroEquilibrium { component: usize, value: f64 },
    #[error("no point of B_{k} found in {attempts} attempts")]
    EmptyRegion { k: usize, attempts: usize },
    #[error("at least {min} runs required, got {got}")]
    TooFewRuns { min: usize, got: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Region(#[from] RegionError),
}

/// Right-hand side `ẋ = f(x, u, t)` with expressions over `x1..xn, u1..um, t`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub n: usize,
    pub m: usize,
    pub exprs: Vec<Expr>,
}

impl VectorField {
    pub fn new(n: usize, m: usize, exprs: Vec<Expr>) -> Result<Self, SimError> {
        if exprs.len() != n {
            return Err(SimError::Dimension {
                what: "vector field",
                expected: n,
                got: exprs.len(),
            });
        }
        Ok(Self { n, m, exprs })
    }

    /// `vars` holds `x`, then `u`, then `t`.
    pub fn eval_into(&self, vars: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        for (o, e) in out.iter_mut().zip(&self.exprs) {
            *o = e.eval(vars)?;
        }
        Ok(())
    }
}

/// The two-subsystem interconnection with its certificates.
#[derive(Debug, Clone, PartialEq)]
pub struct InterconnectionSpec {
    pub n1: usize,
    pub n2: usize,
    pub m1: usize,
    pub m2: usize,
    /// Expressions over `x1..xn, u1..um, t` with `n = n1 + n2`, `m = m1 + m2`.
    pub f1: Vec<Expr>,
    pub f2: Vec<Expr>,
    pub v1: StorageFn,
    pub v2: StorageFn,
    pub gamma12: ComparisonFn,
    pub gamma21: ComparisonFn,
    pub gamma1: ComparisonFn,
    pub gamma2: ComparisonFn,
    pub alpha1: ComparisonFn,
    pub alpha2: ComparisonFn,
    pub dpi_blocks: Vec<DpiBlock>,
}

impl InterconnectionSpec {
    pub fn n(&self) -> usize {
        self.n1 + self.n2
    }

    pub fn m(&self) -> usize {
        self.m1 + self.m2
    }

    /// Dimension checks and `f(0, 0, 0) = 0`.
    pub fn validate(&self) -> Result<(), SimError> {
        let dims = [
            ("f1", self.n1, self.f1.len()),
            ("f2", self.n2, self.f2.len()),
            ("v1", self.n1, self.v1.dim()),
            ("v2", self.n2, self.v2.dim()),
        ];
        for (what, expected, got) in dims {
            if expected != got {
                return Err(SimError::Dimension { what, expected, got });
            }
        }
        let limit = self.n() + self.m() + 1;
        for e in self.f1.iter().chain(&self.f2) {
            if let Some(slot) = e.max_slot() {
                if slot >= limit {
                    return Err(SimError::Dimension {
                        what: "expression schema",
                        expected: limit,
                        got: slot + 1,
                    });
                }
            }
        }
        let field = self.vector_field();
        let vars = alloc::vec![0.0; limit];
        let mut out = alloc::vec![0.0; self.n()];
        field.eval_into(&vars, &mut out)?;
        for (component, &value) in out.iter().enumerate() {
            if !(value.abs() <= EQUILIBRIUM_TOL) {
                return Err(SimError::NonzeroEquilibrium { component, value });
            }
        }
        Ok(())
    }

    pub fn vector_field(&self) -> VectorField {
        let mut exprs = self.f1.clone();
        exprs.extend(self.f2.iter().cloned());
        VectorField {
            n: self.n(),
            m: self.m(),
            exprs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum InputKind {
    Zero,
    Constant {
        levels: Vec<f64>,
    },
    /// Every component is `amplitude·sin(2π·frequency·t + phase)`.
    Sinusoid {
        amplitude: f64,
        frequency: f64,
        phase: f64,
    },
    /// Each component holds a value drawn from `[-amplitude, amplitude]` on
    /// every dwell window, keyed by `(seed, window, component)`.
    PiecewiseConstantRandom {
        amplitude: f64,
        dwell: f64,
        seed: u64,
    },
}

/// Bounded input signal with its sup norm `‖u‖∞` (Euclidean in `u`).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct InputSignal {
    pub kind: InputKind,
    pub m: usize,
    pub sup_norm: f64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl InputSignal {
    pub fn zero(m: usize) -> Self {
        Self {
            kind: InputKind::Zero,
            m,
            sup_norm: 0.0,
        }
    }

    pub fn constant(levels: Vec<f64>) -> Self {
        let sup_norm = libm::sqrt(levels.iter().map(|a| a * a).sum());
        Self {
            m: levels.len(),
            kind: InputKind::Constant { levels },
            sup_norm,
        }
    }

    /// Components move in phase, so the norm peaks at `|amplitude|·√m`.
    pub fn sinusoid(m: usize, amplitude: f64, frequency: f64, phase: f64) -> Self {
        Self {
            kind: InputKind::Sinusoid {
                amplitude,
                frequency,
                phase,
            },
            m,
            sup_norm: if frequency == 0.0 {
                amplitude.abs() * libm::fabs(libm::sin(phase)) * libm::sqrt(m as f64)
            } else {
                amplitude.abs() * libm::sqrt(m as f64)
            },
        }
    }

    /// `sup_norm` is the bound `|amplitude|·√m`; individual draws stay below it.
    pub fn piecewise_random(m: usize, amplitude: f64, dwell: f64, seed: u64) -> Self {
        Self {
            kind: InputKind::PiecewiseConstantRandom { amplitude, dwell, seed },
            m,
            sup_norm: amplitude.abs() * libm::sqrt(m as f64),
        }
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        match &self.kind {
            InputKind::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            InputKind::Constant { levels } => out.copy_from_slice(levels),
            InputKind::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => {
                let v = amplitude * libm::sin(2.0 * PI * frequency * t + phase);
                out.iter_mut().for_each(|o| *o = v);
            }
            InputKind::PiecewiseConstantRandom { amplitude, dwell, seed } => {
                let window = if *dwell > 0.0 { libm::floor(t / dwell) as u64 } else { 0 };
                for (j, o) in out.iter_mut().enumerate() {
                    let key = splitmix64(splitmix64(seed ^ splitmix64(window)) ^ j as u64);
                    // 53 random mantissa bits mapped to [-1, 1)
                    let unit = (key >> 11) as f64 / (1u64 << 53) as f64;
                    *o = amplitude * (2.0 * unit - 1.0);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Truncation {
    Blowup,
    NonFinite,
    Domain(EvalError),
}

/// Samples `t_i = i·h`; states and inputs are stored flat, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n: usize,
    pub m: usize,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub inputs: Vec<f64>,
    pub input_used: InputSignal,
    pub truncated_at_blowup: bool,
    pub truncation: Option<Truncation>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.n..(i + 1) * self.n]
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.m..(i + 1) * self.m]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|a| a * a).sum())
}

struct Rk4<'a> {
    field: &'a VectorField,
    input: &'a InputSignal,
    vars: Vec<f64>,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl<'a> Rk4<'a> {
    fn new(field: &'a VectorField, input: &'a InputSignal) -> Self {
        let n = field.n;
        Self {
            field,
            input,
            vars: alloc::vec![0.0; n + field.m + 1],
            k: [
                alloc::vec![0.0; n],
                alloc::vec![0.0; n],
                alloc::vec![0.0; n],
                alloc::vec![0.0; n],
            ],
            tmp: alloc::vec![0.0; n],
        }
    }

    fn rhs(&mut self, x: &[f64], t: f64, stage: usize) -> Result<(), EvalError> {
        let (n, m) = (self.field.n, self.field.m);
        self.vars[..n].copy_from_slice(x);
        self.input.eval_into(t, &mut self.vars[n..n + m]);
        self.vars[n + m] = t;
        self.field.eval_into(&self.vars, &mut self.k[stage])
    }

    fn step(&mut self, x: &mut [f64], t: f64, h: f64) -> Result<(), EvalError> {
        self.rhs(x, t, 0)?;
        for (stage, c) in [(1, 0.5), (2, 0.5), (3, 1.0)] {
            for ((t, xi), ki) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k[stage - 1]) {
                *t = xi + c * h * ki;
            }
            let xt = core::mem::take(&mut self.tmp);
            let r = self.rhs(&xt, t + c * h, stage);
            self.tmp = xt;
            r?;
        }
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += h / 6.0 * (self.k[0][i] + 2.0 * self.k[1][i] + 2.0 * self.k[2][i] + self.k[3][i]);
        }
        Ok(())
    }
}

/// Classical RK4 with `N = round(t_end / h)` steps of size `h`; the input is
/// sampled at the stage times. Integration stops early when `|x|` exceeds
/// `blowup`, a state turns non-finite, or an expression leaves its domain.
pub fn integrate(
    field: &VectorField,
    x0: &[f64],
    input: &InputSignal,
    t_end: f64,
    h: f64,
    blowup: f64,
) -> Result<Trajectory, SimError> {
    if !(h > 0.0 && t_end >= h) {
        return Err(SimError::BadStep { h, t_end });
    }
    if x0.len() != field.n {
        return Err(SimError::Dimension {
            what: "initial state",
            expected: field.n,
            got: x0.len(),
        });
    }
    if input.m != field.m {
        return Err(SimError::Dimension {
            what: "input",
            expected: field.m,
            got: input.m,
        });
    }
    let steps = libm::round(t_end / h) as usize;
    let (n, m) = (field.n, field.m);
    let mut traj = Trajectory {
        n,
        m,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity((steps + 1) * n),
        inputs: Vec::with_capacity((steps + 1) * m),
        input_used: input.clone(),
        truncated_at_blowup: false,
        truncation: None,
    };
    let mut x = x0.to_vec();
    let mut u = alloc::vec![0.0; m];
    let mut rk = Rk4::new(field, input);
    for i in 0..=steps {
        let t = i as f64 * h;
        input.eval_into(t, &mut u);
        traj.times.push(t);
        traj.states.extend_from_slice(&x);
        traj.inputs.extend_from_slice(&u);
        if i == steps {
            break;
        }
        if let Err(e) = rk.step(&mut x, t, h) {
            traj.truncated_at_blowup = true;
            traj.truncation = Some(Truncation::Domain(e));
            break;
        }
        if x.iter().any(|v| !v.is_finite()) {
            traj.truncated_at_blowup = true;
            traj.truncation = Some(Truncation::NonFinite);
            break;
        }
        if norm(&x) > blowup {
            traj.truncated_at_blowup = true;
            traj.truncation = Some(Truncation::Blowup);
            break;
        }
    }
    Ok(traj)
}

fn tail_start(len: usize, tail_fraction: f64) -> usize {
    let last = (len - 1) as f64;
    // small slack so that exact products like 0.8·20000 are not bumped up
    (libm::ceil((1.0 - tail_fraction) * last - 1e-9).max(0.0) as usize).min(len - 1)
}

/// Max of `|x(t)|` over the last `tail_fraction` of the time grid.
pub fn estimate_limsup(traj: &Trajectory, tail_fraction: f64) -> Result<f64, SimError> {
    if !(tail_fraction > 0.0 && tail_fraction <= 0.5) {
        return Err(SimError::TailFraction(tail_fraction));
    }
    if traj.truncated_at_blowup || traj.is_empty() {
        return Err(SimError::TruncatedTrajectory);
    }
    Ok((tail_start(traj.len(), tail_fraction)..traj.len())
        .map(|i| norm(traj.state(i)))
        .fold(0.0, f64::max))
}

/// How the per-level input of a run is drawn; every family is scaled so
/// that `sup_norm` equals the level.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum InputFamily {
    /// Constant input in a uniformly random direction.
    Constant,
    Sinusoid {
        frequency: f64,
    },
    PiecewiseRandom {
        dwell: f64,
    },
}

impl InputFamily {
    pub fn draw<R: Rng>(&self, m: usize, level: f64, rng: &mut R) -> InputSignal {
        if m == 0 || level == 0.0 {
            return InputSignal::zero(m);
        }
        let per_axis = level / libm::sqrt(m as f64);
        match *self {
            InputFamily::Constant => {
                let mut dir: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut len = norm(&dir);
                while !(1e-3..=1.0).contains(&len) {
                    dir.iter_mut().for_each(|d| *d = rng.gen_range(-1.0..1.0));
                    len = norm(&dir);
                }
                InputSignal::constant(dir.into_iter().map(|d| level * d / len).collect())
            }
            InputFamily::Sinusoid { frequency } => {
                let phase = rng.gen_range(0.0..2.0 * PI);
                InputSignal::sinusoid(m, per_axis, frequency, phase)
            }
            InputFamily::PiecewiseRandom { dwell } => InputSignal::piecewise_random(m, per_axis, dwell, rng.gen()),
        }
    }
}

/// Shared integration and convergence settings for the ensembles.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct EnsembleOptions {
    pub ic_box: AxisBox,
    pub u_levels: Vec<f64>,
    pub t_end: f64,
    pub h: f64,
    pub tail_fraction: f64,
    pub input: InputFamily,
    pub blowup: f64,
    /// A run converges when its tail measure is at most
    /// `radius_tol + radius_gain·‖u‖∞`.
    pub radius_tol: f64,
    pub radius_gain: f64,
}

impl EnsembleOptions {
    pub fn radius(&self, level: f64) -> f64 {
        self.radius_tol + self.radius_gain * level
    }

    fn check(&self, n: usize) -> Result<(), SimError> {
        if !(self.h > 0.0 && self.t_end >= self.h) {
            return Err(SimError::BadStep {
                h: self.h,
                t_end: self.t_end,
            });
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 0.5) {
            return Err(SimError::TailFraction(self.tail_fraction));
        }
        if self.ic_box.dim() != n {
            return Err(SimError::Dimension {
                what: "ic_box",
                expected: n,
                got: self.ic_box.dim(),
            });
        }
        Ok(())
    }
}

/// The per-run generator: stream `run` of a ChaCha8 generator seeded with `seed`.
pub fn run_rng(seed: u64, run: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run);
    rng
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct GainPoint {
    pub u_sup: f64,
    pub radius: f64,
    /// Runs behind `radius`; 0 means the point carries no information.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct NonConverged {
    /// Replays with `run_rng(seed, run)`.
    pub run: u64,
    pub u_level: f64,
    pub x0: Vec<f64>,
    /// `None` when the trajectory was truncated.
    pub limsup: Option<f64>,
    pub truncation: Option<Truncation>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct AissReport {
    pub n_runs: usize,
    pub seed: u64,
    pub converged_runs: usize,
    pub fraction_converged: f64,
    /// Monotone envelope: running max over levels of the largest limsup
    /// among converged runs. An empirical surrogate, not a proven gain.
    pub empirical_gain_points: Vec<GainPoint>,
    /// Per-level maxima before the running max.
    pub level_maxima: Vec<GainPoint>,
    pub nonconverged_seeds: Vec<NonConverged>,
}

/// Outcome of one run at every level, in level order.
pub struct RunOutcome {
    pub x0: Vec<f64>,
    pub levels: Vec<(f64, Result<f64, Truncation>)>,
}

/// The initial state and one trajectory per level of run `run`, exactly as
/// `monte_carlo_aiss` simulates them.
pub fn run_trajectories(
    field: &VectorField,
    opts: &EnsembleOptions,
    seed: u64,
    run: u64,
) -> Result<(Vec<f64>, Vec<Trajectory>), SimError> {
    let mut rng = run_rng(seed, run);
    let mut x0 = alloc::vec![0.0; field.n];
    opts.ic_box.sample_into(&mut rng, &mut x0);
    let mut trajs = Vec::with_capacity(opts.u_levels.len());
    for &level in &opts.u_levels {
        let input = opts.input.draw(field.m, level, &mut rng);
        trajs.push(integrate(field, &x0, &input, opts.t_end, opts.h, opts.blowup)?);
    }
    Ok((x0, trajs))
}

/// Simulate run `run` exactly as `monte_carlo_aiss` does.
pub fn replay_run(field: &VectorField, opts: &EnsembleOptions, seed: u64, run: u64) -> Result<RunOutcome, SimError> {
    let (x0, trajs) = run_trajectories(field, opts, seed, run)?;
    let levels = opts
        .u_levels
        .iter()
        .zip(trajs)
        .map(|(&level, traj)| {
            let outcome = match estimate_limsup(&traj, opts.tail_fraction) {
                Ok(v) => Ok(v),
                Err(_) => Err(traj.truncation.unwrap_or(Truncation::Blowup)),
            };
            (level, outcome)
        })
        .collect();
    Ok(RunOutcome { x0, levels })
}

pub const MIN_RUNS: usize = 100;

/// Ensemble test of the almost-ISS bound. A run converges when every level
/// yields an untruncated trajectory with limsup within `opts.radius(level)`.
pub fn monte_carlo_aiss(
    field: &VectorField,
    n_runs: usize,
    opts: &EnsembleOptions,
    seed: u64,
) -> Result<AissReport, SimError> {
    if n_runs < MIN_RUNS {
        return Err(SimError::TooFewRuns {
            min: MIN_RUNS,
            got: n_runs,
        });
    }
    opts.check(field.n)?;
    let mut levels = opts.u_levels.clone();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut maxima = alloc::vec![0.0f64; levels.len()];
    let mut counts = alloc::vec![0usize; levels.len()];
    let mut converged_runs = 0;
    let mut nonconverged = Vec::new();
    for run in 0..n_runs as u64 {
        let outcome = replay_run(field, opts, seed, run)?;
        let mut ok = true;
        let mut failures = Vec::new();
        for (level, result) in &outcome.levels {
            let (limsup, truncation) = match result {
                Ok(v) if *v <= opts.radius(*level) => continue,
                Ok(v) => (Some(*v), None),
                Err(t) => (None, Some(t.clone())),
            };
            ok = false;
            failures.push(NonConverged {
                run,
                u_level: *level,
                x0: outcome.x0.clone(),
                limsup,
                truncation,
            });
        }
        if ok {
            converged_runs += 1;
            for (level, result) in &outcome.levels {
                let slot = levels.iter().position(|l| l == level).unwrap_or(0);
                if let Ok(v) = result {
                    maxima[slot] = maxima[slot].max(*v);
                    counts[slot] += 1;
                }
            }
        } else {
            nonconverged.extend(failures);
        }
    }
    let level_maxima: Vec<GainPoint> = levels
        .iter()
        .zip(maxima.iter().zip(&counts))
        .map(|(&u_sup, (&radius, &samples))| GainPoint { u_sup, radius, samples })
        .collect();
    let mut running = 0.0f64;
    let envelope = level_maxima
        .iter()
        .map(|p| {
            running = running.max(p.radius);
            GainPoint {
                radius: running,
                ..p.clone()
            }
        })
        .collect();
    Ok(AissReport {
        n_runs,
        seed,
        converged_runs,
        fraction_converged: converged_runs as f64 / n_runs as f64,
        empirical_gain_points: envelope,
        level_maxima,
        nonconverged_seeds: nonconverged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Options {
    pub ensemble: EnsembleOptions,
    pub n_samples: usize,
    /// Rejection-sampling budget for finding points of `B_k` in `ic_box`.
    pub attempt_budget: usize,
    /// Input bound used when `B_k` is bounded and `k = ℓ`.
    pub delta: f64,
    pub composition: InnerComposition,
    /// Tail points at which the distance to `A_k` is measured.
    pub tail_points: usize,
    pub distance_radius: f64,
    pub distance_resolution: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Theorem1Report {
    pub k: usize,
    /// One record per (initial condition, level); `lhs` is the tail distance
    /// to `A_k` (`+inf` if truncated), `rhs` the allowed radius.
    pub check: CheckReport,
    pub fraction_within: f64,
    pub level_max_distance: Vec<GainPoint>,
    pub levels_used: Vec<f64>,
    pub levels_dropped: Vec<f64>,
    /// Trajectories that left `B_k` (only tracked when `B_k` is bounded).
    pub escapes: usize,
    pub attempts: usize,
}

/// Ensemble test of regional convergence: initial conditions in `B_k`
/// should end up within a level-dependent radius of `A_k`.
pub fn check_theorem1(
    spec: &InterconnectionSpec,
    intervals: &SmallGainIntervals,
    k: usize,
    opts: &Theorem1Options,
    seed: u64,
) -> Result<Theorem1Report, SimError> {
    let field = spec.vector_field();
    let ens = &opts.ensemble;
    ens.check(field.n)?;
    let region = build_region(k, intervals, &spec.gamma12, &spec.gamma21, opts.composition)?;
    let ell = intervals.intervals.len();
    let restricted = k == ell && !region.b_unbounded();
    let (levels_used, levels_dropped): (Vec<f64>, Vec<f64>) =
        ens.u_levels.iter().partition(|&&l| !restricted || l <= opts.delta);

    let mut report = Theorem1Report {
        k,
        check: CheckReport::default(),
        fraction_within: 0.0,
        level_max_distance: levels_used
            .iter()
            .map(|&u_sup| GainPoint {
                u_sup,
                radius: 0.0,
                samples: 0,
            })
            .collect(),
        levels_used,
        levels_dropped,
        escapes: 0,
        attempts: 0,
    };
    if restricted && !report.levels_dropped.is_empty() {
        report
            .check
            .notes
            .push(alloc::format!("levels above delta = {} dropped", opts.delta));
    }

    let mut rng = run_rng(seed, u64::MAX);
    let mut x0 = alloc::vec![0.0; field.n];
    let mut index = 0;
    for sample in 0..opts.n_samples {
        let mut found = false;
        while report.attempts < opts.attempt_budget.max(1) * (sample + 1) {
            report.attempts += 1;
            ens.ic_box.sample_into(&mut rng, &mut x0);
            if region.contains_b(&spec.v1, &spec.v2, &x0)? {
                found = true;
                break;
            }
        }
        if !found {
            if sample == 0 {
                return Err(SimError::EmptyRegion {
                    k,
                    attempts: report.attempts,
                });
            }
            report.check.notes.push(alloc::format!(
                "attempt budget exhausted after {sample} initial conditions"
            ));
            break;
        }
        for (slot, &level) in report.levels_used.clone().iter().enumerate() {
            let input = ens.input.draw(field.m, level, &mut rng);
            let traj = integrate(&field, &x0, &input, ens.t_end, ens.h, ens.blowup)?;
            if !region.b_unbounded() {
                for i in 0..traj.len() {
                    if !region.contains_b(&spec.v1, &spec.v2, traj.state(i))? {
                        report.escapes += 1;
                        break;
                    }
                }
            }
            let rhs = ens.radius(level);
            let dist = if traj.truncated_at_blowup {
                f64::INFINITY
            } else {
                let start = tail_start(traj.len(), ens.tail_fraction);
                let picks = opts.tail_points.max(1);
                let mut worst = 0.0f64;
                for p in 0..picks {
                    let i = start + (traj.len() - 1 - start) * (p + 1) / picks;
                    let d = distance_to_set(traj.state(i), opts.distance_radius, opts.distance_resolution, |x| {
                        region.contains_a(&spec.v1, &spec.v2, x).unwrap_or(false)
                    });
                    worst = worst.max(d);
                }
                worst
            };
            let entry = &mut report.level_max_distance[slot];
            entry.radius = entry.radius.max(dist);
            entry.samples += 1;
            report.check.record(index, &x0, dist, rhs, rhs - dist);
            index += 1;
        }
    }
    if report.check.checked_points > 0 {
        report.fraction_within = 1.0 - report.check.violation_fraction();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comparison::GainClass;
    use crate::expr::{parse, Schema};
    use crate::intervals::{SmallGainInterval, Termination};

    fn field(n: usize, m: usize, texts: &[&str]) -> VectorField {
        let schema = Schema::field(n, m);
        VectorField::new(n, m, texts.iter().map(|t| parse(t, &schema).unwrap()).collect()).unwrap()
    }

    #[test]
    fn decay_matches_exponential() {
        let f = field(1, 0, &["-x1"]);
        let traj = integrate(&f, &[1.0], &InputSignal::zero(0), 1.0, 1e-3, DEFAULT_BLOWUP).unwrap();
        assert_eq!(traj.len(), 1001);
        assert!((traj.last_state()[0] - libm::exp(-1.0)).abs() < 1e-6);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn constant_and_oscillator() {
        let still = field(1, 0, &["0"]);
        let traj = integrate(&still, &[5.0], &InputSignal::zero(0), 1.0, 0.1, DEFAULT_BLOWUP).unwrap();
        assert!((0..traj.len()).all(|i| traj.state(i)[0] == 5.0));
        assert_eq!(estimate_limsup(&traj, 0.5).unwrap(), 5.0);

        let osc = field(2, 0, &["x2", "-x1"]);
        let traj = integrate(
            &osc,
            &[1.0, 0.0],
            &InputSignal::zero(0),
            2.0 * PI,
            2.0 * PI / 6000.0,
            DEFAULT_BLOWUP,
        )
        .unwrap();
        let end = traj.last_state();
        assert!((end[0] - 1.0).abs() < 1e-5 && end[1].abs() < 1e-5);
        let drift = (0..traj.len())
            .map(|i| (traj.state(i)[0].powi(2) + traj.state(i)[1].powi(2) - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-6, "{drift}");
    }

    #[test]
    fn limsup_examples() {
        let f = field(1, 0, &["-x1"]);
        let traj = integrate(&f, &[1.0], &InputSignal::zero(0), 20.0, 1e-3, DEFAULT_BLOWUP).unwrap();
        assert!(estimate_limsup(&traj, 0.2).unwrap() <= libm::exp(-16.0) * (1.0 + 1e-9));

        let forced = field(1, 1, &["-x1 + u1"]);
        let traj = integrate(
            &forced,
            &[0.0],
            &InputSignal::constant(alloc::vec![1.0]),
            20.0,
            1e-3,
            DEFAULT_BLOWUP,
        )
        .unwrap();
        assert!((estimate_limsup(&traj, 0.2).unwrap() - 1.0).abs() < 1e-6);

        assert_eq!(estimate_limsup(&traj, 0.6), Err(SimError::TailFraction(0.6)));
    }

    #[test]
    fn blowup_and_domain_truncate() {
        let f = field(1, 0, &["x1"]);
        let traj = integrate(&f, &[1.0], &InputSignal::zero(0), 30.0, 1e-2, DEFAULT_BLOWUP).unwrap();
        assert!(traj.truncated_at_blowup);
        assert_eq!(traj.truncation, Some(Truncation::Blowup));
        assert_eq!(estimate_limsup(&traj, 0.2), Err(SimError::TruncatedTrajectory));

        let g = field(1, 0, &["-sqrt(x1)"]);
        let traj = integrate(&g, &[1.0], &InputSignal::zero(0), 10.0, 1e-2, DEFAULT_BLOWUP).unwrap();
        assert!(matches!(traj.truncation, Some(Truncation::Domain(_))));

        assert!(matches!(
            integrate(&f, &[1.0], &InputSignal::zero(0), 0.5, 1.0, DEFAULT_BLOWUP),
            Err(SimError::BadStep { .. })
        ));
    }

    #[test]
    fn input_sup_norms() {
        assert_eq!(InputSignal::constant(alloc::vec![3.0, 4.0]).sup_norm, 5.0);
        let s = InputSignal::sinusoid(4, 0.5, 1.0, 0.0);
        assert_eq!(s.sup_norm, 1.0);
        let r = InputSignal::piecewise_random(2, 1.0, 0.5, 9);
        let mut u = [0.0; 2];
        let mut v = [0.0; 2];
        for i in 0..200 {
            let t = i as f64 * 0.05;
            r.eval_into(t, &mut u);
            assert!(norm(&u) <= r.sup_norm);
            r.eval_into(libm::floor(t / 0.5) * 0.5, &mut v);
            assert_eq!(u, v, "constant on each dwell window");
        }
        let mut rng = run_rng(1, 0);
        for fam in [
            InputFamily::Constant,
            InputFamily::Sinusoid { frequency: 0.3 },
            InputFamily::PiecewiseRandom { dwell: 1.0 },
        ] {
            let sig = fam.draw(3, 0.7, &mut rng);
            assert!((sig.sup_norm - 0.7).abs() < 1e-12);
        }
    }

    fn linear_opts(levels: &[f64]) -> EnsembleOptions {
        EnsembleOptions {
            ic_box: AxisBox::cube(2, 5.0),
            u_levels: levels.to_vec(),
            t_end: 20.0,
            h: 0.01,
            tail_fraction: 0.2,
            input: InputFamily::Constant,
            blowup: DEFAULT_BLOWUP,
            radius_tol: 1e-3,
            radius_gain: 10.0,
        }
    }

    #[test]
    fn ensemble_linear_and_unstable() {
        let f = field(2, 2, &["-x1 + 0.25*x2 + u1", "-x2 + 0.25*x1 + u2"]);
        let r = monte_carlo_aiss(&f, 100, &linear_opts(&[0.0, 0.1]), 7).unwrap();
        assert_eq!(r.fraction_converged, 1.0);
        assert!(r.empirical_gain_points[0].radius < 1e-3);
        let p = &r.empirical_gain_points[1];
        assert!(p.radius > 0.0 && p.radius.is_finite());
        assert_eq!(r, monte_carlo_aiss(&f, 100, &linear_opts(&[0.0, 0.1]), 7).unwrap());

        let bad = field(2, 2, &["x1 + u1", "x2 + u2"]);
        let r = monte_carlo_aiss(&bad, 100, &linear_opts(&[0.0]), 7).unwrap();
        assert_eq!(r.fraction_converged, 0.0);
        assert_eq!(r.nonconverged_seeds.len(), 100);
        let again = replay_run(&bad, &linear_opts(&[0.0]), 7, 42).unwrap();
        assert_eq!(again.x0, r.nonconverged_seeds[42].x0);

        assert!(matches!(
            monte_carlo_aiss(&f, 10, &linear_opts(&[0.0]), 7),
            Err(SimError::TooFewRuns { .. })
        ));
    }

    fn linear_spec(f1: &str, f2: &str) -> InterconnectionSpec {
        let schema = Schema::field(2, 2);
        let g = |t: &str| ComparisonFn::parse(t, GainClass::KInf).unwrap();
        InterconnectionSpec {
            n1: 1,
            n2: 1,
            m1: 1,
            m2: 1,
            f1: alloc::vec![parse(f1, &schema).unwrap()],
            f2: alloc::vec![parse(f2, &schema).unwrap()],
            v1: StorageFn::parse("abs(x1)", 1, 1).unwrap(),
            v2: StorageFn::parse("abs(x2)", 2, 1).unwrap(),
            gamma12: g("0.5*s"),
            gamma21: g("0.5*s"),
            gamma1: g("2*s"),
            gamma2: g("2*s"),
            alpha1: g("0.5*s"),
            alpha2: g("0.5*s"),
            dpi_blocks: Vec::new(),
        }
    }

    fn whole_line() -> SmallGainIntervals {
        SmallGainIntervals {
            intervals: alloc::vec![SmallGainInterval {
                lower: 0.0,
                upper: f64::INFINITY
            }],
            ell: 1,
            terminated_by: Termination::UpperInfinite,
            outer_iterations: 1,
            fixed_steps: 0,
            unconverged_limits: 0,
            diagnostics: Vec::new(),
            monotone: true,
        }
    }

    fn t1_opts(levels: &[f64]) -> Theorem1Options {
        Theorem1Options {
            ensemble: linear_opts(levels),
            n_samples: 20,
            attempt_budget: 100,
            delta: 0.0,
            composition: InnerComposition::AsPrinted,
            tail_points: 5,
            distance_radius: 1.0,
            distance_resolution: 8,
        }
    }

    #[test]
    fn spec_validation() {
        let spec = linear_spec("-x1 + 0.25*x2 + u1", "-x2 + 0.25*x1 + u2");
        assert_eq!(spec.validate(), Ok(()));
        let shifted = linear_spec("-x1 + 1", "-x2");
        assert!(matches!(
            shifted.validate(),
            Err(SimError::NonzeroEquilibrium { component: 0, .. })
        ));
    }

    #[test]
    fn theorem1_linear_and_unstable() {
        let spec = linear_spec("-x1 + 0.25*x2 + u1", "-x2 + 0.25*x1 + u2");
        let r = check_theorem1(&spec, &whole_line(), 1, &t1_opts(&[0.0, 0.1]), 5).unwrap();
        assert_eq!(r.check.checked_points, 40);
        assert!(r.check.passed(), "{:?}", r.check.violations);
        assert!(r.level_max_distance[0].radius <= 1e-3);

        let bad = linear_spec("x1 + u1", "x2 + u2");
        let r = check_theorem1(&bad, &whole_line(), 1, &t1_opts(&[0.0]), 5).unwrap();
        assert_eq!(r.check.violation_count, r.check.checked_points);
    }

    #[test]
    fn theorem1_empty_region() {
        let spec = linear_spec("-x1", "-x2");
        let bounded = SmallGainIntervals {
            intervals: alloc::vec![SmallGainInterval { lower: 0.0, upper: 1.0 }],
            ..whole_line()
        };
        let mut opts = t1_opts(&[0.0]);
        opts.ensemble.ic_box = AxisBox(alloc::vec![(10.0, 11.0), (10.0, 11.0)]);
        assert!(matches!(
            check_theorem1(&spec, &bounded, 1, &opts, 1),
            Err(SimError::EmptyRegion { k: 1, .. })
        ));
    }
}
