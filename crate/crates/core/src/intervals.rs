//! Location of the small-gain intervals `(M̲_k, M̄_k)` on which
//! `γ₁₂∘γ₂₁(s) < s`, by monotone fixed-point iteration of `γ = γ₁₂∘γ₂₁`
//! and of `γ⁻¹`.
//!
//! Starting from `s = 0` the search probes `s* = s + Δ`:
//!
//! * `γ(s*) = s*` (within `eps_fix`): advance `s := s*`;
//! * `γ(s*) < s*`: `γⁿ(s*)` decreases to `M̲` and `(γ⁻¹)ⁿ(s*)` increases to
//!   `M̄` (or diverges); record `(M̲, M̄)` and continue from `M̄`, or stop
//!   when `M̄ = ∞`;
//! * `γ(s*) > s*`: `γⁿ(s*)` increases to a fixed point `M*`, continue from
//!   it, or stop when it diverges.
//!
//! Gains with infinitely many crossings are cut off by `max_outer_iters`.

use alloc::vec::Vec;

use thiserror::Error;

use crate::comparison::{ComparisonFn, GainError, DEFAULT_INVERSION_TOL};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlgorithmParams {
    /// Probe step Δ.
    pub delta: f64,
    /// Relative band within which `γ(s) = s` counts as a fixed point.
    pub eps_fix: f64,
    /// Relative step size at which an inner iteration is converged.
    pub eps_conv: f64,
    /// Iterates above this value are declared divergent.
    pub s_divergence: f64,
    pub max_inner_iters: usize,
    /// Cap on returns to the probe step.
    pub max_outer_iters: usize,
    /// Relative tolerance of the inversions realising `γ⁻¹`.
    pub inversion_tol: f64,
}

impl Default for AlgorithmParams {
    fn default() -> Self {
        Self {
            delta: 1e-2,
            eps_fix: 1e-9,
            eps_conv: 1e-10,
            s_divergence: 1e9,
            max_inner_iters: 10_000,
            max_outer_iters: 1000,
            inversion_tol: DEFAULT_INVERSION_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamsError {
    #[error("parameter `{0}` must be positive")]
    NotPositive(&'static str),
    #[error("eps_fix ({eps_fix}) must be at least eps_conv ({eps_conv})")]
    BandOrder { eps_fix: f64, eps_conv: f64 },
}

impl AlgorithmParams {
    pub fn validate(&self) -> Result<(), ParamsError> {
        let positive = [
            ("delta", self.delta),
            ("eps_fix", self.eps_fix),
            ("eps_conv", self.eps_conv),
            ("s_divergence", self.s_divergence),
            ("inversion_tol", self.inversion_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(ParamsError::NotPositive(name));
            }
        }
        if self.max_inner_iters == 0 {
            return Err(ParamsError::NotPositive("max_inner_iters"));
        }
        if self.max_outer_iters == 0 {
            return Err(ParamsError::NotPositive("max_outer_iters"));
        }
        if self.eps_fix < self.eps_conv {
            return Err(ParamsError::BandOrder {
                eps_fix: self.eps_fix,
                eps_conv: self.eps_conv,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub enum PointClass {
    Below,
    Above,
    Fixed,
}

pub fn classify_point(gamma: &ComparisonFn, s: f64, eps_fix: f64) -> Result<PointClass, GainError> {
    let g = gamma.eval(s)?;
    let band = eps_fix * s.max(1.0);
    Ok(if (g - s).abs() <= band {
        PointClass::Fixed
    } else if g < s - band {
        PointClass::Below
    } else {
        PointClass::Above
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Limit {
    Finite(f64),
    Infinite,
}

impl Limit {
    pub fn value(self) -> f64 {
        match self {
            Limit::Finite(v) => v,
            Limit::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Limit::Infinite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct FixedPointRun {
    #[cfg_attr(feature = "serde", serde(skip))]
    pub limit: Limit,
    pub iterations: usize,
    /// False when `max_inner_iters` ran out before the step fell below
    /// `eps_conv`; the limit is then the last iterate.
    pub converged: bool,
    /// Every step moved in the direction of the first one.
    pub monotone: bool,
}

/// Iterate `s_{n+1} = γ(s_n)` from `s0`.
///
/// Inversion failures (`Unreachable`) inside `gamma` count as divergence.
pub fn fixed_point_limit(gamma: &ComparisonFn, s0: f64, params: &AlgorithmParams) -> Result<FixedPointRun, GainError> {
    let mut s = s0;
    let mut direction = 0.0_f64;
    let mut monotone = true;
    for n in 1..=params.max_inner_iters {
        let next = match gamma.eval(s) {
            Ok(v) => v,
            Err(GainError::Unreachable(_)) => {
                return Ok(FixedPointRun {
                    limit: Limit::Infinite,
                    iterations: n,
                    converged: true,
                    monotone,
                })
            }
            Err(e) => return Err(e),
        };
        if !(next <= params.s_divergence) {
            return Ok(FixedPointRun {
                limit: Limit::Infinite,
                iterations: n,
                converged: true,
                monotone,
            });
        }
        let step = next - s;
        if direction == 0.0 {
            direction = step;
        } else if step * direction < 0.0 {
            monotone = false;
        }
        if step.abs() <= params.eps_conv * s.max(1.0) {
            return Ok(FixedPointRun {
                limit: Limit::Finite(next),
                iterations: n,
                converged: true,
                monotone,
            });
        }
        s = next;
    }
    Ok(FixedPointRun {
        limit: Limit::Finite(s),
        iterations: params.max_inner_iters,
        converged: false,
        monotone,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub enum Termination {
    /// A small-gain interval extends to infinity.
    UpperInfinite,
    /// `γⁿ(s*)` diverged from a point with `γ(s*) > s*`.
    DivergentAbove,
    /// `max_outer_iters` reached.
    OuterCap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct SmallGainInterval {
    pub lower: f64,
    /// `+inf` for an unbounded interval.
    pub upper: f64,
}

impl SmallGainInterval {
    pub fn is_bounded(&self) -> bool {
        self.upper.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct IntervalDiagnostics {
    /// Outer iteration (1-based) in which the interval was found.
    pub outer_iteration: usize,
    pub probe: f64,
    pub lower_run: FixedPointRun,
    pub upper_run: FixedPointRun,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct SmallGainIntervals {
    pub intervals: Vec<SmallGainInterval>,
    /// Number of intervals found.
    pub ell: usize,
    pub terminated_by: Termination,
    pub outer_iterations: usize,
    /// Probes that landed on a fixed point (Fixed branch).
    pub fixed_steps: usize,
    /// Inner iterations that exhausted `max_inner_iters`.
    pub unconverged_limits: usize,
    pub diagnostics: Vec<IntervalDiagnostics>,
    /// Every inner iteration moved monotonically.
    pub monotone: bool,
}

/// `γ = γ₁₂∘γ₂₁`.
pub fn loop_gain(gamma12: &ComparisonFn, gamma21: &ComparisonFn) -> ComparisonFn {
    gamma12.compose(gamma21)
}

/// `γ⁻¹ = γ₂₁⁻¹∘γ₁₂⁻¹`.
pub fn loop_gain_inverse(gamma12: &ComparisonFn, gamma21: &ComparisonFn, tol: f64) -> ComparisonFn {
    gamma21.inverse(tol).compose(&gamma12.inverse(tol))
}

pub fn find_intervals(
    gamma12: &ComparisonFn,
    gamma21: &ComparisonFn,
    params: &AlgorithmParams,
) -> Result<SmallGainIntervals, GainError> {
    let gamma = loop_gain(gamma12, gamma21);
    let gamma_inv = loop_gain_inverse(gamma12, gamma21, params.inversion_tol);

    let mut intervals = Vec::new();
    let mut diagnostics = Vec::new();
    let mut fixed_steps = 0;
    let mut unconverged = 0;
    let mut monotone = true;
    let mut s = 0.0;
    let mut outer = 0;
    let mut tally = |run: &FixedPointRun| {
        if !run.converged {
            unconverged += 1;
        }
        monotone &= run.monotone;
    };

    let terminated_by = loop {
        if outer == params.max_outer_iters {
            break Termination::OuterCap;
        }
        outer += 1;
        let probe = s + params.delta;
        match classify_point(&gamma, probe, params.eps_fix)? {
            PointClass::Fixed => {
                fixed_steps += 1;
                s = probe;
            }
            PointClass::Below => {
                let lower_run = fixed_point_limit(&gamma, probe, params)?;
                let upper_run = fixed_point_limit(&gamma_inv, probe, params)?;
                tally(&lower_run);
                tally(&upper_run);
                let upper = upper_run.limit;
                intervals.push(SmallGainInterval {
                    lower: lower_run.limit.value(),
                    upper: upper.value(),
                });
                diagnostics.push(IntervalDiagnostics {
                    outer_iteration: outer,
                    probe,
                    lower_run,
                    upper_run,
                });
                match upper {
                    Limit::Infinite => break Termination::UpperInfinite,
                    Limit::Finite(m) => s = m,
                }
            }
            PointClass::Above => {
                let run = fixed_point_limit(&gamma, probe, params)?;
                tally(&run);
                match run.limit {
                    Limit::Infinite => break Termination::DivergentAbove,
                    Limit::Finite(m) => s = m,
                }
            }
        }
    };

    Ok(SmallGainIntervals {
        ell: intervals.len(),
        intervals,
        terminated_by,
        outer_iterations: outer,
        fixed_steps,
        unconverged_limits: unconverged,
        diagnostics,
        monotone,
    })
}

/// Dense scan of `sign(γ(s) - s)` on `n` uniform points of `(0, s_max]`.
///
/// Returns maximal runs where `γ(s) < s`, each bracketed by the last
/// non-negative grid point before it (or 0) and the first one after it
/// (or `s_max`).
pub fn brute_force_intervals(gamma: &ComparisonFn, s_max: f64, n: usize) -> Result<Vec<(f64, f64)>, GainError> {
    let mut out = Vec::new();
    let mut run_start = None;
    let mut prev = 0.0;
    for j in 1..=n {
        let s = if j == n { s_max } else { s_max * j as f64 / n as f64 };
        let below = gamma.eval(s)? < s;
        match (below, run_start) {
            (true, None) => run_start = Some(prev),
            (false, Some(start)) => {
                out.push((start, s));
                run_start = None;
            }
            _ => {}
        }
        prev = s;
    }
    if let Some(start) = run_start {
        out.push((start, s_max));
    }
    Ok(out)
}
