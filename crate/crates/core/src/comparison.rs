//! Comparison functions of class K and K∞.
//!
//! A [`ComparisonFn`] is either a parsed expression in `s`, a composition
//! of two comparison functions, or the numerical inverse of one. Class
//! membership can only be sampled, never proven; see [`validate_kinf`].

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::expr::{self, EvalError, Expr, ParseError, Schema};

/// Upper limit of bracket expansion in [`ComparisonFn::invert`].
pub const OVERFLOW_GUARD: f64 = 1e12;

/// Default relative tolerance for numerical inversion.
pub const DEFAULT_INVERSION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GainError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("comparison function evaluated at negative argument {0}")]
    NegativeArgument(f64),
    #[error("value {0} lies above g({OVERFLOW_GUARD:e}); not reachable by inversion")]
    Unreachable(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum GainClass {
    K,
    #[cfg_attr(feature = "serde", serde(rename = "K_inf"))]
    KInf,
}

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    Expr(Expr),
    Compose(Box<ComparisonFn>, Box<ComparisonFn>),
    Inverse { inner: Box<ComparisonFn>, tol: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonFn {
    repr: Repr,
    class: GainClass,
}

impl ComparisonFn {
    pub fn parse(text: &str, class: GainClass) -> Result<Self, ParseError> {
        Ok(Self::from_expr(expr::parse(text, &Schema::scalar())?, class))
    }

    pub fn from_expr(body: Expr, class: GainClass) -> Self {
        Self {
            repr: Repr::Expr(body),
            class,
        }
    }

    pub fn class(&self) -> GainClass {
        self.class
    }

    /// The expression body, when this function is a plain expression.
    pub fn body(&self) -> Option<&Expr> {
        match &self.repr {
            Repr::Expr(e) => Some(e),
            _ => None,
        }
    }

    pub fn eval(&self, s: f64) -> Result<f64, GainError> {
        if s < 0.0 {
            return Err(GainError::NegativeArgument(s));
        }
        match &self.repr {
            Repr::Expr(e) => Ok(e.eval(&[s])?),
            Repr::Compose(outer, inner) => {
                // clamp tiny negative round-off from an inner inverse
                let mid = inner.eval(s)?.max(0.0);
                outer.eval(mid)
            }
            Repr::Inverse { inner, tol } => inner.invert(s, *tol),
        }
    }

    /// Find `x` with `|g(x) - y| <= tol * max(1, y)` by bracket doubling
    /// from 1 (capped at [`OVERFLOW_GUARD`]) followed by bisection.
    pub fn invert(&self, y: f64, tol: f64) -> Result<f64, GainError> {
        if y.is_nan() || y < 0.0 {
            return Err(GainError::NegativeArgument(y));
        }
        if y == 0.0 {
            return Ok(0.0);
        }
        let band = tol * y.max(1.0);
        let mut lo = 0.0;
        let mut hi = 1.0_f64;
        loop {
            let g_hi = self.eval(hi)?;
            if g_hi.is_nan() {
                return Err(GainError::Unreachable(y));
            }
            if g_hi >= y {
                if g_hi - y <= band {
                    return Ok(hi);
                }
                break;
            }
            if hi >= OVERFLOW_GUARD {
                return Err(GainError::Unreachable(y));
            }
            lo = hi;
            hi = (hi * 2.0).min(OVERFLOW_GUARD);
        }
        let mut g_lo = self.eval(lo)?;
        let mut g_hi = self.eval(hi)?;
        loop {
            let mid = lo + 0.5 * (hi - lo);
            if mid <= lo || mid >= hi {
                break;
            }
            let g_mid = self.eval(mid)?;
            if (g_mid - y).abs() <= band {
                return Ok(mid);
            }
            if g_mid < y {
                lo = mid;
                g_lo = g_mid;
            } else {
                hi = mid;
                g_hi = g_mid;
            }
        }
        // bracket collapsed to adjacent floats
        Ok(if (y - g_lo).abs() <= (g_hi - y).abs() { lo } else { hi })
    }

    /// `s -> self(inner(s))`.
    pub fn compose(&self, inner: &ComparisonFn) -> ComparisonFn {
        let class = match (self.class, inner.class) {
            (GainClass::KInf, GainClass::KInf) => GainClass::KInf,
            _ => GainClass::K,
        };
        match (&self.repr, &inner.repr) {
            (Repr::Expr(o), Repr::Expr(i)) => ComparisonFn {
                repr: Repr::Expr(o.substitute(i)),
                class,
            },
            _ => ComparisonFn {
                repr: Repr::Compose(Box::new(self.clone()), Box::new(inner.clone())),
                class,
            },
        }
    }

    /// The numerical inverse as a comparison function in its own right.
    pub fn inverse(&self, tol: f64) -> ComparisonFn {
        if let Repr::Inverse { inner, .. } = &self.repr {
            return (**inner).clone();
        }
        ComparisonFn {
            repr: Repr::Inverse {
                inner: Box::new(self.clone()),
                tol,
            },
            class: self.class,
        }
    }
}

/// Free-function form of [`ComparisonFn::eval`].
pub fn evaluate(g: &ComparisonFn, s: f64) -> Result<f64, GainError> {
    g.eval(s)
}

/// Free-function form of [`ComparisonFn::compose`]: `s -> g(h(s))`.
pub fn compose(g: &ComparisonFn, h: &ComparisonFn) -> ComparisonFn {
    g.compose(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationOptions {
    pub grid_points: usize,
    pub s_max: f64,
    /// Upper end of the linear half of the grid (clipped to `s_max`).
    pub linear_span: f64,
    /// K∞ probe: `g(s_max)` must exceed `probe_factor * g(1)`.
    pub probe_factor: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            grid_points: 1000,
            s_max: 1e13,
            linear_span: 100.0,
            probe_factor: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MonotonicityViolation {
    pub s_lo: f64,
    pub s_hi: f64,
    pub g_lo: f64,
    pub g_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct UnboundednessProbe {
    pub threshold: f64,
    pub value: f64,
    pub passed: bool,
    /// Always true: a finite probe cannot prove unboundedness.
    pub heuristic: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ValidationReport {
    pub claimed: GainClass,
    pub g_at_zero: f64,
    pub zero_ok: bool,
    pub grid_points: usize,
    pub s_max: f64,
    pub violation_count: usize,
    /// First few violating grid pairs.
    pub violations: Vec<MonotonicityViolation>,
    pub eval_errors: Vec<String>,
    /// First grid point where the function overflowed to +inf.
    pub overflow_at: Option<f64>,
    pub unboundedness: Option<UnboundednessProbe>,
    pub passed: bool,
}

const MAX_RECORDED: usize = 16;

/// Sample-based check of class K (and K∞ when claimed) with the default
/// probe settings.
pub fn validate_kinf(g: &ComparisonFn, grid_points: usize, s_max: f64) -> ValidationReport {
    validate_with(
        g,
        &ValidationOptions {
            grid_points,
            s_max,
            ..ValidationOptions::default()
        },
    )
}

pub fn validation_grid(opts: &ValidationOptions) -> Vec<f64> {
    let n = opts.grid_points.max(2);
    let n_geo = n.div_ceil(2);
    let n_lin = n - n_geo;
    let s_max = opts.s_max;
    let start = (1e-6_f64).min(s_max * 1e-6);
    let ratio = libm::pow(s_max / start, 1.0 / (n_geo - 1).max(1) as f64);
    let mut grid: Vec<f64> = (0..n_geo)
        .map(|i| {
            if i + 1 == n_geo {
                s_max
            } else {
                start * libm::pow(ratio, i as f64)
            }
        })
        .collect();
    let span = opts.linear_span.min(s_max);
    grid.extend((1..=n_lin).map(|i| span * i as f64 / n_lin as f64));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

pub fn validate_with(g: &ComparisonFn, opts: &ValidationOptions) -> ValidationReport {
    let mut eval_errors = Vec::new();
    let g_at_zero = match g.eval(0.0) {
        Ok(v) => v,
        Err(e) => {
            eval_errors.push(e.to_string());
            f64::NAN
        }
    };
    let zero_ok = g_at_zero.abs() <= 1e-9;

    let grid = validation_grid(opts);
    let mut violations = Vec::new();
    let mut violation_count = 0;
    let mut overflow_at = None;
    let mut prev = (0.0, g_at_zero);
    for &s in &grid {
        let v = match g.eval(s) {
            Ok(v) => v,
            Err(e) => {
                violation_count += 1;
                if eval_errors.len() < MAX_RECORDED {
                    eval_errors.push(alloc::format!("s = {s:e}: {e}"));
                }
                continue;
            }
        };
        if v == f64::INFINITY {
            overflow_at = Some(s);
            break;
        }
        if v.is_nan() || !(v > prev.1) {
            violation_count += 1;
            if violations.len() < MAX_RECORDED {
                violations.push(MonotonicityViolation {
                    s_lo: prev.0,
                    s_hi: s,
                    g_lo: prev.1,
                    g_hi: v,
                });
            }
        }
        prev = (s, v);
    }

    let unboundedness = (g.class() == GainClass::KInf).then(|| {
        let threshold = opts.probe_factor * g.eval(1.0).unwrap_or(f64::NAN);
        let value = if overflow_at.is_some() {
            f64::INFINITY
        } else {
            g.eval(opts.s_max).unwrap_or(f64::NAN)
        };
        UnboundednessProbe {
            threshold,
            value,
            passed: value > threshold,
            heuristic: true,
        }
    });

    let passed =
        zero_ok && violation_count == 0 && eval_errors.is_empty() && unboundedness.as_ref().is_none_or(|p| p.passed);
    ValidationReport {
        claimed: g.class(),
        g_at_zero,
        zero_ok,
        grid_points: grid.len(),
        s_max: opts.s_max,
        violation_count,
        violations,
        eval_errors,
        overflow_at,
        unboundedness,
        passed,
    }
}

/// `σ = (γ₁₂⁻¹ + γ₂₁) / 2`, the separating function between the graphs of
/// `γ₂₁` and `γ₁₂⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaFn {
    gamma12_inv: ComparisonFn,
    gamma21: ComparisonFn,
}

/// Values of `γ₂₁(r) <= σ(r) <= γ₁₂⁻¹(r)` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sandwich {
    pub r: f64,
    pub gamma21: f64,
    pub sigma: f64,
    pub gamma12_inv: f64,
}

impl Sandwich {
    /// `min(σ - γ₂₁, γ₁₂⁻¹ - σ)`; positive iff the strict sandwich holds.
    pub fn margin(&self) -> f64 {
        (self.sigma - self.gamma21).min(self.gamma12_inv - self.sigma)
    }
}

pub fn make_sigma(gamma12: &ComparisonFn, gamma21: &ComparisonFn, tol: f64) -> SigmaFn {
    SigmaFn {
        gamma12_inv: gamma12.inverse(tol),
        gamma21: gamma21.clone(),
    }
}

impl SigmaFn {
    pub fn eval(&self, r: f64) -> Result<f64, GainError> {
        Ok(self.sandwich(r)?.sigma)
    }

    pub fn sandwich(&self, r: f64) -> Result<Sandwich, GainError> {
        let gamma12_inv = self.gamma12_inv.eval(r)?;
        let gamma21 = self.gamma21.eval(r)?;
        Ok(Sandwich {
            r,
            gamma21,
            sigma: 0.5 * (gamma12_inv + gamma21),
            gamma12_inv,
        })
    }
}
