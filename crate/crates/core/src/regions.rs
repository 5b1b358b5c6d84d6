//! Level sets of the storage functions, the nested sets `A_k ⊂ B_k`
//! attached to each small-gain interval, and the composite storage
//! function `V(x) = max{σ(V₁(x₁)), V₂(x₂)}`.
//!
//! With `L_i(δ) = {x_i : V_i(x_i) ≤ δ}`:
//!
//! ```text
//! A_k = L₁(max{M̲_k, γ₁₂(M̲_k)}) × L₂(max{γ₂₁(M̲_k), γ₂₁∘γ₂₁(M̲_k)})
//! B_k = L₁(M̄_k) × L₂(γ₂₁(M̄_k))
//! ```
//!
//! The inner composition in the `A_k` threshold can be switched to
//! `γ₂₁∘γ₁₂` through [`InnerComposition`].

use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::comparison::{ComparisonFn, GainError, SigmaFn};
use crate::expr::{self, EvalError, Expr, ParseError, Schema};
use crate::intervals::SmallGainIntervals;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegionError {
    #[error("state has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("region index {k} outside 1..={ell}")]
    KOutOfRange { k: usize, ell: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gain(#[from] GainError),
}

/// Storage function `V_i` of one subsystem, over the global names of that
/// subsystem's state block (`x1..x{n1}` or `x{n1+1}..x{n}`).
#[derive(Debug, Clone, PartialEq)]
pub struct StorageFn {
    body: Expr,
    dim: usize,
    first: usize,
}

impl StorageFn {
    /// Parse `text` over the block `x{first}..x{first+dim-1}`.
    pub fn parse(text: &str, first: usize, dim: usize) -> Result<Self, ParseError> {
        let body = expr::parse(text, &Schema::state_block(first, dim))?;
        Ok(Self { body, dim, first })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// 1-based global index of the block's first state variable.
    pub fn first(&self) -> usize {
        self.first
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, RegionError> {
        if x.len() != self.dim {
            return Err(RegionError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.body.eval(x)?)
    }

    /// Sample check that `V(0) = 0` and `V(x) > 0` away from the origin:
    /// axis points at geometric radii up to `half_width` plus `samples`
    /// uniform points of the box.
    pub fn check_positive_definite<R: Rng>(&self, half_width: f64, samples: usize, rng: &mut R) -> PositivityReport {
        let zero = alloc::vec![0.0; self.dim];
        let v_at_zero = self.eval(&zero).unwrap_or(f64::NAN);
        let mut failures = Vec::new();
        let mut failure_count = 0;
        let mut checked = 0;
        let mut probe = |x: &[f64]| {
            checked += 1;
            let ok = matches!(self.eval(x), Ok(v) if v > 0.0);
            if !ok {
                failure_count += 1;
                if failures.len() < 16 {
                    failures.push(x.to_vec());
                }
            }
        };
        let mut r = half_width * 1e-6;
        while r <= half_width {
            for axis in 0..self.dim {
                for sign in [-1.0, 1.0] {
                    let mut x = zero.clone();
                    x[axis] = sign * r;
                    probe(&x);
                }
            }
            r *= 10.0;
        }
        let mut x = zero.clone();
        for _ in 0..samples {
            for xi in x.iter_mut() {
                *xi = rng.gen_range(-half_width..=half_width);
            }
            if x.iter().any(|&v| v != 0.0) {
                probe(&x);
            }
        }
        let zero_ok = v_at_zero.abs() <= 1e-9;
        PositivityReport {
            v_at_zero,
            zero_ok,
            checked,
            failure_count,
            failures,
            passed: zero_ok && failure_count == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct PositivityReport {
    pub v_at_zero: f64,
    pub zero_ok: bool,
    pub checked: usize,
    pub failure_count: usize,
    pub failures: Vec<Vec<f64>>,
    pub passed: bool,
}

/// `x ∈ L(δ)`, i.e. `v(x) ≤ δ`.
pub fn level_set_contains(v: &StorageFn, delta: f64, x: &[f64]) -> Result<bool, RegionError> {
    Ok(v.eval(x)? <= delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InnerComposition {
    /// `γ₂₁∘γ₂₁(M̲_k)`.
    #[default]
    AsPrinted,
    /// `γ₂₁∘γ₁₂(M̲_k)`.
    Gamma21Gamma12,
}

impl InnerComposition {
    pub fn name(self) -> &'static str {
        match self {
            InnerComposition::AsPrinted => "as_printed",
            InnerComposition::Gamma21Gamma12 => "gamma21_gamma12",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "as_printed" => Some(Self::AsPrinted),
            "gamma21_gamma12" => Some(Self::Gamma21Gamma12),
            _ => None,
        }
    }
}

/// Level-set thresholds of `A_k` and `B_k` (1-based `k`).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct RegionSpec {
    pub k: usize,
    pub a_thresholds: (f64, f64),
    /// `(+inf, +inf)` when `M̄_k = ∞`: `B_k` is the whole state space.
    pub b_thresholds: (f64, f64),
    pub composition: InnerComposition,
}

impl RegionSpec {
    pub fn b_unbounded(&self) -> bool {
        self.b_thresholds.0 == f64::INFINITY
    }

    pub fn contains_a(&self, v1: &StorageFn, v2: &StorageFn, x: &[f64]) -> Result<bool, RegionError> {
        in_product(v1, v2, x, self.a_thresholds)
    }

    pub fn contains_b(&self, v1: &StorageFn, v2: &StorageFn, x: &[f64]) -> Result<bool, RegionError> {
        if self.b_unbounded() {
            check_dims(v1, v2, x)?;
            return Ok(true);
        }
        in_product(v1, v2, x, self.b_thresholds)
    }
}

fn check_dims(v1: &StorageFn, v2: &StorageFn, x: &[f64]) -> Result<(), RegionError> {
    let expected = v1.dim() + v2.dim();
    if x.len() != expected {
        return Err(RegionError::DimensionMismatch { expected, got: x.len() });
    }
    Ok(())
}

fn in_product(v1: &StorageFn, v2: &StorageFn, x: &[f64], t: (f64, f64)) -> Result<bool, RegionError> {
    check_dims(v1, v2, x)?;
    let (x1, x2) = x.split_at(v1.dim());
    Ok(level_set_contains(v1, t.0, x1)? && level_set_contains(v2, t.1, x2)?)
}

pub fn build_region(
    k: usize,
    intervals: &SmallGainIntervals,
    gamma12: &ComparisonFn,
    gamma21: &ComparisonFn,
    composition: InnerComposition,
) -> Result<RegionSpec, RegionError> {
    let ell = intervals.intervals.len();
    if k == 0 || k > ell {
        return Err(RegionError::KOutOfRange { k, ell });
    }
    let iv = intervals.intervals[k - 1];
    thresholds(k, iv.lower, iv.upper, gamma12, gamma21, composition)
}

/// Thresholds for explicit endpoints `(m_lo, m_hi)`.
pub fn thresholds(
    k: usize,
    m_lo: f64,
    m_hi: f64,
    gamma12: &ComparisonFn,
    gamma21: &ComparisonFn,
    composition: InnerComposition,
) -> Result<RegionSpec, RegionError> {
    let g21_lo = gamma21.eval(m_lo)?;
    let inner = match composition {
        InnerComposition::AsPrinted => gamma21.eval(g21_lo.max(0.0))?,
        InnerComposition::Gamma21Gamma12 => gamma21.eval(gamma12.eval(m_lo)?.max(0.0))?,
    };
    let a_thresholds = (m_lo.max(gamma12.eval(m_lo)?), g21_lo.max(inner));
    let b_thresholds = if m_hi.is_finite() {
        (m_hi, gamma21.eval(m_hi)?)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    Ok(RegionSpec {
        k,
        a_thresholds,
        b_thresholds,
        composition,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub enum AbGamma {
    /// `V₂(x₂) < σ(V₁(x₁))`
    A,
    /// `V₂(x₂) > σ(V₁(x₁))`
    B,
    /// On the surface `V₂(x₂) = σ(V₁(x₁))` (within the band).
    Gamma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeV {
    pub sigma: SigmaFn,
    pub v1: StorageFn,
    pub v2: StorageFn,
}

impl CompositeV {
    /// `(σ(V₁(x₁)), V₂(x₂))`.
    pub fn parts(&self, x: &[f64]) -> Result<(f64, f64), RegionError> {
        check_dims(&self.v1, &self.v2, x)?;
        let (x1, x2) = x.split_at(self.v1.dim());
        let s = self.sigma.eval(self.v1.eval(x1)?.max(0.0))?;
        Ok((s, self.v2.eval(x2)?))
    }
}

pub fn composite_v(cv: &CompositeV, x: &[f64]) -> Result<f64, RegionError> {
    let (s, v2) = cv.parts(x)?;
    Ok(s.max(v2))
}

/// Label `x` as A, B or Γ with an absolute band `tol` around the surface.
pub fn classify_abgamma(cv: &CompositeV, x: &[f64], tol: f64) -> Result<AbGamma, RegionError> {
    let (s, v2) = cv.parts(x)?;
    Ok(if v2 < s - tol {
        AbGamma::A
    } else if v2 > s + tol {
        AbGamma::B
    } else {
        AbGamma::Gamma
    })
}

/// Euclidean distance from `p` to a set given only by its membership
/// indicator.
///
/// The origin is assumed to be a member (true for every `A_k`), so `|p|`
/// bounds the answer. A cube of half-width `min(|p|, search_radius)` around
/// `p` is scanned with `resolution` points per half-axis and each member
/// hit is refined by bisection along the segment towards `p`.
pub fn distance_to_set<F>(p: &[f64], search_radius: f64, resolution: usize, mut contains: F) -> f64
where
    F: FnMut(&[f64]) -> bool,
{
    if contains(p) {
        return 0.0;
    }
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|a| a * a).sum::<f64>());
    let mut best = norm(p);
    let radius = best.min(search_radius);
    let res = resolution.max(1) as i64;
    let n = p.len();
    let mut idx: Vec<i64> = alloc::vec![-res; n];
    let mut q = alloc::vec![0.0; n];
    let mut seg = alloc::vec![0.0; n];
    loop {
        for i in 0..n {
            q[i] = p[i] + radius * idx[i] as f64 / res as f64;
        }
        let d = libm::sqrt(q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        // d alone cannot prune: the crossing on a long segment may be the nearest
        if contains(&q) {
            // boundary between p (outside) and q (inside)
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                for i in 0..n {
                    seg[i] = p[i] + mid * (q[i] - p[i]);
                }
                if contains(&seg) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            best = best.min(hi * d);
        }
        // odometer increment
        let mut axis = 0;
        loop {
            if axis == n {
                return best;
            }
            idx[axis] += 1;
            if idx[axis] <= res {
                break;
            }
            idx[axis] = -res;
            axis += 1;
        }
    }
}
