//! Pointwise numerical checks of the stability hypotheses: the
//! small-gain condition on an interval, the ISS-Lyapunov implication of
//! each subsystem, and the density propagation inequality
//! `div(ρ_k f) ≥ q_k` on a box approximating `D_k`.
//!
//! None of these prove anything between sample points. Derivatives are
//! central differences; every inequality is relaxed by `fd_slack`.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use thiserror::Error;

use crate::comparison::{ComparisonFn, GainError};
use crate::expr::{EvalError, Expr};
use crate::regions::{RegionError, RegionSpec, StorageFn};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gain(#[from] GainError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("{what} has dimension {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Violations kept in full per report; the rest are only counted.
pub const MAX_RECORDED_VIOLATIONS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Violation {
    /// Sample or grid index; violations are listed in index order.
    pub index: usize,
    pub point: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct CheckReport {
    pub checked_points: usize,
    /// Points where the check's trigger did not hold (vacuous).
    pub skipped_points: usize,
    /// Points skipped because a derivative does not exist there.
    pub nondifferentiable_points: usize,
    pub violation_count: usize,
    pub violations: Vec<Violation>,
    /// `+inf` when nothing was checked.
    pub min_margin: f64,
    pub notes: Vec<String>,
}

impl Default for CheckReport {
    fn default() -> Self {
        Self {
            checked_points: 0,
            skipped_points: 0,
            nondifferentiable_points: 0,
            violation_count: 0,
            violations: Vec::new(),
            min_margin: f64::INFINITY,
            notes: Vec::new(),
        }
    }
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }

    /// Count a checked point; `margin < 0` is a violation.
    pub fn record(&mut self, index: usize, point: &[f64], lhs: f64, rhs: f64, margin: f64) {
        self.checked_points += 1;
        // NaN margins count as violations
        if !(margin >= 0.0) {
            self.violation_count += 1;
            if self.violations.len() < MAX_RECORDED_VIOLATIONS {
                self.violations.push(Violation {
                    index,
                    point: point.to_vec(),
                    lhs,
                    rhs,
                    margin,
                });
            }
        }
        if margin < self.min_margin || margin.is_nan() {
            self.min_margin = margin;
        }
    }

    /// Fraction of checked points that violated the inequality.
    pub fn violation_fraction(&self) -> f64 {
        if self.checked_points == 0 {
            0.0
        } else {
            self.violation_count as f64 / self.checked_points as f64
        }
    }
}

/// Axis-aligned box `[lo_1, hi_1] × … × [lo_n, hi_n]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AxisBox(pub Vec<(f64, f64)>);

impl AxisBox {
    pub fn cube(dim: usize, half_width: f64) -> Self {
        AxisBox(alloc::vec![(-half_width, half_width); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.0).all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    /// Euclidean distance from `x` to the box (0 inside).
    pub fn distance(&self, x: &[f64]) -> f64 {
        let sq: f64 = x
            .iter()
            .zip(&self.0)
            .map(|(v, (lo, hi))| {
                let d = if v < lo {
                    lo - v
                } else if v > hi {
                    v - hi
                } else {
                    0.0
                };
                d * d
            })
            .sum();
        libm::sqrt(sq)
    }

    pub fn sample_into<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        for (o, (lo, hi)) in out.iter_mut().zip(&self.0) {
            *o = if lo < hi { rng.gen_range(*lo..=*hi) } else { *lo };
        }
    }

    /// The same box scaled by `factor` about its centre.
    pub fn scaled(&self, factor: f64) -> Self {
        AxisBox(
            self.0
                .iter()
                .map(|(lo, hi)| {
                    let c = 0.5 * (lo + hi);
                    let h = 0.5 * (hi - lo) * factor;
                    (c - h, c + h)
                })
                .collect(),
        )
    }

    /// Regular grid with `counts[i]` points on axis `i` (endpoints
    /// included), in lexicographic order with the last axis fastest.
    pub fn grid(&self, counts: &[usize]) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = self
            .0
            .iter()
            .zip(counts)
            .map(|((lo, hi), &c)| {
                if c <= 1 {
                    alloc::vec![0.5 * (lo + hi)]
                } else {
                    (0..c).map(|i| lo + (hi - lo) * i as f64 / (c - 1) as f64).collect()
                }
            })
            .collect();
        let mut out = Vec::new();
        let mut idx = alloc::vec![0usize; axes.len()];
        if axes.iter().any(Vec::is_empty) {
            return out;
        }
        loop {
            out.push(idx.iter().zip(&axes).map(|(&i, a)| a[i]).collect());
            let mut axis = axes.len();
            loop {
                if axis == 0 {
                    return out;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < axes[axis].len() {
                    break;
                }
                idx[axis] = 0;
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|a| a * a).sum())
}

/// Margins `s - γ₁₂(γ₂₁(s))` at `samples` equally spaced interior points of
/// `(lower, upper)`. An infinite `upper` is clipped to `max(10, 10·lower)`.
pub fn check_sgc_on_interval(
    gamma12: &ComparisonFn,
    gamma21: &ComparisonFn,
    lower: f64,
    upper: f64,
    samples: usize,
) -> Result<CheckReport, GainError> {
    let mut report = CheckReport::default();
    let hi = if upper.is_finite() {
        upper
    } else {
        report.notes.push(alloc::format!(
            "unbounded interval clipped at {}",
            (10.0 * lower).max(10.0)
        ));
        (10.0 * lower).max(10.0)
    };
    for j in 1..=samples {
        let s = lower + (hi - lower) * j as f64 / (samples + 1) as f64;
        let g = gamma12.eval(gamma21.eval(s)?)?;
        report.record(j - 1, &[s], g, s, s - g);
    }
    Ok(report)
}

/// One subsystem's certificate: `V_i(x_i) ≥ max{γ_ij(V_j(x_j)), γ_i(|u_i|)}`
/// implies `∇V_i·f_i ≤ −α_i(|x_i|)`.
#[derive(Debug, Clone)]
pub struct LyapunovCertificate<'a> {
    pub v_self: &'a StorageFn,
    pub v_other: &'a StorageFn,
    /// `f_i`, one expression per component of `x_i`, over `x1..xn, u1..um, t`.
    pub field: &'a [Expr],
    pub gamma_ij: &'a ComparisonFn,
    pub gamma_i: &'a ComparisonFn,
    pub alpha_i: &'a ComparisonFn,
    /// Total input dimension `m`.
    pub n_inputs: usize,
    /// Positions of `u_i` inside `u` (0-based).
    pub input_slots: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovOptions {
    pub samples: usize,
    /// Box for the full state `x`.
    pub state_box: AxisBox,
    /// Components of `u_i` are drawn from `[-input_magnitude, input_magnitude]`.
    pub input_magnitude: f64,
    pub fd_step: f64,
    pub fd_slack: f64,
}

/// Random-sample check of one subsystem's ISS-Lyapunov implication.
///
/// Each recorded point is `(x, u_i)`. Points where one-sided differences
/// of `V_i` disagree by more than `10·√h` are treated as kinks and skipped.
pub fn check_iss_lyapunov<R: Rng>(
    cert: &LyapunovCertificate<'_>,
    opts: &LyapunovOptions,
    rng: &mut R,
) -> Result<CheckReport, VerifyError> {
    let n1 = cert.v_self.dim();
    let n = n1 + cert.v_other.dim();
    if opts.state_box.dim() != n {
        return Err(VerifyError::Dimension {
            what: "state box",
            expected: n,
            got: opts.state_box.dim(),
        });
    }
    if cert.field.len() != n1 {
        return Err(VerifyError::Dimension {
            what: "subsystem field",
            expected: n1,
            got: cert.field.len(),
        });
    }
    // block offsets in the full state (0-based)
    let self_off = cert.v_self.first() - 1;
    let other_off = cert.v_other.first() - 1;
    let m = cert.n_inputs;
    let mi = cert.input_slots.len();

    let mut report = CheckReport::default();
    let mut vars = alloc::vec![0.0; n + m + 1];
    let mut point = alloc::vec![0.0; n + mi];
    let mut xi = alloc::vec![0.0; n1];
    let mut grad = alloc::vec![0.0; n1];
    for idx in 0..opts.samples {
        vars.iter_mut().for_each(|v| *v = 0.0);
        opts.state_box.sample_into(rng, &mut vars[..n]);
        for slot in cert.input_slots.clone() {
            vars[n + slot] = if opts.input_magnitude > 0.0 {
                rng.gen_range(-opts.input_magnitude..=opts.input_magnitude)
            } else {
                0.0
            };
        }
        point[..n].copy_from_slice(&vars[..n]);
        point[n..].copy_from_slice(&vars[n + cert.input_slots.start..n + cert.input_slots.end]);

        xi.copy_from_slice(&vars[self_off..self_off + n1]);
        let xj = &vars[other_off..other_off + cert.v_other.dim()];
        let ui = &vars[n + cert.input_slots.start..n + cert.input_slots.end];
        let v_i = cert.v_self.eval(&xi)?;
        let v_j = cert.v_other.eval(xj)?;
        let trigger = cert.gamma_ij.eval(v_j.max(0.0))?.max(cert.gamma_i.eval(norm(ui))?);
        if !(v_i >= trigger) {
            report.skipped_points += 1;
            continue;
        }

        let h = opts.fd_step * norm(&xi).max(1.0);
        let kink_tol = 10.0 * libm::sqrt(h);
        let mut kink = false;
        for c in 0..n1 {
            let orig = xi[c];
            xi[c] = orig + h;
            let fwd = cert.v_self.eval(&xi)?;
            xi[c] = orig - h;
            let bwd = cert.v_self.eval(&xi)?;
            xi[c] = orig;
            let d_plus = (fwd - v_i) / h;
            let d_minus = (v_i - bwd) / h;
            if (d_plus - d_minus).abs() > kink_tol {
                kink = true;
                break;
            }
            grad[c] = (fwd - bwd) / (2.0 * h);
        }
        if kink {
            report.nondifferentiable_points += 1;
            continue;
        }
        let mut lhs = 0.0;
        for (g, f) in grad.iter().zip(cert.field) {
            lhs += g * f.eval(&vars)?;
        }
        let rhs = -cert.alpha_i.eval(norm(&xi))?;
        report.record(idx, &point, lhs, rhs, rhs - lhs + opts.fd_slack);
    }
    Ok(report)
}

/// Density data for one gap region `D_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DpiBlock {
    pub k: usize,
    /// `ρ_k` over `x1..xn`.
    pub rho: Expr,
    /// `q_k` over `x1..xn`.
    pub q: Expr,
    pub gamma_k: ComparisonFn,
    pub domain_box: AxisBox,
    /// Points with `|x| < exclude_radius` are outside `D_k`.
    pub exclude_radius: f64,
}

impl DpiBlock {
    pub fn in_domain(&self, x: &[f64]) -> bool {
        self.domain_box.contains(x) && norm(x) >= self.exclude_radius
    }
}

/// `div(ρ f)(x, u)` by componentwise central differences with step
/// `fd_step·max(1, |x_j|)`. `field` is over `x1..xn, u1..um, t`.
pub fn divergence(rho: &Expr, field: &[Expr], x: &[f64], u: &[f64], fd_step: f64) -> Result<f64, EvalError> {
    let n = x.len();
    let mut vars = alloc::vec![0.0; n + u.len() + 1];
    vars[..n].copy_from_slice(x);
    vars[n..n + u.len()].copy_from_slice(u);
    let mut div = 0.0;
    for (j, fj) in field.iter().enumerate() {
        let h = fd_step * x[j].abs().max(1.0);
        vars[j] = x[j] + h;
        let plus = rho.eval(&vars[..n])? * fj.eval(&vars)?;
        vars[j] = x[j] - h;
        let minus = rho.eval(&vars[..n])? * fj.eval(&vars)?;
        vars[j] = x[j];
        div += (plus - minus) / (2.0 * h);
    }
    Ok(div)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpiOptions {
    /// Grid points per axis (each ≥ 8).
    pub grid: Vec<usize>,
    /// Input vectors to cross with the grid.
    pub inputs: Vec<Vec<f64>>,
    pub fd_step: f64,
    pub fd_slack: f64,
}

/// `{0}` plus `±a·e_j` for every magnitude `a > 0` and input axis `j`.
pub fn input_set(m: usize, magnitudes: &[f64]) -> Vec<Vec<f64>> {
    let mut out = alloc::vec![alloc::vec![0.0; m]];
    for &a in magnitudes.iter().filter(|a| **a > 0.0) {
        for j in 0..m {
            for sign in [1.0, -1.0] {
                let mut u = alloc::vec![0.0; m];
                u[j] = sign * a;
                out.push(u);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct DpiReport {
    pub k: usize,
    /// `div(ρ f) ≥ q − fd_slack` at triggered grid points.
    pub inequality: CheckReport,
    /// Grid points where `q ≤ 0`; tolerated as the "almost every" exceptions.
    pub q_exception_count: usize,
    pub q_exceptions: Vec<Vec<f64>>,
    pub rho_nonpositive_count: usize,
    pub rho_nonpositive: Vec<Vec<f64>>,
    pub passed: bool,
}

/// Grid check of the density propagation inequality on `block.domain_box`.
///
/// The trigger is `max_i V_i(x_i) ≥ γ_k(|u|)`; grid points outside the
/// domain (inside the excluded ball) are not visited.
pub fn check_dpi(
    block: &DpiBlock,
    field: &[Expr],
    v1: &StorageFn,
    v2: &StorageFn,
    opts: &DpiOptions,
) -> Result<DpiReport, VerifyError> {
    let n = v1.dim() + v2.dim();
    if block.domain_box.dim() != n || opts.grid.len() != n {
        return Err(VerifyError::Dimension {
            what: "DPI grid",
            expected: n,
            got: block.domain_box.dim().min(opts.grid.len()),
        });
    }
    if field.len() != n {
        return Err(VerifyError::Dimension {
            what: "vector field",
            expected: n,
            got: field.len(),
        });
    }
    let mut report = DpiReport {
        k: block.k,
        inequality: CheckReport::default(),
        q_exception_count: 0,
        q_exceptions: Vec::new(),
        rho_nonpositive_count: 0,
        rho_nonpositive: Vec::new(),
        passed: false,
    };
    let n_u = opts.inputs.len();
    let mut outside = 0;
    for (gi, x) in block.domain_box.grid(&opts.grid).into_iter().enumerate() {
        if !block.in_domain(&x) {
            outside += 1;
            continue;
        }
        let rho = block.rho.eval(&x)?;
        if !(rho > 0.0) {
            report.rho_nonpositive_count += 1;
            if report.rho_nonpositive.len() < MAX_RECORDED_VIOLATIONS {
                report.rho_nonpositive.push(x.clone());
            }
        }
        let q = block.q.eval(&x)?;
        if !(q > 0.0) {
            report.q_exception_count += 1;
            if report.q_exceptions.len() < MAX_RECORDED_VIOLATIONS {
                report.q_exceptions.push(x.clone());
            }
        }
        let (x1, x2) = x.split_at(v1.dim());
        let vmax = v1.eval(x1)?.max(v2.eval(x2)?);
        for (ui, u) in opts.inputs.iter().enumerate() {
            let index = gi * n_u + ui;
            if !(vmax >= block.gamma_k.eval(norm(u))?) {
                report.inequality.skipped_points += 1;
                continue;
            }
            let div = divergence(&block.rho, field, &x, u, opts.fd_step)?;
            let mut point = x.clone();
            point.extend_from_slice(u);
            report.inequality.record(index, &point, div, q, div - q + opts.fd_slack);
        }
    }
    if outside > 0 {
        report
            .inequality
            .notes
            .push(alloc::format!("{outside} grid points inside the excluded ball"));
    }
    report.passed = report.inequality.passed() && report.rho_nonpositive_count == 0;
    Ok(report)
}

/// Sample check of `A_k ∖ B_{k−1} ⊂ cl{D_k}`: points of `probe_box` in
/// `A_k ∖ B_{k−1}` that fall outside the block's domain are violations with
/// `lhs` = distance to the domain box. `a_k = None` stands for the whole
/// space, `b_prev = None` for the empty set.
#[allow(clippy::too_many_arguments)]
pub fn check_dpi_containment<R: Rng>(
    block: &DpiBlock,
    a_k: Option<&RegionSpec>,
    b_prev: Option<&RegionSpec>,
    v1: &StorageFn,
    v2: &StorageFn,
    probe_box: &AxisBox,
    samples: usize,
    rng: &mut R,
) -> Result<CheckReport, VerifyError> {
    let n = v1.dim() + v2.dim();
    let mut report = CheckReport::default();
    let mut x = alloc::vec![0.0; n];
    for idx in 0..samples {
        probe_box.sample_into(rng, &mut x);
        let in_a = match a_k {
            Some(r) => r.contains_a(v1, v2, &x)?,
            None => true,
        };
        let in_b = match b_prev {
            Some(r) => r.contains_b(v1, v2, &x)?,
            None => false,
        };
        if !in_a || in_b {
            report.skipped_points += 1;
            continue;
        }
        let d = if block.in_domain(&x) {
            0.0
        } else {
            block.domain_box.distance(&x).max(f64::MIN_POSITIVE)
        };
        report.record(idx, &x, d, 0.0, -d);
    }
    Ok(report)
}
