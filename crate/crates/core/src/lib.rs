//! Small-gain analysis of two-subsystem feedback interconnections whose
//! small-gain condition holds only on a union of intervals.
//!
//! * [`expr`]: expression language for gains, storage functions and fields.
//! * [`comparison`]: class-K∞ gains, inversion, composition and `σ`.
//! * [`intervals`]: the fixed-point search for small-gain intervals.
//! * [`regions`]: the nested sets `A_k ⊂ B_k` and the composite storage function.
//! * [`verify`]: sampled checks of the small-gain, ISS-Lyapunov and density
//!   propagation hypotheses.
//! * [`sim`]: RK4 integration and Monte Carlo ensembles.
//!
//! The crate is `no_std` and only needs `alloc`.

// `!(a < b)` is used on purpose so that NaN fails the test.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod comparison;
pub mod expr;
pub mod intervals;
pub mod regions;
pub mod sim;
pub mod verify;

pub use comparison::{ComparisonFn, GainClass, GainError, SigmaFn};
pub use expr::{parse, Expr, Schema};
pub use intervals::{find_intervals, AlgorithmParams, SmallGainInterval, SmallGainIntervals};
pub use regions::{build_region, InnerComposition, RegionSpec, StorageFn};
pub use sim::{integrate, monte_carlo_aiss, AissReport, InterconnectionSpec, VectorField};
pub use verify::{AxisBox, CheckReport};
