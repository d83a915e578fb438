//! Single-loop bilevel optimization with a small-gain rate certificate.
//!
//! The crate solves strongly-convex/strongly-convex bilevel problems
//!
//! ```text
//!   minimize_ω  f(ω, v)   s.t.  v ∈ argmin_v g(ω, v)
//! ```
//!
//! with simultaneous updates of the upper variable `ω` (driven by the
//! implicit-function hypergradient) and the lower variable `v` (one gradient
//! step on `g`). Alongside the solver sits a certification engine that turns
//! the problem constants and step sizes into a linear rate `ρ` through a
//! multiplier construction, a sector transformation and closed-form H∞ gains,
//! plus an audit that checks the underlying sector inequalities pointwise on
//! recorded trajectories.
//!
//! Module map:
//!
//! - [`numerics`]: dense matrices, SPD solves, spectral quantities, finite differences.
//! - [`problem_model`]: oracle traits, problem constants, sampled assumption checks.
//! - [`solver`]: hypergradient, single-loop and double-loop runs, rate fitting.
//! - [`certificate`]: step-size region, certified rate, multipliers, transform, verdict.
//! - [`audit`]: shifted-coordinate states and per-step sector inequality audits.
//! - [`testbed`]: quadratic instances with closed-form ground truth.
//! - [`cli`]: the `bilevel` command-line front end.

// Negated float comparisons are used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod audit;
pub mod certificate;
pub mod cli;
pub mod error;
pub mod numerics;
pub mod problem_model;
pub mod serde_util;
pub mod solver;
pub mod testbed;

pub use error::{Error, Result};
