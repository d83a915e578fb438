//! Bilevel problem oracles, problem constants, and sampled assumption checks.
//!
//! An oracle exposes first- and second-order information of the upper
//! objective `f(ω, v)` and the lower objective `g(ω, v)`. Oracles built from
//! closed forms (see [`crate::testbed`]) can also expose ground truth: the
//! lower solution map `v*(ω)`, the minimizer `ω*` of the reduced objective
//! `f*(ω) = f(ω, v*(ω))`, and `f*` itself.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, norm, spectral_norm, sub, DenseMatrix};
use crate::{Error, Result};

/// Relative slack allowed on non-strict sampled inequalities.
pub const VALIDATION_REL_TOL: f64 = 1e-9;

/// Closed-form knowledge of the lower solution and the reduced objective.
pub trait GroundTruth: Send + Sync {
    /// `v*(ω)`, the unique minimizer of `g(ω, ·)`.
    fn v_star(&self, omega: &[f64]) -> Vec<f64>;
    /// `ω*`, the minimizer of `f*`.
    fn omega_star(&self) -> &[f64];
    /// `f*(ω) = f(ω, v*(ω))`.
    fn f_star(&self, omega: &[f64]) -> f64;
}

/// Derivative oracle for a bilevel problem with `ω ∈ ℝᵐ`, `v ∈ ℝⁿ`.
///
/// Implementations must be pure functions of their arguments so that several
/// runs can share one oracle across threads.
pub trait BilevelOracle: Send + Sync {
    /// Dimension `m` of the upper variable.
    fn upper_dim(&self) -> usize;
    /// Dimension `n` of the lower variable.
    fn lower_dim(&self) -> usize;

    /// `∇_ω f(ω, v)`, length `m`.
    fn grad_f_omega(&self, omega: &[f64], v: &[f64]) -> Vec<f64>;
    /// `∇_v f(ω, v)`, length `n`.
    fn grad_f_v(&self, omega: &[f64], v: &[f64]) -> Vec<f64>;
    /// `∇_v g(ω, v)`, length `n`.
    fn grad_g_v(&self, omega: &[f64], v: &[f64]) -> Vec<f64>;
    /// `∇²_vv g(ω, v)`, `n × n`.
    fn hess_g_vv(&self, omega: &[f64], v: &[f64]) -> DenseMatrix;
    /// `∇²_ωv g(ω, v)`, `m × n`.
    fn hess_g_omega_v(&self, omega: &[f64], v: &[f64]) -> DenseMatrix;

    fn ground_truth(&self) -> Option<&dyn GroundTruth> {
        None
    }

    fn check_point(&self, omega: &[f64], v: &[f64]) -> Result<()> {
        if omega.len() != self.upper_dim() {
            return Err(Error::DimensionMismatch {
                what: "upper variable ω",
                expected: self.upper_dim(),
                found: omega.len(),
            });
        }
        if v.len() != self.lower_dim() {
            return Err(Error::DimensionMismatch {
                what: "lower variable v",
                expected: self.lower_dim(),
                found: v.len(),
            });
        }
        Ok(())
    }
}

type VecFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
type MatFn = Box<dyn Fn(&[f64], &[f64]) -> DenseMatrix + Send + Sync>;

/// Oracle assembled from closures, for problems without a dedicated type.
pub struct ClosureOracle {
    m: usize,
    n: usize,
    grad_f_omega: VecFn,
    grad_f_v: VecFn,
    grad_g_v: VecFn,
    hess_g_vv: MatFn,
    hess_g_omega_v: MatFn,
}

impl ClosureOracle {
    /// Oracle with `f ≡ 0` and `g(ω, v) = ½‖v‖²`; override pieces with the `with_*` builders.
    pub fn new(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            grad_f_omega: Box::new(move |_, _| vec![0.0; m]),
            grad_f_v: Box::new(move |_, _| vec![0.0; n]),
            grad_g_v: Box::new(|_, v| v.to_vec()),
            hess_g_vv: Box::new(move |_, _| DenseMatrix::identity(n)),
            hess_g_omega_v: Box::new(move |_, _| DenseMatrix::zeros(m, n)),
        }
    }

    pub fn with_grad_f_omega(mut self, f: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.grad_f_omega = Box::new(f);
        self
    }

    pub fn with_grad_f_v(mut self, f: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.grad_f_v = Box::new(f);
        self
    }

    pub fn with_grad_g_v(mut self, f: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.grad_g_v = Box::new(f);
        self
    }

    pub fn with_hess_g_vv(mut self, f: impl Fn(&[f64], &[f64]) -> DenseMatrix + Send + Sync + 'static) -> Self {
        self.hess_g_vv = Box::new(f);
        self
    }

    pub fn with_hess_g_omega_v(
        mut self,
        f: impl Fn(&[f64], &[f64]) -> DenseMatrix + Send + Sync + 'static,
    ) -> Self {
        self.hess_g_omega_v = Box::new(f);
        self
    }
}

impl BilevelOracle for ClosureOracle {
    fn upper_dim(&self) -> usize {
        self.m
    }
    fn lower_dim(&self) -> usize {
        self.n
    }
    fn grad_f_omega(&self, omega: &[f64], v: &[f64]) -> Vec<f64> {
        (self.grad_f_omega)(omega, v)
    }
    fn grad_f_v(&self, omega: &[f64], v: &[f64]) -> Vec<f64> {
        (self.grad_f_v)(omega, v)
    }
    fn grad_g_v(&self, omega: &[f64], v: &[f64]) -> Vec<f64> {
        (self.grad_g_v)(omega, v)
    }
    fn hess_g_vv(&self, omega: &[f64], v: &[f64]) -> DenseMatrix {
        (self.hess_g_vv)(omega, v)
    }
    fn hess_g_omega_v(&self, omega: &[f64], v: &[f64]) -> DenseMatrix {
        (self.hess_g_omega_v)(omega, v)
    }
}

/// The six scalars that drive step-size bounds and the certified rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    /// Strong convexity of the reduced objective `f*`.
    pub mu_f: f64,
    /// Strong convexity of `g(ω, ·)`.
    pub mu_g: f64,
    /// Smoothness of `g(ω, ·)`.
    pub l_g: f64,
    /// Lipschitz constant of the hypergradient in `ω`.
    pub h_omega: f64,
    /// Lipschitz constant of the hypergradient in `v`.
    pub h_v: f64,
    /// Strict bound on `‖∇²_ωv g‖₂`.
    pub h: f64,
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("mu_f", self.mu_f),
            ("mu_g", self.mu_g),
            ("l_g", self.l_g),
            ("h_omega", self.h_omega),
            ("h_v", self.h_v),
            ("h", self.h),
        ];
        for (name, val) in all {
            if !val.is_finite() || val < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "constant {name} must be finite and nonnegative, got {val}"
                )));
            }
        }
        for (name, val) in &all[..4] {
            if *val <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "constant {name} must be strictly positive, got {val}"
                )));
            }
        }
        if self.mu_g > self.l_g {
            return Err(Error::InvalidInput(format!(
                "mu_g = {} exceeds l_g = {}",
                self.mu_g, self.l_g
            )));
        }
        Ok(())
    }

    /// `H_ω² + 2 H_v² H² / μ_g²`, the growth constant of the hypergradient in `ω − ω*`.
    pub fn upper_growth(&self) -> f64 {
        self.h_omega * self.h_omega
            + 2.0 * self.h_v * self.h_v * self.h * self.h / (self.mu_g * self.mu_g)
    }
}

/// One sampled pair of points `(ω, v)` and `(ω′, v′)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub omega: Vec<f64>,
    pub v: Vec<f64>,
    pub omega_p: Vec<f64>,
    pub v_p: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assumption {
    /// `⟨∇_v g(ω,v) − ∇_v g(ω,v′), v − v′⟩ ≥ μ_g ‖v − v′‖²`
    LowerStrongConvexity,
    /// `‖∇_v g(ω,v) − ∇_v g(ω,v′)‖ ≤ L_g ‖v − v′‖`
    LowerSmoothness,
    /// `‖∇̃f(ω,v) − ∇̃f(ω′,v)‖ ≤ H_ω ‖ω − ω′‖`
    HypergradLipschitzOmega,
    /// `‖∇̃f(ω,v) − ∇̃f(ω,v′)‖ ≤ H_v ‖v − v′‖`
    HypergradLipschitzV,
    /// `‖∇²_ωv g(ω,v)‖₂ < H`
    CrossHessianBound,
    /// `⟨∇f*(ω) − ∇f*(ω′), ω − ω′⟩ ≥ μ_f ‖ω − ω′‖²`, needs ground truth.
    ReducedStrongConvexity,
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Assumption::LowerStrongConvexity => "lower_strong_convexity",
            Assumption::LowerSmoothness => "lower_smoothness",
            Assumption::HypergradLipschitzOmega => "hypergrad_lipschitz_omega",
            Assumption::HypergradLipschitzV => "hypergrad_lipschitz_v",
            Assumption::CrossHessianBound => "cross_hessian_bound",
            Assumption::ReducedStrongConvexity => "reduced_strong_convexity",
        };
        f.write_str(s)
    }
}

/// Outcome of one inequality on one sample.
///
/// `ratio` is the claimed side over the observed side, oriented so that
/// `ratio ≥ 1` means the inequality holds. Vacuous checks (zero displacement)
/// report `+∞`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub assumption: Assumption,
    #[serde(with = "crate::serde_util")]
    pub ratio: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionSummary {
    pub passed: bool,
    #[serde(with = "crate::serde_util")]
    pub worst_ratio: f64,
    pub worst_sample: Option<usize>,
    pub evaluated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub per_sample: Vec<Vec<CheckOutcome>>,
    pub summary: BTreeMap<Assumption, AssumptionSummary>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.summary.values().all(|s| s.passed)
    }

    pub fn passed(&self, assumption: Assumption) -> Option<bool> {
        self.summary.get(&assumption).map(|s| s.passed)
    }
}

/// Falsification test for the constants on a set of sampled point pairs.
///
/// `approx_grad` must be the hypergradient bound to `oracle` (normally
/// [`crate::solver::approx_gradient`]). Strong convexity of `f*` is checked
/// only when the oracle carries ground truth.
pub fn validate_constants<F>(
    oracle: &dyn BilevelOracle,
    constants: &ProblemConstants,
    samples: &[SamplePair],
    approx_grad: F,
) -> Result<ValidationReport>
where
    F: Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    if samples.is_empty() {
        return Err(Error::InvalidInput("at least one sample pair is required".into()));
    }
    for s in samples {
        oracle.check_point(&s.omega, &s.v)?;
        oracle.check_point(&s.omega_p, &s.v_p)?;
    }
    let truth = oracle.ground_truth();

    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let mut out = Vec::with_capacity(6);
        let dv = sub(&s.v, &s.v_p);
        let dv_norm = norm(&dv);
        let domega = sub(&s.omega, &s.omega_p);
        let domega_norm = norm(&domega);

        let gg = oracle.grad_g_v(&s.omega, &s.v);
        let gg_p = oracle.grad_g_v(&s.omega, &s.v_p);
        let dgg = sub(&gg, &gg_p);
        out.push(lower_bound_check(
            Assumption::LowerStrongConvexity,
            dot(&dgg, &dv),
            constants.mu_g * dv_norm * dv_norm,
        ));
        out.push(upper_bound_check(
            Assumption::LowerSmoothness,
            norm(&dgg),
            constants.l_g * dv_norm,
        ));

        let hg = approx_grad(&s.omega, &s.v)?;
        let hg_omega_p = approx_grad(&s.omega_p, &s.v)?;
        let hg_v_p = approx_grad(&s.omega, &s.v_p)?;
        out.push(upper_bound_check(
            Assumption::HypergradLipschitzOmega,
            norm(&sub(&hg, &hg_omega_p)),
            constants.h_omega * domega_norm,
        ));
        out.push(upper_bound_check(
            Assumption::HypergradLipschitzV,
            norm(&sub(&hg, &hg_v_p)),
            constants.h_v * dv_norm,
        ));

        let cross = spectral_norm(&oracle.hess_g_omega_v(&s.omega, &s.v))?
            .max(spectral_norm(&oracle.hess_g_omega_v(&s.omega_p, &s.v_p))?);
        out.push(strict_bound_check(constants.h, cross));

        if let Some(gt) = truth {
            let grad_at = |w: &[f64]| approx_grad(w, &gt.v_star(w));
            let dgrad = sub(&grad_at(&s.omega)?, &grad_at(&s.omega_p)?);
            out.push(lower_bound_check(
                Assumption::ReducedStrongConvexity,
                dot(&dgrad, &domega),
                constants.mu_f * domega_norm * domega_norm,
            ));
        }
        per_sample.push(out);
    }

    let mut summary: BTreeMap<Assumption, AssumptionSummary> = BTreeMap::new();
    for (idx, outcomes) in per_sample.iter().enumerate() {
        for o in outcomes {
            let entry = summary.entry(o.assumption).or_insert(AssumptionSummary {
                passed: true,
                worst_ratio: f64::INFINITY,
                worst_sample: None,
                evaluated: 0,
            });
            entry.evaluated += 1;
            entry.passed &= o.holds;
            if o.ratio < entry.worst_ratio || entry.worst_sample.is_none() {
                entry.worst_ratio = o.ratio;
                entry.worst_sample = Some(idx);
            }
        }
    }
    Ok(ValidationReport {
        per_sample,
        summary,
    })
}

/// `observed ≥ claimed`, e.g. a curvature lower bound.
fn lower_bound_check(assumption: Assumption, observed: f64, claimed: f64) -> CheckOutcome {
    let ratio = if claimed == 0.0 {
        f64::INFINITY
    } else {
        observed / claimed
    };
    CheckOutcome {
        assumption,
        ratio,
        holds: ratio >= 1.0 - VALIDATION_REL_TOL,
    }
}

/// `observed ≤ claimed`, e.g. a Lipschitz bound.
fn upper_bound_check(assumption: Assumption, observed: f64, claimed: f64) -> CheckOutcome {
    let ratio = if observed == 0.0 {
        f64::INFINITY
    } else {
        claimed / observed
    };
    CheckOutcome {
        assumption,
        ratio,
        holds: ratio >= 1.0 - VALIDATION_REL_TOL,
    }
}

/// `observed < bound`; a zero cross Hessian is accepted with any bound, including zero.
fn strict_bound_check(bound: f64, observed: f64) -> CheckOutcome {
    let ratio = if observed == 0.0 {
        f64::INFINITY
    } else {
        bound / observed
    };
    CheckOutcome {
        assumption: Assumption::CrossHessianBound,
        ratio,
        holds: observed == 0.0 || observed < bound,
    }
}
