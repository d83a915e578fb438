//! Pointwise audit of the sector inequalities along a solver trajectory.
//!
//! Each iterate `(ω_k, v_k)` is mapped to the shifted state
//! `x = (ω_k − ω*, v_k − v*(ω_k))` and the gradient-map outputs `u = (u₁, u₂)`
//! that drive `x_{k+1} = x_k − diag(αI, βI) u_k`. The audit evaluates six
//! inequalities on `(x, u)` and reports their margins (nonnegative = holds).

use serde::{Deserialize, Serialize};

use crate::certificate::{build_transform, Multipliers, TransformBlocks};
use crate::numerics::{axpy, distance, dot, norm, sub};
use crate::problem_model::{BilevelOracle, ProblemConstants};
use crate::solver::{approx_gradient, SolverConfig, Trajectory};
use crate::{Error, Result};

/// Margins above this count as holding; rounding at equilibrium can produce
/// tiny negatives.
pub const AUDIT_TOL: f64 = -1e-10;
/// Relative tolerance for the weighted-sum identity.
pub const WEIGHTED_SUM_TOL: f64 = 1e-9;
/// Tolerance on the replayed dynamics `x_{k+1} = x_k − diag(α, β) u_k`.
pub const DYNAMICS_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub k: usize,
    /// `ω_k − ω*`.
    pub x1: Vec<f64>,
    /// `v_k − v*(ω_k)`.
    pub x2: Vec<f64>,
    /// `∇̃f(ω_k, v_k)`.
    pub u1: Vec<f64>,
    /// `∇_v g(ω_k, v_k) + (v*(ω_k − α u₁) − v*(ω_k)) / β`.
    pub u2: Vec<f64>,
}

impl SystemState {
    /// `(x₁ − α u₁, x₂ − β u₂)`, the state one step later.
    pub fn predicted_next(&self, alpha: f64, beta: f64) -> (Vec<f64>, Vec<f64>) {
        (axpy(&self.x1, -alpha, &self.u1), axpy(&self.x2, -beta, &self.u2))
    }

    /// Max-abs gap between [`Self::predicted_next`] and `next`.
    pub fn dynamics_residual(&self, next: &SystemState, alpha: f64, beta: f64) -> f64 {
        let (p1, p2) = self.predicted_next(alpha, beta);
        sub(&p1, &next.x1)
            .into_iter()
            .chain(sub(&p2, &next.x2))
            .fold(0.0, |m, d| m.max(d.abs()))
    }
}

pub fn state_transform(
    oracle: &dyn BilevelOracle,
    config: &SolverConfig,
    k: usize,
    omega: &[f64],
    v: &[f64],
) -> Result<SystemState> {
    let gt = oracle.ground_truth().ok_or(Error::MissingGroundTruth)?;
    oracle.check_point(omega, v)?;
    let v_star = gt.v_star(omega);
    let u1 = approx_gradient(oracle, omega, v)?;
    let shifted = gt.v_star(&axpy(omega, -config.alpha, &u1));
    let gv = oracle.grad_g_v(omega, v);
    let drift = sub(&shifted, &v_star);
    Ok(SystemState {
        k,
        x1: sub(omega, gt.omega_star()),
        x2: sub(v, &v_star),
        u1,
        u2: axpy(&gv, 1.0 / config.beta, &drift),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditCheck {
    /// `⟨u₁, x₁⟩ ≥ (3μ_f/8)‖x₁‖² − (2H_v²/μ_f)‖x₂‖²`.
    UpperCorrelation,
    /// `‖u₁‖² ≤ 2K‖x₁‖² + 4H_v²‖x₂‖²`.
    UpperGrowth,
    /// `⟨u₂, x₂⟩ ≥ (3μ_g/8)‖x₂‖² − (2α²H²/(β²μ_g³))‖u₁‖²`.
    LowerCorrelation,
    /// `‖u₂‖² ≤ 2L_g²‖x₂‖² + (2α²H²/(β²μ_g²))‖u₁‖²`.
    LowerGrowth,
    /// `[x; u]ᵀ N0 [x; u] ≤ 0`.
    WeightedQuadraticForm,
    /// `‖σ‖ ≤ ‖ξ‖` with `(ξ, σ) = M⁻¹(x, u)`.
    TransformedSector,
}

impl AuditCheck {
    pub const ALL: [AuditCheck; 6] = [
        AuditCheck::UpperCorrelation,
        AuditCheck::UpperGrowth,
        AuditCheck::LowerCorrelation,
        AuditCheck::LowerGrowth,
        AuditCheck::WeightedQuadraticForm,
        AuditCheck::TransformedSector,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AuditCheck::UpperCorrelation => "upper_correlation",
            AuditCheck::UpperGrowth => "upper_growth",
            AuditCheck::LowerCorrelation => "lower_correlation",
            AuditCheck::LowerGrowth => "lower_growth",
            AuditCheck::WeightedQuadraticForm => "weighted_quadratic_form",
            AuditCheck::TransformedSector => "transformed_sector",
        }
    }
}

/// Margins of the six checks at one state, in [`AuditCheck::ALL`] order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMargins {
    pub k: usize,
    pub margins: [f64; 6],
    /// `|m₅ − Σ λᵢ mᵢ − slack ‖u₁‖²| / (1 + Σ |terms|)`.
    pub weighted_sum_residual: f64,
}

/// Evaluates all six margins at `state`.
pub fn step_margins(
    c: &ProblemConstants,
    config: &SolverConfig,
    mult: &Multipliers,
    blocks: &TransformBlocks,
    state: &SystemState,
) -> StepMargins {
    let (alpha, beta) = (config.alpha, config.beta);
    let hv2 = c.h_v * c.h_v;
    let coupling = 2.0 * alpha * alpha * c.h * c.h / (beta * beta * c.mu_g * c.mu_g);
    let x1sq = dot(&state.x1, &state.x1);
    let x2sq = dot(&state.x2, &state.x2);
    let u1sq = dot(&state.u1, &state.u1);
    let u2sq = dot(&state.u2, &state.u2);
    let u1x1 = dot(&state.u1, &state.x1);
    let u2x2 = dot(&state.u2, &state.x2);

    let m1 = u1x1 - 0.375 * c.mu_f * x1sq + 2.0 * hv2 / c.mu_f * x2sq;
    let m2 = 2.0 * c.upper_growth() * x1sq + 4.0 * hv2 * x2sq - u1sq;
    let m3 = u2x2 - 0.375 * c.mu_g * x2sq + coupling / c.mu_g * u1sq;
    let m4 = 2.0 * c.l_g * c.l_g * x2sq + coupling * u1sq - u2sq;
    let m5 = -(mult.a * x1sq + mult.b * x2sq + mult.lambda3 / 3.0 * u1sq + mult.lambda4 * u2sq
        - mult.lambda1 * u1x1
        - mult.lambda2 * u2x2);
    let (xi, sigma) = blocks.invert(&state.x1, &state.x2, &state.u1, &state.u2);
    let m6 = norm(&xi) - norm(&sigma);

    let slack = mult.cross_coupling_slack(c, alpha, beta);
    let terms = [
        mult.lambda1 * m1,
        mult.lambda3 * m2,
        mult.lambda2 * m3,
        mult.lambda4 * m4,
        slack * u1sq,
    ];
    let scale: f64 = 1.0 + m5.abs() + terms.iter().map(|t| t.abs()).sum::<f64>();
    let weighted_sum_residual = (m5 - terms.iter().sum::<f64>()).abs() / scale;
    StepMargins {
        k: state.k,
        margins: [m1, m2, m3, m4, m5, m6],
        weighted_sum_residual,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub check: AuditCheck,
    pub min_margin: f64,
    pub argmin_step: usize,
    pub first_violation: Option<usize>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub steps_audited: usize,
    pub checks: Vec<CheckSummary>,
    /// Largest [`StepMargins::weighted_sum_residual`].
    pub max_weighted_sum_residual: f64,
    /// Largest gap of the replayed dynamics between consecutive states.
    pub max_dynamics_residual: f64,
    /// Steps where the quadratic form held but the transformed sector failed.
    pub implication_failures: Vec<usize>,
    pub all_passed: bool,
}

impl AuditReport {
    pub fn check(&self, which: AuditCheck) -> &CheckSummary {
        self.checks
            .iter()
            .find(|c| c.check == which)
            .expect("every check is summarized")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Audits every logged step of `traj`, which must be logged with stride 1.
pub fn sector_audit(
    oracle: &dyn BilevelOracle,
    c: &ProblemConstants,
    config: &SolverConfig,
    traj: &Trajectory,
    mult: &Multipliers,
) -> Result<AuditReport> {
    if oracle.ground_truth().is_none() {
        return Err(Error::MissingGroundTruth);
    }
    if traj.steps.is_empty() {
        return Err(Error::InvalidInput("cannot audit an empty trajectory".into()));
    }
    if traj.steps.windows(2).any(|w| w[1].k != w[0].k + 1) {
        return Err(Error::InvalidInput(
            "audit requires a trajectory logged with stride 1".into(),
        ));
    }
    let transform = build_transform(mult, oracle.upper_dim(), oracle.lower_dim())?;
    let blocks = transform.blocks;

    let mut summaries: Vec<CheckSummary> = AuditCheck::ALL
        .iter()
        .map(|&check| CheckSummary {
            check,
            min_margin: f64::INFINITY,
            argmin_step: traj.steps[0].k,
            first_violation: None,
            passed: true,
        })
        .collect();
    let mut max_ws = 0.0f64;
    let mut max_dyn = 0.0f64;
    let mut implication_failures = Vec::new();
    let mut prev: Option<SystemState> = None;

    for step in &traj.steps {
        let state = state_transform(oracle, config, step.k, &step.omega, &step.v)?;
        if let Some(p) = &prev {
            max_dyn = max_dyn.max(p.dynamics_residual(&state, config.alpha, config.beta));
        }
        let sm = step_margins(c, config, mult, &blocks, &state);
        max_ws = max_ws.max(sm.weighted_sum_residual);
        for (s, &m) in summaries.iter_mut().zip(&sm.margins) {
            if m < s.min_margin {
                s.min_margin = m;
                s.argmin_step = step.k;
            }
            if !(m >= AUDIT_TOL) {
                s.passed = false;
                s.first_violation.get_or_insert(step.k);
            }
        }
        if sm.margins[4] >= AUDIT_TOL && !(sm.margins[5] >= AUDIT_TOL) {
            implication_failures.push(step.k);
        }
        prev = Some(state);
    }

    let all_passed = summaries.iter().all(|s| s.passed)
        && implication_failures.is_empty()
        && max_ws <= WEIGHTED_SUM_TOL
        && max_dyn <= DYNAMICS_TOL;
    Ok(AuditReport {
        steps_audited: traj.steps.len(),
        checks: summaries,
        max_weighted_sum_residual: max_ws,
        max_dynamics_residual: max_dyn,
        implication_failures,
        all_passed,
    })
}

/// Distance between a stored state and one recomputed from the raw iterate.
pub fn state_recompute_error(
    oracle: &dyn BilevelOracle,
    config: &SolverConfig,
    state: &SystemState,
    omega: &[f64],
    v: &[f64],
) -> Result<f64> {
    let fresh = state_transform(oracle, config, state.k, omega, v)?;
    Ok(distance(&fresh.x1, &state.x1).max(distance(&fresh.x2, &state.x2)))
}
