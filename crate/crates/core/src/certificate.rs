//! Rate certification: step-size bounds, multiplier construction, the sector
//! transformation and the small-gain verdict.
//!
//! The single-loop update is viewed as a linear plant in feedback with the
//! gradient maps. Four multipliers `λ₁..λ₄` combine the sector bounds of the
//! gradient maps into one quadratic form with matrix `N0`; the congruence `M`
//! turns it into `diag(−I, I)`, after which the transformed nonlinearity has
//! gain at most one and the loop is stable at rate `ρ` when the `ρ`-scaled
//! plant has `H∞` gain below one.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numerics::DenseMatrix;
use crate::problem_model::ProblemConstants;
use crate::{Error, Result};

/// "Strictly inside" a bound means at most `(1 − STRICT_MARGIN) · bound`.
pub const STRICT_MARGIN: f64 = 1e-12;
/// Tolerance on `‖MᵀN0M − diag(−I, I)‖_max`.
pub const TRANSFORM_TOL: f64 = 1e-9;
pub const BISECTION_TOL: f64 = 1e-6;
pub const BISECTION_MAX_ITERS: usize = 60;
/// Relative offset (of `1 − ρ`) above the closed-form rate at which
/// [`certify`] evaluates the verdict; at the rate itself the gain equals one.
pub const VERDICT_OFFSET: f64 = 1e-6;

/// Identifier of a certification condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// `α < min{μ_f / (8K), 1/(24 μ_f)}`.
    AlphaBound,
    /// `β < min{μ_g / (8 L_g²), 1/(4 μ_g)}`.
    BetaBound,
    /// `α/β² < 2 μ_f μ_g⁴ / (81 H_v² H²)`.
    RatioBound,
    APositive,
    BPositive,
    /// `3λ₁²/(4λ₃) > a`.
    UpperSector,
    /// `λ₂²/(4λ₄) > b`.
    LowerSector,
    /// `(2/3)λ₃ ≥ (2α²H²/(β²μ_g³))λ₂ + (2α²H²/(β²μ_g²))λ₄`.
    CrossCoupling,
    /// `‖P‖∞ · ‖K‖ < 1`.
    SmallGain,
    /// `0 < ρ < 1`.
    RhoRange,
    /// Every pole of the scaled plant lies strictly inside radius `ρ`.
    ScaledStability,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::AlphaBound => "alpha_bound",
            Condition::BetaBound => "beta_bound",
            Condition::RatioBound => "ratio_bound",
            Condition::APositive => "a_positive",
            Condition::BPositive => "b_positive",
            Condition::UpperSector => "upper_sector",
            Condition::LowerSector => "lower_sector",
            Condition::CrossCoupling => "cross_coupling",
            Condition::SmallGain => "small_gain",
            Condition::RhoRange => "rho_range",
            Condition::ScaledStability => "scaled_stability",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepBounds {
    pub alpha_max: f64,
    pub beta_max: f64,
    /// Bound on `α/β²`; `+∞` when `H_v · H = 0`.
    #[serde(with = "crate::serde_util")]
    pub ratio_max: f64,
}

pub fn max_step_sizes(c: &ProblemConstants) -> Result<StepBounds> {
    c.validate()?;
    let alpha_max = (c.mu_f / (8.0 * c.upper_growth())).min(1.0 / (24.0 * c.mu_f));
    let beta_max = (c.mu_g / (8.0 * c.l_g * c.l_g)).min(1.0 / (4.0 * c.mu_g));
    let coupling = c.h_v * c.h_v * c.h * c.h;
    let ratio_max = if coupling == 0.0 {
        f64::INFINITY
    } else {
        2.0 * c.mu_f * c.mu_g.powi(4) / (81.0 * coupling)
    };
    Ok(StepBounds {
        alpha_max,
        beta_max,
        ratio_max,
    })
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{name} must be finite and positive, got {x}"
        )))
    }
}

/// Lists the step-size bounds that `(α, β)` fails to satisfy strictly.
pub fn step_size_violations(c: &ProblemConstants, alpha: f64, beta: f64) -> Result<Vec<Condition>> {
    check_positive("alpha", alpha)?;
    check_positive("beta", beta)?;
    let bounds = max_step_sizes(c)?;
    let inside = |x: f64, bound: f64| x <= (1.0 - STRICT_MARGIN) * bound;
    let mut violated = Vec::new();
    if !inside(alpha, bounds.alpha_max) {
        violated.push(Condition::AlphaBound);
    }
    if !inside(beta, bounds.beta_max) {
        violated.push(Condition::BetaBound);
    }
    if bounds.ratio_max.is_finite() && !inside(alpha / (beta * beta), bounds.ratio_max) {
        violated.push(Condition::RatioBound);
    }
    Ok(violated)
}

/// The two closed-form channel rates `(ρ_ω, ρ_v)`.
///
/// `ρ_ω = √(1 − (3μ_f α/4)(1 − 8Kα/μ_f))` and
/// `ρ_v = √(1 − (μ_g β/2)(1 − 4L_g²β/μ_g))`, which equal
/// `√(1 − 4λ₃a/(3λ₁²))` and `√(1 − 4λ₄b/λ₂²)` under the multiplier
/// construction of [`construct_multipliers`].
pub fn rate_components(c: &ProblemConstants, alpha: f64, beta: f64) -> Result<(f64, f64)> {
    let violated = step_size_violations(c, alpha, beta)?;
    if !violated.is_empty() {
        return Err(Error::StepSizeInfeasible { violated });
    }
    let k = c.upper_growth();
    let upper = 1.0 - 0.75 * c.mu_f * alpha * (1.0 - 8.0 * k * alpha / c.mu_f);
    let lower = 1.0 - 0.5 * c.mu_g * beta * (1.0 - 4.0 * c.l_g * c.l_g * beta / c.mu_g);
    Ok((upper.sqrt(), lower.sqrt()))
}

/// Certified linear rate for step sizes strictly inside the bounds.
pub fn certified_rate(c: &ProblemConstants, alpha: f64, beta: f64) -> Result<f64> {
    let (upper, lower) = rate_components(c, alpha, beta)?;
    Ok(upper.max(lower))
}

/// Default step sizes: half of each bound, then `α` halved until
/// `α/β²` is strictly below its bound.
pub fn auto_step_sizes(c: &ProblemConstants) -> Result<(f64, f64)> {
    let bounds = max_step_sizes(c)?;
    let beta = bounds.beta_max / 2.0;
    let mut alpha = bounds.alpha_max / 2.0;
    for _ in 0..2000 {
        if step_size_violations(c, alpha, beta)?.is_empty() {
            return Ok((alpha, beta));
        }
        alpha /= 2.0;
    }
    Err(Error::NotConverged {
        what: "automatic step-size selection",
        iterations: 2000,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub a: f64,
    pub b: f64,
}

impl Multipliers {
    /// Builds multipliers from `λ₁..λ₄`, computing `a` and `b` from the constants.
    pub fn from_lambdas(c: &ProblemConstants, lambdas: [f64; 4]) -> Self {
        let [l1, l2, l3, l4] = lambdas;
        let hv2 = c.h_v * c.h_v;
        Self {
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            lambda4: l4,
            a: 0.375 * c.mu_f * l1 - 2.0 * c.upper_growth() * l3,
            b: -(2.0 * hv2 / c.mu_f) * l1 + 0.375 * c.mu_g * l2 - 4.0 * hv2 * l3
                - 2.0 * c.l_g * c.l_g * l4,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            lambda1: s * self.lambda1,
            lambda2: s * self.lambda2,
            lambda3: s * self.lambda3,
            lambda4: s * self.lambda4,
            a: s * self.a,
            b: s * self.b,
        }
    }

    /// `3λ₁²/(4λ₃) − a`.
    pub fn upper_sector_slack(&self) -> f64 {
        3.0 * self.lambda1 * self.lambda1 / (4.0 * self.lambda3) - self.a
    }

    /// `λ₂²/(4λ₄) − b`.
    pub fn lower_sector_slack(&self) -> f64 {
        self.lambda2 * self.lambda2 / (4.0 * self.lambda4) - self.b
    }

    /// Weight of `‖u₁‖²` that the cross-coupling condition must dominate.
    pub fn cross_coupling_demand(&self, c: &ProblemConstants, alpha: f64, beta: f64) -> f64 {
        let w = 2.0 * alpha * alpha * c.h * c.h / (beta * beta * c.mu_g * c.mu_g);
        w / c.mu_g * self.lambda2 + w * self.lambda4
    }

    /// `(2/3)λ₃` minus [`Self::cross_coupling_demand`].
    pub fn cross_coupling_slack(&self, c: &ProblemConstants, alpha: f64, beta: f64) -> f64 {
        2.0 / 3.0 * self.lambda3 - self.cross_coupling_demand(c, alpha, beta)
    }

    /// First violated feasibility condition, if any.
    pub fn first_violation(&self, c: &ProblemConstants, alpha: f64, beta: f64) -> Option<Condition> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Some(Condition::UpperSector);
        }
        if !(self.a > 0.0) {
            Some(Condition::APositive)
        } else if !(self.b > 0.0) {
            Some(Condition::BPositive)
        } else if !(self.upper_sector_slack() > 0.0) {
            Some(Condition::UpperSector)
        } else if !(self.lower_sector_slack() > 0.0) {
            Some(Condition::LowerSector)
        } else if !(self.cross_coupling_slack(c, alpha, beta) >= 0.0) {
            Some(Condition::CrossCoupling)
        } else {
            None
        }
    }
}

/// [`construct_multipliers_scaled`] with the normalization `λ₂ = 1`.
pub fn construct_multipliers(c: &ProblemConstants, alpha: f64, beta: f64) -> Result<Multipliers> {
    construct_multipliers_scaled(c, alpha, beta, 1.0)
}

/// Multipliers with `λ₄ = βλ₂/2`, `λ₃ = 3αλ₁/2` and
/// `λ₁/λ₂ = (μ_g/8) / (2H_v²/μ_f + 6H_v²α)`.
///
/// When `H_v = 0` the ratio is unbounded; `λ₁/λ₂ = 1` is used unless the
/// cross-coupling condition needs more, in which case `λ₁` is raised to twice
/// its minimum (with `H_v = 0` neither `a/λ₁` nor `b` depends on `λ₁`).
pub fn construct_multipliers_scaled(
    c: &ProblemConstants,
    alpha: f64,
    beta: f64,
    lambda2: f64,
) -> Result<Multipliers> {
    c.validate()?;
    check_positive("alpha", alpha)?;
    check_positive("beta", beta)?;
    check_positive("lambda2", lambda2)?;
    let lambda4 = beta * lambda2 / 2.0;
    let lambda1 = if c.h_v > 0.0 {
        lambda2 * (c.mu_g / 8.0) / (2.0 * c.h_v * c.h_v / c.mu_f + 6.0 * c.h_v * c.h_v * alpha)
    } else {
        let trial = Multipliers::from_lambdas(c, [lambda2, lambda2, 1.5 * alpha * lambda2, lambda4]);
        let demand = trial.cross_coupling_demand(c, alpha, beta);
        // (2/3)λ₃ = αλ₁, so the condition reads λ₁ ≥ demand/α.
        lambda2.max(2.0 * demand / alpha)
    };
    let mult = Multipliers::from_lambdas(c, [lambda1, lambda2, 1.5 * alpha * lambda1, lambda4]);
    match mult.first_violation(c, alpha, beta) {
        Some(condition) => Err(Error::MultiplierInfeasible { condition }),
        None => Ok(mult),
    }
}

/// Scalar entries of the block-diagonal pieces of `M = [[M1, 0], [M2, M3]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformBlocks {
    /// `M1 = diag(p_ω I_m, p_v I_n)`.
    pub p_omega: f64,
    pub p_v: f64,
    /// `M2 = diag(q_ω I_m, q_v I_n)`.
    pub q_omega: f64,
    pub q_v: f64,
    /// `M3 = diag(r_ω I_m, r_v I_n)`.
    pub r_omega: f64,
    pub r_v: f64,
}

impl TransformBlocks {
    pub fn new(mult: &Multipliers) -> Result<Self> {
        let su = mult.upper_sector_slack();
        let sl = mult.lower_sector_slack();
        if !(su > 0.0) || !su.is_finite() {
            return Err(Error::TransformInfeasible(format!(
                "3λ₁²/(4λ₃) − a = {su} is not positive"
            )));
        }
        if !(sl > 0.0) || !sl.is_finite() {
            return Err(Error::TransformInfeasible(format!(
                "λ₂²/(4λ₄) − b = {sl} is not positive"
            )));
        }
        if !(mult.lambda3 > 0.0) || !(mult.lambda4 > 0.0) {
            return Err(Error::TransformInfeasible("λ₃ and λ₄ must be positive".into()));
        }
        let p_omega = 1.0 / su.sqrt();
        let p_v = 1.0 / sl.sqrt();
        Ok(Self {
            p_omega,
            p_v,
            q_omega: 1.5 * mult.lambda1 / mult.lambda3 * p_omega,
            q_v: mult.lambda2 / (2.0 * mult.lambda4) * p_v,
            r_omega: (3.0 / mult.lambda3).sqrt(),
            r_v: 1.0 / mult.lambda4.sqrt(),
        })
    }

    /// `(ξ, σ) = M⁻¹(x, u)` using the block-triangular structure.
    pub fn invert(&self, x1: &[f64], x2: &[f64], u1: &[f64], u2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let xi1: Vec<f64> = x1.iter().map(|x| x / self.p_omega).collect();
        let xi2: Vec<f64> = x2.iter().map(|x| x / self.p_v).collect();
        let s1 = u1
            .iter()
            .zip(&xi1)
            .map(|(u, xi)| (u - self.q_omega * xi) / self.r_omega);
        let s2 = u2.iter().zip(&xi2).map(|(u, xi)| (u - self.q_v * xi) / self.r_v);
        let sigma = s1.chain(s2).collect();
        let xi = xi1.into_iter().chain(xi2).collect();
        (xi, sigma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub n0: DenseMatrix,
    pub m: DenseMatrix,
    pub blocks: TransformBlocks,
    /// `‖MᵀN0M − diag(−I, I)‖_max`.
    pub identity_residual: f64,
}

/// Assembles `N0` and `M` over coordinates `(x₁, x₂, u₁, u₂)` of sizes
/// `(m, n, m, n)` and checks `MᵀN0M = diag(−I_{m+n}, I_{m+n})`.
pub fn build_transform(mult: &Multipliers, m: usize, n: usize) -> Result<Transform> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidInput("transform dimensions must be positive".into()));
    }
    let blocks = TransformBlocks::new(mult)?;
    let dim = 2 * (m + n);
    let (x1, x2, u1, u2) = (0, m, m + n, 2 * m + n);
    let mut n0 = vec![0.0; dim * dim];
    let mut mm = vec![0.0; dim * dim];
    let set = |buf: &mut Vec<f64>, i: usize, j: usize, v: f64| buf[i * dim + j] = v;
    for i in 0..m {
        set(&mut n0, x1 + i, x1 + i, mult.a);
        set(&mut n0, u1 + i, u1 + i, mult.lambda3 / 3.0);
        set(&mut n0, x1 + i, u1 + i, -mult.lambda1 / 2.0);
        set(&mut n0, u1 + i, x1 + i, -mult.lambda1 / 2.0);
        set(&mut mm, x1 + i, x1 + i, blocks.p_omega);
        set(&mut mm, u1 + i, x1 + i, blocks.q_omega);
        set(&mut mm, u1 + i, u1 + i, blocks.r_omega);
    }
    for i in 0..n {
        set(&mut n0, x2 + i, x2 + i, mult.b);
        set(&mut n0, u2 + i, u2 + i, mult.lambda4);
        set(&mut n0, x2 + i, u2 + i, -mult.lambda2 / 2.0);
        set(&mut n0, u2 + i, x2 + i, -mult.lambda2 / 2.0);
        set(&mut mm, x2 + i, x2 + i, blocks.p_v);
        set(&mut mm, u2 + i, x2 + i, blocks.q_v);
        set(&mut mm, u2 + i, u2 + i, blocks.r_v);
    }
    let n0 = DenseMatrix::new(dim, dim, n0)?;
    let mm = DenseMatrix::new(dim, dim, mm)?;
    let target: Vec<f64> = (0..dim).map(|i| if i < m + n { -1.0 } else { 1.0 }).collect();
    let product = mm.transpose().matmul(&n0)?.matmul(&mm)?;
    let identity_residual = product.sub(&DenseMatrix::from_diag(&target))?.max_abs();
    if !(identity_residual <= TRANSFORM_TOL) {
        return Err(Error::TransformInfeasible(format!(
            "MᵀN0M deviates from diag(−I, I) by {identity_residual:e}"
        )));
    }
    Ok(Transform {
        n0,
        m: mm,
        blocks,
        identity_residual,
    })
}

/// `sup_{|z|=1} |c / (ρz − p)| = |c| / (ρ − |p|)` for real `p` with `|p| < ρ`.
pub fn hinf_first_order(gain_c: f64, pole_p: f64, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidInput(format!("rho must lie in (0, 1], got {rho}")));
    }
    if !(pole_p.abs() < rho) {
        return Err(Error::UnstableScaledSystem { pole: pole_p, rho });
    }
    Ok(gain_c.abs() / (rho - pole_p.abs()))
}

/// One diagonal channel of the transformed plant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub pole: f64,
    pub gain: f64,
    #[serde(with = "crate::serde_util")]
    pub hinf: f64,
}

/// Poles and gains `(p, c)` of the `ω` and `v` channels of the transformed plant.
pub fn plant_channels(mult: &Multipliers, alpha: f64, beta: f64) -> Result<[(f64, f64); 2]> {
    let l1 = mult.lambda1;
    let l3 = mult.lambda3;
    let l2 = mult.lambda2;
    let l4 = mult.lambda4;
    let g1 = 9.0 * l1 * l1 / (4.0 * l3 * l3) - 3.0 * mult.a / l3;
    let g2 = l2 * l2 / (4.0 * l4 * l4) - mult.b / l4;
    if !(g1 >= 0.0) || !(g2 >= 0.0) {
        return Err(Error::TransformInfeasible(
            "channel gain has a negative radicand".into(),
        ));
    }
    Ok([
        (1.0 - 1.5 * l1 * alpha / l3, alpha * g1.sqrt()),
        (1.0 - l2 * beta / (2.0 * l4), beta * g2.sqrt()),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateCertificate {
    pub alpha: f64,
    pub beta: f64,
    pub constants: ProblemConstants,
    pub bounds: Option<StepBounds>,
    pub multipliers: Option<Multipliers>,
    /// Rate being certified.
    #[serde(with = "crate::serde_util")]
    pub rho: f64,
    /// Rate at which the small-gain test was evaluated.
    #[serde(with = "crate::serde_util")]
    pub verdict_rho: f64,
    pub channels: Vec<Channel>,
    #[serde(with = "crate::serde_util")]
    pub gain_p: f64,
    pub gain_k_bound: f64,
    pub transform_residual: Option<f64>,
    pub feasible: bool,
    pub violated_conditions: Vec<Condition>,
}

impl RateCertificate {
    fn infeasible(
        c: &ProblemConstants,
        alpha: f64,
        beta: f64,
        rho: f64,
        bounds: Option<StepBounds>,
        violated: Vec<Condition>,
    ) -> Self {
        Self {
            alpha,
            beta,
            constants: *c,
            bounds,
            multipliers: None,
            rho,
            verdict_rho: rho,
            channels: Vec::new(),
            gain_p: f64::INFINITY,
            gain_k_bound: 1.0,
            transform_residual: None,
            feasible: false,
            violated_conditions: violated,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Small-gain test at rate `rho` using multipliers normalized by `λ₂ = 1`.
pub fn small_gain_verdict(c: &ProblemConstants, alpha: f64, beta: f64, rho: f64) -> Result<RateCertificate> {
    small_gain_verdict_scaled(c, alpha, beta, rho, 1.0)
}

/// [`small_gain_verdict`] with an arbitrary `λ₂` normalization.
///
/// Errors only on malformed input; every failed condition is reported through
/// `violated_conditions` of an infeasible certificate.
pub fn small_gain_verdict_scaled(
    c: &ProblemConstants,
    alpha: f64,
    beta: f64,
    rho: f64,
    lambda2: f64,
) -> Result<RateCertificate> {
    c.validate()?;
    check_positive("rho", rho)?;
    let bounds = max_step_sizes(c)?;
    let violated = step_size_violations(c, alpha, beta)?;
    if !violated.is_empty() {
        return Ok(RateCertificate::infeasible(c, alpha, beta, rho, Some(bounds), violated));
    }
    let mult = match construct_multipliers_scaled(c, alpha, beta, lambda2) {
        Ok(m) => m,
        Err(Error::MultiplierInfeasible { condition }) => {
            return Ok(RateCertificate::infeasible(c, alpha, beta, rho, Some(bounds), vec![condition]))
        }
        Err(e) => return Err(e),
    };
    let mut cert = RateCertificate::infeasible(c, alpha, beta, rho, Some(bounds), Vec::new());
    cert.multipliers = Some(mult);
    let transform = match build_transform(&mult, 1, 1) {
        Ok(t) => t,
        Err(Error::TransformInfeasible(_)) => {
            cert.violated_conditions.push(Condition::UpperSector);
            return Ok(cert);
        }
        Err(e) => return Err(e),
    };
    cert.transform_residual = Some(transform.identity_residual);
    if !(rho < 1.0) {
        cert.violated_conditions.push(Condition::RhoRange);
        return Ok(cert);
    }
    let channels = match plant_channels(&mult, alpha, beta) {
        Ok(ch) => ch,
        Err(Error::TransformInfeasible(_)) => {
            cert.violated_conditions.push(Condition::UpperSector);
            return Ok(cert);
        }
        Err(e) => return Err(e),
    };
    let mut gain_p: f64 = 0.0;
    for (pole, gain) in channels {
        match hinf_first_order(gain, pole, rho) {
            Ok(h) => {
                gain_p = gain_p.max(h);
                cert.channels.push(Channel { pole, gain, hinf: h });
            }
            Err(Error::UnstableScaledSystem { .. }) => {
                cert.channels.push(Channel {
                    pole,
                    gain,
                    hinf: f64::INFINITY,
                });
                gain_p = f64::INFINITY;
                if !cert.violated_conditions.contains(&Condition::ScaledStability) {
                    cert.violated_conditions.push(Condition::ScaledStability);
                }
            }
            Err(e) => return Err(e),
        }
    }
    cert.gain_p = gain_p;
    if !(gain_p * cert.gain_k_bound < 1.0) {
        cert.violated_conditions.push(Condition::SmallGain);
    }
    cert.feasible = cert.violated_conditions.is_empty();
    Ok(cert)
}

/// Certificate for the closed-form rate of `(α, β)`.
///
/// The small-gain test is evaluated just above that rate (see
/// [`VERDICT_OFFSET`]); `rho` in the result is the closed-form rate itself.
pub fn certify(c: &ProblemConstants, alpha: f64, beta: f64) -> Result<RateCertificate> {
    match certified_rate(c, alpha, beta) {
        Ok(rho) => {
            // Tiny steps put ρ within a few ulps of 1; keep the offset representable.
            let at = rho + ((1.0 - rho) * VERDICT_OFFSET).max(16.0 * f64::EPSILON);
            let mut cert = small_gain_verdict(c, alpha, beta, at)?;
            cert.rho = rho;
            Ok(cert)
        }
        Err(Error::StepSizeInfeasible { violated }) => Ok(RateCertificate::infeasible(
            c,
            alpha,
            beta,
            f64::INFINITY,
            Some(max_step_sizes(c)?),
            violated,
        )),
        Err(e) => Err(e),
    }
}

/// Smallest `ρ` at which the small-gain verdict is feasible, by bisection on
/// `(0, 1)` to [`BISECTION_TOL`]. The returned value is feasible.
pub fn min_certifiable_rho(c: &ProblemConstants, alpha: f64, beta: f64) -> Result<f64> {
    let mut hi = 1.0 - f64::EPSILON;
    let top = small_gain_verdict(c, alpha, beta, hi)?;
    if !top.feasible {
        return Err(Error::StepSizeInfeasible {
            violated: top.violated_conditions,
        });
    }
    let mut lo = 0.0;
    for _ in 0..BISECTION_MAX_ITERS {
        if hi - lo <= BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if small_gain_verdict(c, alpha, beta, mid)?.feasible {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
