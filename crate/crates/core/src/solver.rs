//! Hypergradient, single-loop and double-loop solvers, and rate fitting.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{axpy, distance, finite_diff_grad, norm, spd_solve};
use crate::problem_model::BilevelOracle;
use crate::serde_util::fmt17;
use crate::{Error, Result};

/// Column header of the trajectory CSV.
pub const CSV_HEADER: [&str; 7] = [
    "k",
    "omega_err",
    "v_err",
    "approx_grad_norm",
    "lower_grad_norm",
    "upper_evals",
    "lower_evals",
];

/// Minimum number of logged steps `fit_rate` accepts.
pub const MIN_FIT_STEPS: usize = 50;
/// Minimum number of points inside the fit window.
pub const MIN_WINDOW_POINTS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    /// Hypergradient evaluations (each uses `∇_ω f`, `∇_v f` and both Hessians).
    pub upper_grads: u64,
    /// `∇_v g` evaluations.
    pub lower_grads: u64,
    pub hessian_solves: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub alpha: f64,
    pub beta: f64,
    pub max_iters: usize,
    /// Stop once both `‖∇̃f‖` and `‖∇_v g‖` are strictly below this.
    pub stop_grad_tol: f64,
    pub log_stride: usize,
    /// With ground truth, also stop as soon as `‖ω_k − ω*‖ ≤` this.
    pub stop_omega_err: Option<f64>,
}

impl SolverConfig {
    pub fn new(alpha: f64, beta: f64, max_iters: usize) -> Self {
        Self {
            alpha,
            beta,
            max_iters,
            stop_grad_tol: 0.0,
            log_stride: 1,
            stop_omega_err: None,
        }
    }

    pub fn with_log_stride(mut self, stride: usize) -> Self {
        self.log_stride = stride;
        self
    }

    pub fn with_stop_grad_tol(mut self, tol: f64) -> Self {
        self.stop_grad_tol = tol;
        self
    }

    pub fn with_stop_omega_err(mut self, target: f64) -> Self {
        self.stop_omega_err = Some(target);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "{name} must be finite and positive, got {x}"
                )));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be at least 1".into()));
        }
        if self.log_stride == 0 {
            return Err(Error::InvalidInput("log_stride must be at least 1".into()));
        }
        if !(self.stop_grad_tol >= 0.0) {
            return Err(Error::InvalidInput("stop_grad_tol must be nonnegative".into()));
        }
        if let Some(t) = self.stop_omega_err {
            if !(t >= 0.0) {
                return Err(Error::InvalidInput("stop_omega_err must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub k: usize,
    pub omega: Vec<f64>,
    pub v: Vec<f64>,
    pub approx_grad_norm: f64,
    pub lower_grad_norm: f64,
    /// `‖ω_k − ω*‖`, present iff the oracle has ground truth.
    pub omega_err: Option<f64>,
    /// `‖v_k − v*(ω_k)‖`, present iff the oracle has ground truth.
    pub v_err: Option<f64>,
    /// Cumulative counts including the evaluations made at this step.
    pub counts: EvalCounts,
    /// Inner gradient steps taken at this outer step (double loop only).
    pub inner_iters: Option<usize>,
}

impl TrajectoryStep {
    /// `‖ω_k − ω*‖ + ‖v_k − v*(ω_k)‖`.
    pub fn total_err(&self) -> Option<f64> {
        Some(self.omega_err? + self.v_err?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    GradientTolerance,
    TargetReached,
}

/// Evaluation counts at the moment `‖ω_k − ω*‖` first dropped below the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetHit {
    pub k: usize,
    pub counts: EvalCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub counts: EvalCounts,
    /// Number of upper updates performed.
    pub iterations: usize,
    pub final_omega: Vec<f64>,
    pub final_v: Vec<f64>,
    pub stop: StopReason,
    pub target_hit: Option<TargetHit>,
}

/// `∇_ω f(ω,v) − ∇²_ωv g(ω,v) [∇²_vv g(ω,v)]⁻¹ ∇_v f(ω,v)`.
pub fn approx_gradient(oracle: &dyn BilevelOracle, omega: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    approx_gradient_counted(oracle, omega, v, &mut EvalCounts::default())
}

/// [`approx_gradient`] that records one hypergradient and one Hessian solve in `counts`.
pub fn approx_gradient_counted(
    oracle: &dyn BilevelOracle,
    omega: &[f64],
    v: &[f64],
    counts: &mut EvalCounts,
) -> Result<Vec<f64>> {
    oracle.check_point(omega, v)?;
    let (m, n) = (oracle.upper_dim(), oracle.lower_dim());
    let hvv = oracle.hess_g_vv(omega, v);
    if hvv.rows() != n || hvv.cols() != n {
        return Err(Error::DimensionMismatch {
            what: "lower Hessian",
            expected: n,
            found: hvv.rows().max(hvv.cols()),
        });
    }
    let hwv = oracle.hess_g_omega_v(omega, v);
    if hwv.rows() != m || hwv.cols() != n {
        return Err(Error::DimensionMismatch {
            what: "cross Hessian",
            expected: m * n,
            found: hwv.rows() * hwv.cols(),
        });
    }
    let gfv = oracle.grad_f_v(omega, v);
    let gfw = oracle.grad_f_omega(omega, v);
    counts.upper_grads += 1;
    counts.hessian_solves += 1;
    let z = spd_solve(&hvv, &gfv)?;
    let correction = hwv.matvec(&z)?;
    Ok(axpy(&gfw, -1.0, &correction))
}

/// Relative disagreement between the hypergradient at `(ω, v*(ω))` and
/// central differences of `f*`, measured as `‖a − b‖ / (1 + ‖b‖)`.
pub fn hypergradient_consistency(oracle: &dyn BilevelOracle, omega: &[f64], h: f64) -> Result<f64> {
    let gt = oracle.ground_truth().ok_or(Error::MissingGroundTruth)?;
    let analytic = approx_gradient(oracle, omega, &gt.v_star(omega))?;
    let fd = finite_diff_grad(|w| gt.f_star(w), omega, h)?;
    Ok(distance(&analytic, &fd) / (1.0 + norm(&fd)))
}

fn errors_at(oracle: &dyn BilevelOracle, omega: &[f64], v: &[f64]) -> (Option<f64>, Option<f64>) {
    match oracle.ground_truth() {
        Some(gt) => (
            Some(distance(omega, gt.omega_star())),
            Some(distance(v, &gt.v_star(omega))),
        ),
        None => (None, None),
    }
}

fn target_reached(oracle: &dyn BilevelOracle, config: &SolverConfig, omega: &[f64]) -> bool {
    match (config.stop_omega_err, oracle.ground_truth()) {
        (Some(t), Some(gt)) => distance(omega, gt.omega_star()) <= t,
        _ => false,
    }
}

fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Runs the simultaneous update
///
/// ```text
///   ω_{k+1} = ω_k − α ∇̃f(ω_k, v_k)
///   v_{k+1} = v_k − β ∇_v g(ω_k, v_k)
/// ```
///
/// Both updates read the same `(ω_k, v_k)`.
pub fn single_loop_run(
    oracle: &dyn BilevelOracle,
    config: &SolverConfig,
    omega0: &[f64],
    v0: &[f64],
) -> Result<Trajectory> {
    config.validate()?;
    oracle.check_point(omega0, v0)?;
    let mut omega = omega0.to_vec();
    let mut v = v0.to_vec();
    let mut counts = EvalCounts::default();
    let mut steps = Vec::new();
    let mut stop = StopReason::MaxIters;
    let mut target_hit = None;
    let mut iterations = 0;

    for k in 0..=config.max_iters {
        if target_reached(oracle, config, &omega) {
            target_hit = Some(TargetHit { k, counts });
            stop = StopReason::TargetReached;
            break;
        }
        let hg = approx_gradient_counted(oracle, &omega, &v, &mut counts)?;
        let gv = oracle.grad_g_v(&omega, &v);
        counts.lower_grads += 1;
        if !all_finite(&hg) || !all_finite(&gv) {
            return Err(Error::DivergenceDetected { last_finite_step: k });
        }
        let hg_norm = norm(&hg);
        let gv_norm = norm(&gv);
        let converged = hg_norm < config.stop_grad_tol && gv_norm < config.stop_grad_tol;
        let last = converged || k == config.max_iters;
        if k % config.log_stride == 0 || last {
            let (omega_err, v_err) = errors_at(oracle, &omega, &v);
            steps.push(TrajectoryStep {
                k,
                omega: omega.clone(),
                v: v.clone(),
                approx_grad_norm: hg_norm,
                lower_grad_norm: gv_norm,
                omega_err,
                v_err,
                counts,
                inner_iters: None,
            });
        }
        if converged {
            stop = StopReason::GradientTolerance;
            break;
        }
        if k == config.max_iters {
            break;
        }
        let next_omega = axpy(&omega, -config.alpha, &hg);
        let next_v = axpy(&v, -config.beta, &gv);
        if !all_finite(&next_omega) || !all_finite(&next_v) {
            return Err(Error::DivergenceDetected { last_finite_step: k });
        }
        omega = next_omega;
        v = next_v;
        iterations += 1;
    }

    Ok(Trajectory {
        steps,
        counts,
        iterations,
        final_omega: omega,
        final_v: v,
        stop,
        target_hit,
    })
}

/// Inner-loop settings of the double-loop baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerLoopConfig {
    /// Inner descent stops once `‖∇_v g‖ ≤ tol`.
    pub tol: f64,
    /// Cap on inner steps per outer step.
    pub max_iters: usize,
}

impl InnerLoopConfig {
    pub fn new(tol: f64) -> Self {
        Self {
            tol,
            max_iters: 1_000_000,
        }
    }
}

/// Baseline: solve the lower problem (warm-started gradient descent with step
/// `β`) to `inner.tol` before every upper step.
pub fn double_loop_run(
    oracle: &dyn BilevelOracle,
    outer: &SolverConfig,
    inner: &InnerLoopConfig,
    omega0: &[f64],
    v0: &[f64],
) -> Result<Trajectory> {
    outer.validate()?;
    oracle.check_point(omega0, v0)?;
    if !(inner.tol > 0.0) {
        return Err(Error::InvalidInput(format!(
            "inner tolerance must be positive, got {}",
            inner.tol
        )));
    }
    let mut omega = omega0.to_vec();
    let mut v = v0.to_vec();
    let mut counts = EvalCounts::default();
    let mut steps = Vec::new();
    let mut stop = StopReason::MaxIters;
    let mut target_hit = None;
    let mut iterations = 0;

    for k in 0..=outer.max_iters {
        if target_reached(oracle, outer, &omega) {
            target_hit = Some(TargetHit { k, counts });
            stop = StopReason::TargetReached;
            break;
        }
        let mut inner_iters = 0;
        let gv_norm = loop {
            let gv = oracle.grad_g_v(&omega, &v);
            counts.lower_grads += 1;
            if !all_finite(&gv) {
                return Err(Error::DivergenceDetected { last_finite_step: k });
            }
            let r = norm(&gv);
            if r <= inner.tol {
                break r;
            }
            if inner_iters >= inner.max_iters {
                return Err(Error::InnerStall {
                    outer_step: k,
                    inner_iters,
                });
            }
            v = axpy(&v, -outer.beta, &gv);
            inner_iters += 1;
        };
        let hg = approx_gradient_counted(oracle, &omega, &v, &mut counts)?;
        if !all_finite(&hg) {
            return Err(Error::DivergenceDetected { last_finite_step: k });
        }
        let hg_norm = norm(&hg);
        let converged = hg_norm < outer.stop_grad_tol && gv_norm < outer.stop_grad_tol;
        let last = converged || k == outer.max_iters;
        if k % outer.log_stride == 0 || last {
            let (omega_err, v_err) = errors_at(oracle, &omega, &v);
            steps.push(TrajectoryStep {
                k,
                omega: omega.clone(),
                v: v.clone(),
                approx_grad_norm: hg_norm,
                lower_grad_norm: gv_norm,
                omega_err,
                v_err,
                counts,
                inner_iters: Some(inner_iters),
            });
        }
        if converged {
            stop = StopReason::GradientTolerance;
            break;
        }
        if k == outer.max_iters {
            break;
        }
        let next_omega = axpy(&omega, -outer.alpha, &hg);
        if !all_finite(&next_omega) {
            return Err(Error::DivergenceDetected { last_finite_step: k });
        }
        omega = next_omega;
        iterations += 1;
    }

    Ok(Trajectory {
        steps,
        counts,
        iterations,
        final_omega: omega,
        final_v: v,
        stop,
        target_hit,
    })
}

/// Bounds of the log-linear fit window, relative to the initial error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitWindow {
    /// The window opens once `e_k ≤ upper_fraction · e_0`.
    pub upper_fraction: f64,
    /// The window closes before `e_k` drops below this floor.
    pub floor: f64,
}

impl Default for FitWindow {
    fn default() -> Self {
        Self {
            upper_fraction: 0.1,
            floor: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub rho_hat: f64,
    pub k_start: usize,
    pub k_end: usize,
    pub points: usize,
}

/// Empirical linear rate of `e_k = ‖ω_k − ω*‖ + ‖v_k − v*(ω_k)‖`.
pub fn fit_rate(traj: &Trajectory) -> Result<RateFit> {
    fit_rate_with(traj, &FitWindow::default())
}

pub fn fit_rate_with(traj: &Trajectory, window: &FitWindow) -> Result<RateFit> {
    if traj.steps.len() < MIN_FIT_STEPS {
        return Err(Error::InvalidInput(format!(
            "rate fit needs at least {MIN_FIT_STEPS} logged steps, got {}",
            traj.steps.len()
        )));
    }
    let ks: Vec<usize> = traj.steps.iter().map(|s| s.k).collect();
    let errs = traj
        .steps
        .iter()
        .map(|s| s.total_err().ok_or(Error::MissingGroundTruth))
        .collect::<Result<Vec<f64>>>()?;
    fit_rate_series(&ks, &errs, window)
}

/// Least-squares slope of `ln e_k` against `k` over the contiguous window
/// starting at the first `e_k ≤ upper_fraction · e_0` and ending before the
/// first `e_k < floor`. Returns `exp(slope)`.
pub fn fit_rate_series(ks: &[usize], errs: &[f64], window: &FitWindow) -> Result<RateFit> {
    if ks.len() != errs.len() {
        return Err(Error::DimensionMismatch {
            what: "rate fit series",
            expected: ks.len(),
            found: errs.len(),
        });
    }
    let Some(&e0) = errs.first() else {
        return Err(Error::InsufficientDecay { points: 0 });
    };
    let threshold = window.upper_fraction * e0;
    let start = errs.iter().position(|&e| e <= threshold && e >= window.floor);
    let Some(start) = start else {
        return Err(Error::InsufficientDecay { points: 0 });
    };
    let len = errs[start..]
        .iter()
        .take_while(|&&e| e >= window.floor && e.is_finite() && e > 0.0)
        .count();
    if len < MIN_WINDOW_POINTS {
        return Err(Error::InsufficientDecay { points: len });
    }
    let xs: Vec<f64> = ks[start..start + len].iter().map(|&k| k as f64).collect();
    let ys: Vec<f64> = errs[start..start + len].iter().map(|e| e.ln()).collect();
    let nf = len as f64;
    let xbar = xs.iter().sum::<f64>() / nf;
    let ybar = ys.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - xbar) * (y - ybar);
        sxx += (x - xbar) * (x - xbar);
    }
    if sxx == 0.0 {
        return Err(Error::InsufficientDecay { points: len });
    }
    Ok(RateFit {
        rho_hat: (sxy / sxx).exp(),
        k_start: ks[start],
        k_end: ks[start + len - 1],
        points: len,
    })
}

/// One row of the trajectory CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub k: usize,
    pub omega_err: Option<f64>,
    pub v_err: Option<f64>,
    pub approx_grad_norm: f64,
    pub lower_grad_norm: f64,
    pub upper_evals: u64,
    pub lower_evals: u64,
}

pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    let opt = |x: Option<f64>| x.map(fmt17).unwrap_or_default();
    for s in &traj.steps {
        w.write_record([
            s.k.to_string(),
            opt(s.omega_err),
            opt(s.v_err),
            fmt17(s.approx_grad_norm),
            fmt17(s.lower_grad_norm),
            s.counts.upper_grads.to_string(),
            s.counts.lower_grads.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_trajectory_csv(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trajectory_csv(traj, std::io::BufWriter::new(file))
}

pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::InvalidInput(format!(
            "unexpected trajectory CSV header {header:?}"
        )));
    }
    let parse_f = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::InvalidInput(format!("bad float {s:?} in trajectory CSV")))
    };
    let parse_opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            parse_f(s).map(Some)
        }
    };
    let parse_u = |s: &str| -> Result<u64> {
        s.parse::<u64>()
            .map_err(|_| Error::InvalidInput(format!("bad integer {s:?} in trajectory CSV")))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::InvalidInput("short trajectory CSV record".into()));
        }
        rows.push(CsvRow {
            k: parse_u(&rec[0])? as usize,
            omega_err: parse_opt(&rec[1])?,
            v_err: parse_opt(&rec[2])?,
            approx_grad_norm: parse_f(&rec[3])?,
            lower_grad_norm: parse_f(&rec[4])?,
            upper_evals: parse_u(&rec[5])?,
            lower_evals: parse_u(&rec[6])?,
        });
    }
    Ok(rows)
}

/// [`fit_rate_series`] over rows read back from a trajectory CSV.
pub fn fit_rate_rows(rows: &[CsvRow], window: &FitWindow) -> Result<RateFit> {
    let ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    let errs = rows
        .iter()
        .map(|r| match (r.omega_err, r.v_err) {
            (Some(a), Some(b)) => Ok(a + b),
            _ => Err(Error::MissingGroundTruth),
        })
        .collect::<Result<Vec<f64>>>()?;
    fit_rate_series(&ks, &errs, window)
}
