//! Command-line front end.
//!
//! Exit status: 0 on success, 1 on errors (bad input, I/O), 2 when a
//! certificate is infeasible, a run is refused, diverges or fails its rate
//! check, a comparison exhausts its budget, or an audit finds a violation.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::audit::{sector_audit, AuditReport};
use crate::certificate::{auto_step_sizes, certify, RateCertificate};
use crate::numerics::distance;
use crate::problem_model::{BilevelOracle, GroundTruth, ProblemConstants};
use crate::solver::{
    double_loop_run, fit_rate_with, save_trajectory_csv, single_loop_run, EvalCounts, FitWindow,
    InnerLoopConfig, SolverConfig, StopReason, Trajectory,
};
use crate::testbed::{
    as_oracle, derive_constants, load_instance, make_instance, named_instance, save_instance,
    QuadraticInstance,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_REJECTED: i32 = 2;

/// Most steps `audit` will examine.
pub const AUDIT_MAX_STEPS: usize = 5000;

#[derive(Parser, Debug)]
#[command(name = "bilevel", version, about = "Single-loop bilevel solver with rate certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Certify step sizes and write certificate.json.
    Certify(CertifyArgs),
    /// Run the single-loop solver and write trajectory.csv and report.json.
    Solve(SolveArgs),
    /// Compare single- and double-loop cost to a target accuracy.
    Compare(CompareArgs),
    /// Audit the sector inequalities along a certified run.
    Audit(AuditArgs),
    /// Write an instance to instance.json.
    Gen(GenArgs),
}

/// `m,n,seed,cond` for the seeded instance generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenSpec {
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub cond: f64,
}

impl FromStr for GenSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(format!("expected m,n,seed,cond, got {s:?}"));
        }
        let bad = |what: &str| format!("invalid {what} in {s:?}");
        Ok(GenSpec {
            m: parts[0].parse().map_err(|_| bad("m"))?,
            n: parts[1].parse().map_err(|_| bad("n"))?,
            seed: parts[2].parse().map_err(|_| bad("seed"))?,
            cond: parts[3].parse().map_err(|_| bad("cond"))?,
        })
    }
}

#[derive(Args, Debug, Clone)]
#[group(id = "source", required = true, multiple = false)]
struct SourceArgs {
    /// Instance JSON file.
    #[arg(long, value_name = "PATH")]
    instance: Option<PathBuf>,
    /// Generate an instance: m,n,seed,cond.
    #[arg(long, value_name = "M,N,SEED,COND")]
    gen: Option<GenSpec>,
    /// Built-in instance (ref0 or ref1).
    #[arg(long, value_name = "NAME")]
    named: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct InstanceArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Replace the derived μ_f with this value.
    #[arg(long, value_name = "X")]
    mu_f: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct StepArgs {
    #[arg(long, requires = "beta")]
    alpha: Option<f64>,
    #[arg(long, requires = "alpha")]
    beta: Option<f64>,
    /// Half of each bound, α halved until α/β² fits (the default).
    #[arg(long, conflicts_with_all = ["alpha", "beta"])]
    auto: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Start {
    Zero,
    Optimum,
    Random,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Initial point.
    #[arg(long, value_enum, default_value = "zero")]
    start: Start,
    /// Seed for --start random.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CertifyArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[command(flatten)]
    steps: StepArgs,
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[command(flatten)]
    steps: StepArgs,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 20_000)]
    iters: usize,
    /// Run even when the step sizes are not certified.
    #[arg(long)]
    force: bool,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Stop once both gradient norms fall strictly below this.
    #[arg(long, default_value_t = 0.0)]
    grad_tol: f64,
    /// Pass when rho_hat ≤ certified rho + this.
    #[arg(long, default_value_t = 0.001)]
    rate_tol: f64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[command(flatten)]
    steps: StepArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Target ‖ω − ω*‖.
    #[arg(long, default_value_t = 1e-6)]
    target: f64,
    /// Outer-iteration budget per method.
    #[arg(long, default_value_t = 1_000_000)]
    iters: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[command(flatten)]
    steps: StepArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Steps to audit (capped at 5000).
    #[arg(long, default_value_t = AUDIT_MAX_STEPS)]
    iters: usize,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Certify(a) => cmd_certify(&a),
        Command::Solve(a) => cmd_solve(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Audit(a) => cmd_audit(&a),
        Command::Gen(a) => cmd_gen(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn load_source(src: &SourceArgs) -> Result<QuadraticInstance> {
    if let Some(path) = &src.instance {
        load_instance(path)
    } else if let Some(g) = src.gen {
        make_instance(g.m, g.n, g.seed, g.cond)
    } else if let Some(name) = &src.named {
        named_instance(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown named instance {name:?}")))
    } else {
        Err(Error::InvalidInput(
            "one of --instance, --gen or --named is required".into(),
        ))
    }
}

struct Problem {
    instance: QuadraticInstance,
    constants: ProblemConstants,
}

fn load_problem(args: &InstanceArgs) -> Result<Problem> {
    let instance = load_source(&args.source)?;
    let mut constants = derive_constants(&instance)?;
    if let Some(mu_f) = args.mu_f {
        constants.mu_f = mu_f;
    }
    constants.validate()?;
    Ok(Problem {
        instance,
        constants,
    })
}

fn resolve_steps(args: &StepArgs, c: &ProblemConstants) -> Result<(f64, f64)> {
    match (args.alpha, args.beta) {
        (Some(a), Some(b)) => {
            if !(a > 0.0 && a.is_finite() && b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "step sizes must be finite and positive, got alpha = {a}, beta = {b}"
                )));
            }
            Ok((a, b))
        }
        _ => auto_step_sizes(c),
    }
}

fn start_point(
    start: Start,
    seed: u64,
    inst: &QuadraticInstance,
    gt: &dyn GroundTruth,
) -> (Vec<f64>, Vec<f64>) {
    match start {
        Start::Zero => (vec![0.0; inst.m], vec![0.0; inst.n]),
        Start::Optimum => {
            let w = gt.omega_star().to_vec();
            let v = gt.v_star(&w);
            (w, v)
        }
        Start::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = (0..inst.m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v = (0..inst.n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (w, v)
        }
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn summarize(cert: &RateCertificate) -> String {
    if cert.feasible {
        format!(
            "feasible: alpha = {}, beta = {}, rho = {:.6}, gain_P = {:.9}",
            cert.alpha, cert.beta, cert.rho, cert.gain_p
        )
    } else {
        let names: Vec<&str> = cert.violated_conditions.iter().map(|c| c.as_str()).collect();
        format!(
            "infeasible: alpha = {}, beta = {}, violated: {}",
            cert.alpha,
            cert.beta,
            names.join(", ")
        )
    }
}

fn cmd_certify(args: &CertifyArgs) -> Result<i32> {
    let p = load_problem(&args.instance)?;
    let (alpha, beta) = resolve_steps(&args.steps, &p.constants)?;
    let cert = certify(&p.constants, alpha, beta)?;
    let path = write_json(&args.out, "certificate.json", &cert)?;
    println!("{}", summarize(&cert));
    println!("wrote {}", path.display());
    Ok(if cert.feasible { EXIT_OK } else { EXIT_REJECTED })
}

#[derive(Serialize)]
struct SolveReport {
    alpha: f64,
    beta: f64,
    iterations: usize,
    stop: Option<StopReason>,
    rho_hat: Option<f64>,
    fit_window: Option<(usize, usize)>,
    #[serde(with = "crate::serde_util")]
    certified_rho: f64,
    certificate_feasible: bool,
    rate_tol: f64,
    pass: Value,
    diverged: bool,
    last_finite_k: Option<usize>,
    final_omega_err: Option<f64>,
    final_v_err: Option<f64>,
    counts: Option<EvalCounts>,
    note: Option<String>,
    wall_time_s: f64,
}

fn cmd_solve(args: &SolveArgs) -> Result<i32> {
    let p = load_problem(&args.instance)?;
    let (alpha, beta) = resolve_steps(&args.steps, &p.constants)?;
    let cert = certify(&p.constants, alpha, beta)?;
    if !cert.feasible && !args.force {
        eprintln!("refusing to run uncertified step sizes ({}); pass --force to override", summarize(&cert));
        return Ok(EXIT_REJECTED);
    }
    let oracle = as_oracle(&p.instance)?;
    let gt = oracle.ground_truth().ok_or(Error::MissingGroundTruth)?;
    let (w0, v0) = start_point(args.run.start, args.run.seed, &p.instance, gt);
    let config = SolverConfig::new(alpha, beta, args.iters)
        .with_log_stride(args.stride)
        .with_stop_grad_tol(args.grad_tol);
    ensure_dir(&args.run.out)?;

    let started = Instant::now();
    let run = single_loop_run(&oracle, &config, &w0, &v0);
    let wall_time_s = started.elapsed().as_secs_f64();
    let certified_rho = if cert.feasible { cert.rho } else { f64::INFINITY };
    let mut report = SolveReport {
        alpha,
        beta,
        iterations: 0,
        stop: None,
        rho_hat: None,
        fit_window: None,
        certified_rho,
        certificate_feasible: cert.feasible,
        rate_tol: args.rate_tol,
        pass: json!("n/a"),
        diverged: false,
        last_finite_k: None,
        final_omega_err: None,
        final_v_err: None,
        counts: None,
        note: None,
        wall_time_s,
    };
    let code = match run {
        Ok(traj) => {
            save_trajectory_csv(&traj, args.run.out.join("trajectory.csv"))?;
            fill_solve_report(&mut report, &traj);
            match report.pass {
                Value::Bool(false) => EXIT_REJECTED,
                _ => EXIT_OK,
            }
        }
        Err(Error::DivergenceDetected { last_finite_step }) => {
            report.diverged = true;
            report.last_finite_k = Some(last_finite_step);
            report.pass = json!(false);
            report.note = Some("iterates became non-finite".into());
            EXIT_REJECTED
        }
        Err(e) => return Err(e),
    };
    let path = write_json(&args.run.out, "report.json", &report)?;
    match (report.diverged, report.rho_hat) {
        (true, _) => println!("diverged after step {}", report.last_finite_k.unwrap_or(0)),
        (false, Some(r)) => println!("rho_hat = {r:.6}, certified rho = {:.6}, pass = {}", certified_rho, report.pass),
        (false, None) => println!("no rate fitted: {}", report.note.as_deref().unwrap_or("")),
    }
    println!("wrote {}", path.display());
    Ok(code)
}

fn fill_solve_report(report: &mut SolveReport, traj: &Trajectory) {
    report.iterations = traj.iterations;
    report.stop = Some(traj.stop);
    report.counts = Some(traj.counts);
    if let Some(last) = traj.steps.last() {
        report.final_omega_err = last.omega_err;
        report.final_v_err = last.v_err;
        if last.omega_err.is_some_and(|e| !e.is_finite()) {
            report.diverged = true;
        }
    }
    match fit_rate_with(traj, &FitWindow::default()) {
        Ok(fit) => {
            report.rho_hat = Some(fit.rho_hat);
            report.fit_window = Some((fit.k_start, fit.k_end));
            report.pass = json!(fit.rho_hat <= report.certified_rho + report.rate_tol);
        }
        Err(e) => {
            report.note = Some(e.to_string());
            report.pass = json!("n/a");
        }
    }
}

#[derive(Serialize, Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub converged: bool,
    pub outer_iterations: usize,
    pub lower_evals: u64,
    pub upper_evals: u64,
    pub hessian_solves: u64,
    pub final_omega_err: Option<f64>,
    pub error: Option<String>,
}

fn method_report(run: Result<Trajectory>, gt: &dyn GroundTruth) -> MethodReport {
    match run {
        Ok(t) => {
            let (k, counts) = match t.target_hit {
                Some(hit) => (hit.k, hit.counts),
                None => (t.iterations, t.counts),
            };
            let final_omega_err = Some(distance(&t.final_omega, gt.omega_star()));
            MethodReport {
                converged: t.stop == StopReason::TargetReached,
                outer_iterations: k,
                lower_evals: counts.lower_grads,
                upper_evals: counts.upper_grads,
                hessian_solves: counts.hessian_solves,
                final_omega_err,
                error: None,
            }
        }
        Err(e) => MethodReport {
            converged: false,
            outer_iterations: 0,
            lower_evals: 0,
            upper_evals: 0,
            hessian_solves: 0,
            final_omega_err: None,
            error: Some(e.to_string()),
        },
    }
}

fn cmd_compare(args: &CompareArgs) -> Result<i32> {
    if !(args.target > 0.0 && args.target.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "target must be finite and positive, got {}",
            args.target
        )));
    }
    let p = load_problem(&args.instance)?;
    let (alpha, beta) = resolve_steps(&args.steps, &p.constants)?;
    let cert = certify(&p.constants, alpha, beta)?;
    if !cert.feasible && !args.force {
        eprintln!("refusing to run uncertified step sizes ({}); pass --force to override", summarize(&cert));
        return Ok(EXIT_REJECTED);
    }
    let oracle = as_oracle(&p.instance)?;
    let gt = oracle.ground_truth().ok_or(Error::MissingGroundTruth)?;
    let (w0, v0) = start_point(args.run.start, args.run.seed, &p.instance, gt);
    // Only the first and last rows are kept; counts come from the target snapshot.
    let config = SolverConfig::new(alpha, beta, args.iters)
        .with_log_stride(args.iters)
        .with_stop_omega_err(args.target);
    let inner = InnerLoopConfig::new(args.target / 10.0);

    let (single, double) = std::thread::scope(|s| {
        let single = s.spawn(|| single_loop_run(&oracle, &config, &w0, &v0));
        let double = s.spawn(|| double_loop_run(&oracle, &config, &inner, &w0, &v0));
        (
            single.join().expect("single-loop thread panicked"),
            double.join().expect("double-loop thread panicked"),
        )
    });
    let single = method_report(single, gt);
    let double = method_report(double, gt);
    let partial = !(single.converged && double.converged);
    let report = json!({
        "target": args.target,
        "alpha": alpha,
        "beta": beta,
        "inner_tol": inner.tol,
        "certified_rho": if cert.feasible { json!(cert.rho) } else { json!("inf") },
        "partial": partial,
        "single_loop": single,
        "double_loop": double,
    });
    let path = write_json(&args.run.out, "comparison.json", &report)?;
    println!(
        "lower-level gradient evaluations: single-loop {}, double-loop {}{}",
        single.lower_evals,
        double.lower_evals,
        if partial { " (partial: budget exhausted or failed)" } else { "" }
    );
    println!("wrote {}", path.display());
    Ok(if partial { EXIT_REJECTED } else { EXIT_OK })
}

#[derive(Serialize)]
struct AuditOutput<'a> {
    steps: usize,
    certificate: &'a RateCertificate,
    audit: &'a AuditReport,
}

fn cmd_audit(args: &AuditArgs) -> Result<i32> {
    let p = load_problem(&args.instance)?;
    let (alpha, beta) = resolve_steps(&args.steps, &p.constants)?;
    let cert = certify(&p.constants, alpha, beta)?;
    let Some(mult) = cert.multipliers.filter(|_| cert.feasible) else {
        eprintln!("refusing to audit: {}", summarize(&cert));
        return Ok(EXIT_REJECTED);
    };
    let oracle = as_oracle(&p.instance)?;
    let gt = oracle.ground_truth().ok_or(Error::MissingGroundTruth)?;
    let (w0, v0) = start_point(args.run.start, args.run.seed, &p.instance, gt);
    let steps = args.iters.clamp(1, AUDIT_MAX_STEPS);
    let config = SolverConfig::new(alpha, beta, steps);
    let traj = single_loop_run(&oracle, &config, &w0, &v0)?;
    let report = sector_audit(&oracle, &p.constants, &config, &traj, &mult)?;
    let path = write_json(
        &args.run.out,
        "audit.json",
        &AuditOutput {
            steps,
            certificate: &cert,
            audit: &report,
        },
    )?;
    for c in &report.checks {
        let status = if c.passed { "ok" } else { "VIOLATED" };
        match c.first_violation {
            Some(k) => println!("{:<24} {status:<8} min margin {:.3e} (first violation at k = {k})", c.check.as_str(), c.min_margin),
            None => println!("{:<24} {status:<8} min margin {:.3e}", c.check.as_str(), c.min_margin),
        }
    }
    println!("wrote {}", path.display());
    Ok(if report.all_passed { EXIT_OK } else { EXIT_REJECTED })
}

fn cmd_gen(args: &GenArgs) -> Result<i32> {
    let inst = load_source(&args.source)?;
    ensure_dir(&args.out)?;
    let path = args.out.join("instance.json");
    save_instance(&inst, &path)?;
    println!("wrote {}", path.display());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_spec_parsing() {
        let g: GenSpec = "5,3,42,10".parse().unwrap();
        assert_eq!(
            g,
            GenSpec {
                m: 5,
                n: 3,
                seed: 42,
                cond: 10.0
            }
        );
        assert!("5,3,42".parse::<GenSpec>().is_err());
        assert!("a,3,42,1".parse::<GenSpec>().is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn missing_source_is_an_error() {
        assert_eq!(main_with_args(["bilevel", "certify"]), EXIT_ERROR);
        assert_eq!(main_with_args(["bilevel", "--help"]), EXIT_OK);
    }
}
