//! Acceptance suite. Every test prints one `PASS`/`FAIL` line and then asserts.
//!
//! Run with `cargo test --test acceptance -- --nocapture --test-threads=1` to
//! see the lines in order.

use std::time::Instant;

use bilevel_core::certificate::{
    auto_step_sizes, build_transform, certified_rate, hinf_first_order, min_certifiable_rho,
    small_gain_verdict, Condition, Multipliers,
};
use bilevel_core::certificate::construct_multipliers;
use bilevel_core::audit::sector_audit;
use bilevel_core::problem_model::ProblemConstants;
use bilevel_core::solver::{fit_rate, hypergradient_consistency, single_loop_run, SolverConfig};
use bilevel_core::testbed::{as_oracle, derive_constants, make_instance, ref0, ref1};
use bilevel_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, name: &str, ok: bool, detail: String) {
    let status = if ok { "PASS" } else { "FAIL" };
    println!("{status} criterion {id:>2} [{name}]: {detail}");
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

/// Dominant eigenvalue modulus of the 2×2 map `[[1−α, −α], [2β, 1−2β]]`.
fn ref1_map_radius(alpha: f64, beta: f64) -> f64 {
    let (a, b, c, d) = (1.0 - alpha, -alpha, 2.0 * beta, 1.0 - 2.0 * beta);
    let tr = a + d;
    let det = a * d - b * c;
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        (tr / 2.0).abs() + disc.sqrt()
    } else {
        det.sqrt()
    }
}

#[test]
fn criterion_01_linear_rate_vs_certificate() {
    let inst = ref1();
    let oracle = as_oracle(&inst).unwrap();
    let consts = derive_constants(&inst).unwrap();
    let (alpha, beta) = (0.0007, 0.06);
    let rho = certified_rate(&consts, alpha, beta).unwrap();
    let started = Instant::now();
    let traj = single_loop_run(&oracle, &SolverConfig::new(alpha, beta, 20_000), &[0.0], &[0.0]).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let fit = fit_rate(&traj).unwrap();
    let map = ref1_map_radius(alpha, beta);
    let ok = (rho - 0.999479).abs() <= 5e-7
        && (fit.rho_hat - 0.9986).abs() <= 0.001
        && (fit.rho_hat - map).abs() <= 0.001
        && fit.rho_hat <= rho + 0.001
        && elapsed < 1.0;
    verdict(
        1,
        "linear convergence vs certificate",
        ok,
        format!(
            "certified rho = {rho:.7}, rho_hat = {:.7}, map radius = {map:.7}, 20000 iterations in {elapsed:.3}s",
            fit.rho_hat
        ),
    );
}

/// Seeded sweep instances: small, well-conditioned, so the conservative
/// certified steps still give a decade of decay within a few hundred thousand steps.
fn sweep_instance(seed: u64) -> (usize, usize, f64) {
    (1 + (seed % 2) as usize, 1 + ((seed / 2) % 2) as usize, 1.0 + 0.25 * (seed % 3) as f64)
}

#[test]
fn criterion_02_certified_rate_soundness_sweep() {
    let started = Instant::now();
    let mut worst_gap = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let (m, n, cond) = sweep_instance(seed);
        let inst = make_instance(m, n, seed, cond).unwrap();
        let consts = derive_constants(&inst).unwrap();
        let (alpha, beta) = auto_step_sizes(&consts).unwrap();
        let rho = certified_rate(&consts, alpha, beta).unwrap();
        // Three decades of the slowest mode, 1 − α μ_f.
        let iters = ((3.0 * 10f64.ln() / (alpha * consts.mu_f)) as usize + 100).min(3_000_000);
        let stride = (iters / 2000).max(1);
        let oracle = as_oracle(&inst).unwrap();
        let config = SolverConfig::new(alpha, beta, iters).with_log_stride(stride);
        let traj = single_loop_run(&oracle, &config, &vec![0.0; m], &vec![0.0; n]).unwrap();
        match fit_rate(&traj) {
            Ok(fit) => {
                worst_gap = worst_gap.max(fit.rho_hat - rho);
                if fit.rho_hat > rho + 0.001 {
                    failures.push(format!("seed {seed}: rho_hat {} > rho {rho}", fit.rho_hat));
                }
            }
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let ok = failures.is_empty() && elapsed < 30.0;
    verdict(
        2,
        "certified-rate soundness sweep",
        ok,
        format!(
            "20 instances, max(rho_hat − rho) = {worst_gap:.3e}, {elapsed:.2}s, failures: {failures:?}"
        ),
    );
}

#[test]
fn criterion_03_convergence_to_ground_truth() {
    let oracle = as_oracle(&ref1()).unwrap();
    let traj = single_loop_run(&oracle, &SolverConfig::new(0.0007, 0.06, 20_000), &[0.0], &[0.0]).unwrap();
    let hit = traj
        .steps
        .iter()
        .find(|s| (s.omega[0] - 2.0).abs() <= 1e-8 && (s.v[0] - 2.0).abs() <= 1e-8)
        .map(|s| s.k);
    verdict(
        3,
        "convergence to ground truth",
        hit.is_some(),
        format!("both errors ≤ 1e-8 first at k = {hit:?} (budget 20000)"),
    );
}

#[test]
fn criterion_04_hypergradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let m = rng.gen_range(1..=10);
        let n = rng.gen_range(1..=10);
        let cond = rng.gen_range(1.0..10.0);
        let inst = make_instance(m, n, 1000 + i, cond).unwrap();
        let oracle = as_oracle(&inst).unwrap();
        let omega: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        worst = worst.max(hypergradient_consistency(&oracle, &omega, 1e-6).unwrap());
    }
    verdict(
        4,
        "hypergradient oracle equivalence",
        worst <= 1e-5,
        format!("50 instances, worst relative error {worst:.3e}"),
    );
}

#[test]
fn criterion_05_sector_audits() {
    let mut results = Vec::new();
    let mut instances = vec![("ref1".to_string(), ref1())];
    for seed in 0..10u64 {
        let m = 1 + (seed % 4) as usize;
        let n = 1 + ((seed + 1) % 3) as usize;
        instances.push((format!("gen({m},{n},{seed})"), make_instance(m, n, 500 + seed, 1.0 + seed as f64).unwrap()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;
    for (name, inst) in &instances {
        let oracle = as_oracle(inst).unwrap();
        let consts = derive_constants(inst).unwrap();
        let (alpha, beta) = if name == "ref1" { (0.0007, 0.06) } else { auto_step_sizes(&consts).unwrap() };
        let mult = construct_multipliers(&consts, alpha, beta).unwrap();
        let config = SolverConfig::new(alpha, beta, 4999);
        let w0: Vec<f64> = (0..inst.m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v0: Vec<f64> = (0..inst.n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let traj = single_loop_run(&oracle, &config, &w0, &v0).unwrap();
        let report = sector_audit(&oracle, &consts, &config, &traj, &mult).unwrap();
        let min = report
            .checks
            .iter()
            .map(|c| c.min_margin)
            .fold(f64::INFINITY, f64::min);
        ok &= report.all_passed && report.steps_audited == 5000 && min >= -1e-10;
        results.push(format!("{name}: min margin {min:.2e}"));
    }
    verdict(5, "sector audits", ok, format!("5000 steps each; {}", results.join("; ")));
}

fn naive_congruence_residual(t: &bilevel_core::certificate::Transform, m: usize, n: usize) -> f64 {
    let mm = t.m.to_rows();
    let n0 = t.n0.to_rows();
    let dim = mm.len();
    let mut worst = 0.0f64;
    for i in 0..dim {
        for j in 0..dim {
            let mut s = 0.0;
            for k in 0..dim {
                for l in 0..dim {
                    s += mm[k][i] * n0[k][l] * mm[l][j];
                }
            }
            let target = match (i == j, i < m + n) {
                (true, true) => -1.0,
                (true, false) => 1.0,
                _ => 0.0,
            };
            worst = worst.max((s - target).abs());
        }
    }
    worst
}

#[test]
fn criterion_06_transformation_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut lam = || 10f64.powf(rng.gen_range(-2.0..2.0));
        let (l1, l2, l3, l4) = (lam(), lam(), lam(), lam());
        let a = 3.0 * l1 * l1 / (4.0 * l3) * rng.gen_range(-1.0..0.9);
        let b = l2 * l2 / (4.0 * l4) * rng.gen_range(-1.0..0.9);
        let mult = Multipliers {
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            lambda4: l4,
            a,
            b,
        };
        let m = rng.gen_range(1..=3);
        let n = rng.gen_range(1..=3);
        let t = build_transform(&mult, m, n).unwrap();
        worst = worst.max(naive_congruence_residual(&t, m, n));
    }
    verdict(
        6,
        "transformation identity",
        worst <= 1e-9,
        format!("100 random multiplier sets, max |MᵀN0M − diag(−I, I)| = {worst:.3e}"),
    );
}

fn grid_hinf(c: f64, p: f64, rho: f64) -> f64 {
    let points = 10_000;
    (0..points)
        .map(|i| {
            let theta = std::f64::consts::PI * i as f64 / (points - 1) as f64;
            let (re, im) = (rho * theta.cos() - p, rho * theta.sin());
            c.abs() / (re * re + im * im).sqrt()
        })
        .fold(0.0, f64::max)
}

#[test]
fn criterion_07_hinf_closed_form_vs_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let rho = rng.gen_range(0.05..=1.0);
        let p = rng.gen_range(-0.99..0.99) * rho;
        let c = rng.gen_range(-2.0..2.0);
        let closed = hinf_first_order(c, p, rho).unwrap();
        let grid = grid_hinf(c, p, rho);
        worst = worst.max((closed - grid).abs() / closed.abs().max(1e-300));
    }
    verdict(
        7,
        "H∞ closed form vs frequency grid",
        worst <= 1e-6,
        format!("100 stable triples, worst relative gap {worst:.3e}"),
    );
}

#[test]
fn criterion_08_small_gain_bisection() {
    let consts = derive_constants(&ref1()).unwrap();
    let rho_min = min_certifiable_rho(&consts, 0.0007, 0.06).unwrap();
    let at_half = small_gain_verdict(&consts, 0.0007, 0.06, 0.5).unwrap();
    let ok = rho_min <= 0.999479 + 1e-6 && rho_min > 0.5 && !at_half.feasible;
    verdict(
        8,
        "small-gain bisection consistency",
        ok,
        format!(
            "min certifiable rho = {rho_min:.7}, verdict at 0.5 feasible = {} (gain_P = {:.4})",
            at_half.feasible, at_half.gain_p
        ),
    );
}

fn violated(c: &ProblemConstants, alpha: f64, beta: f64) -> Option<Vec<Condition>> {
    match certified_rate(c, alpha, beta) {
        Err(Error::StepSizeInfeasible { violated }) => Some(violated),
        _ => None,
    }
}

#[test]
fn criterion_09_step_size_gate() {
    let r1 = derive_constants(&ref1()).unwrap();
    let r0 = derive_constants(&ref0()).unwrap();
    // On REF1 an α above 1/48 always breaks α/β² too, so the α-only case uses REF0.
    let alpha_case = violated(&r0, 0.05, 0.06);
    let beta_case = violated(&r1, 0.0007, 0.07);
    let ratio_case = violated(&r1, 0.0007, 0.058);
    let ok = alpha_case == Some(vec![Condition::AlphaBound])
        && beta_case == Some(vec![Condition::BetaBound])
        && ratio_case == Some(vec![Condition::RatioBound]);
    verdict(
        9,
        "step-size gate",
        ok,
        format!("alpha: {alpha_case:?}; beta: {beta_case:?}; ratio: {ratio_case:?}"),
    );
}

#[test]
fn criterion_10_divergence_detection() {
    let oracle = as_oracle(&ref1()).unwrap();
    let run = single_loop_run(&oracle, &SolverConfig::new(10.0, 0.06, 1000), &[0.0], &[0.0]);
    let (ok, detail) = match run {
        Err(Error::DivergenceDetected { last_finite_step }) => {
            (last_finite_step < 1000, format!("DivergenceDetected at step {last_finite_step}"))
        }
        Ok(traj) => {
            let errs: Vec<f64> = traj.steps.iter().map(|s| s.omega_err.unwrap()).collect();
            let nondecreasing = errs.windows(2).all(|w| w[1] >= w[0]);
            (nondecreasing, format!("no overflow; error non-decreasing = {nondecreasing}"))
        }
        Err(e) => (false, format!("unexpected error {e}")),
    };
    verdict(10, "divergence detection", ok, detail);
}

#[test]
fn criterion_11_baseline_cost_report() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut texts = Vec::new();
    let mut codes = Vec::new();
    for d in &dirs {
        let out = d.path().to_str().unwrap().to_string();
        codes.push(bilevel_core::cli::main_with_args([
            "bilevel", "compare", "--named", "ref1", "--target", "1e-6", "--out", &out,
        ]));
        texts.push(std::fs::read_to_string(d.path().join("comparison.json")).unwrap());
    }
    let v: serde_json::Value = serde_json::from_str(&texts[0]).unwrap();
    let count = |method: &str| v[method]["lower_evals"].as_u64();
    let schema_ok = ["target", "alpha", "beta", "inner_tol", "partial", "single_loop", "double_loop"]
        .iter()
        .all(|k| v.get(k).is_some())
        && ["single_loop", "double_loop"].iter().all(|m| {
            ["converged", "outer_iterations", "lower_evals", "upper_evals", "hessian_solves"]
                .iter()
                .all(|k| v[m].get(k).is_some())
        });
    let (single, double) = (count("single_loop"), count("double_loop"));
    let ok = codes == [0, 0]
        && schema_ok
        && texts[0] == texts[1]
        && v["single_loop"]["converged"] == true
        && v["double_loop"]["converged"] == true
        && matches!((single, double), (Some(s), Some(d)) if s < d);
    verdict(
        11,
        "baseline cost report",
        ok,
        format!(
            "lower-level evaluations single = {single:?}, double = {double:?}; schema ok = {schema_ok}; deterministic = {}",
            texts[0] == texts[1]
        ),
    );
}
