use std::path::Path;

use bilevel_core::cli::{main_with_args, EXIT_ERROR, EXIT_OK, EXIT_REJECTED};
use bilevel_core::solver::{fit_rate_rows, read_trajectory_csv, FitWindow, CSV_HEADER};
use bilevel_core::testbed::{load_instance, make_instance};
use serde_json::Value;

fn run(args: &[&str], out: &Path) -> i32 {
    let mut full = vec!["bilevel"];
    full.extend_from_slice(args);
    full.extend_from_slice(&["--out", out.to_str().unwrap()]);
    main_with_args(full)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn certify_ref1_feasible() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&["certify", "--named", "ref1", "--alpha", "0.0007", "--beta", "0.06"], dir.path());
    assert_eq!(code, EXIT_OK);
    let cert = read_json(&dir.path().join("certificate.json"));
    assert_eq!(cert["feasible"], true);
    assert!((cert["rho"].as_f64().unwrap() - 0.999479).abs() < 5e-7);
    assert_eq!(cert["gain_k_bound"], 1.0);
    assert!(cert["gain_p"].as_f64().unwrap() < 1.0);
}

#[test]
fn certify_ref1_alpha_too_large() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&["certify", "--named", "ref1", "--alpha", "0.05", "--beta", "0.06"], dir.path());
    assert_eq!(code, EXIT_REJECTED);
    let cert = read_json(&dir.path().join("certificate.json"));
    assert_eq!(cert["feasible"], false);
    let violated: Vec<&str> = cert["violated_conditions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(violated.contains(&"alpha_bound"));
    assert_eq!(cert["gain_p"], "inf");
}

#[test]
fn certify_ref0_auto() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["certify", "--named", "ref0", "--auto"], dir.path()), EXIT_OK);
    let cert = read_json(&dir.path().join("certificate.json"));
    assert_eq!(cert["bounds"]["ratio_max"], "inf");
}

#[test]
fn missing_instance_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let code = run(&["certify", "--instance", missing.to_str().unwrap(), "--auto"], dir.path());
    assert_eq!(code, EXIT_ERROR);
}

#[test]
fn solve_ref1_passes_and_csv_refits_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&["solve", "--named", "ref1", "--alpha", "0.0007", "--beta", "0.06"], dir.path());
    assert_eq!(code, EXIT_OK);
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["pass"], true);
    let rho_hat = report["rho_hat"].as_f64().unwrap();
    assert!((rho_hat - 0.9986).abs() < 0.001);
    assert!(report["wall_time_s"].as_f64().is_some());

    let csv_path = dir.path().join("trajectory.csv");
    let header = std::fs::read_to_string(&csv_path).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, CSV_HEADER.join(","));
    let rows = read_trajectory_csv(&csv_path).unwrap();
    assert_eq!(rows.len(), 20_001);
    assert_eq!((rows[0].upper_evals, rows[0].lower_evals), (1, 1));
    let refit = fit_rate_rows(&rows, &FitWindow::default()).unwrap();
    assert!((refit.rho_hat - rho_hat).abs() <= 1e-12);
}

#[test]
fn solve_from_optimum_reports_not_applicable() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(
        &["solve", "--named", "ref1", "--alpha", "0.0007", "--beta", "0.06", "--start", "optimum", "--iters", "200"],
        dir.path(),
    );
    assert_eq!(code, EXIT_OK);
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["pass"], "n/a");
    assert!(report["note"].as_str().unwrap().contains("decay"));
    let rows = read_trajectory_csv(dir.path().join("trajectory.csv")).unwrap();
    assert!(rows.iter().all(|r| r.omega_err == Some(0.0) && r.v_err == Some(0.0)));
}

#[test]
fn solve_refuses_uncertified_steps_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&["solve", "--named", "ref1", "--alpha", "10", "--beta", "0.06"], dir.path());
    assert_eq!(code, EXIT_REJECTED);
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn solve_forced_divergence_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(
        &["solve", "--named", "ref1", "--alpha", "10", "--beta", "0.06", "--force", "--iters", "1000"],
        dir.path(),
    );
    assert_eq!(code, EXIT_REJECTED);
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["diverged"], true);
    assert!(report["last_finite_k"].as_u64().unwrap() < 1000);
}

#[test]
fn compare_target_above_initial_error_costs_nothing() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["compare", "--named", "ref1", "--target", "10"], dir.path()), EXIT_OK);
    let v = read_json(&dir.path().join("comparison.json"));
    for m in ["single_loop", "double_loop"] {
        assert_eq!(v[m]["outer_iterations"], 0);
        assert_eq!(v[m]["lower_evals"], 0);
        assert_eq!(v[m]["hessian_solves"], 0);
    }
}

#[test]
fn compare_ref0_is_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(&["compare", "--named", "ref0", "--target", "1e-6", "--start", "random", "--seed", "3"], dir.path()),
        EXIT_OK
    );
    let v = read_json(&dir.path().join("comparison.json"));
    assert_eq!(v["partial"], false);
    assert!(v["single_loop"]["final_omega_err"].as_f64().unwrap() <= 1e-6);
    assert!(v["double_loop"]["final_omega_err"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn compare_budget_exhaustion_is_partial() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&["compare", "--named", "ref1", "--target", "1e-6", "--iters", "10"], dir.path());
    assert_eq!(code, EXIT_REJECTED);
    let v = read_json(&dir.path().join("comparison.json"));
    assert_eq!(v["partial"], true);
    assert_eq!(v["single_loop"]["converged"], false);
}

#[test]
fn audit_ref1_passes() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&["audit", "--named", "ref1", "--alpha", "0.0007", "--beta", "0.06"], dir.path());
    assert_eq!(code, EXIT_OK);
    let v = read_json(&dir.path().join("audit.json"));
    assert_eq!(v["audit"]["all_passed"], true);
    assert_eq!(v["audit"]["steps_audited"], 5001);
    assert_eq!(v["audit"]["checks"].as_array().unwrap().len(), 6);
}

#[test]
fn audit_with_inflated_mu_f_fails() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(
        &["audit", "--named", "ref1", "--alpha", "0.0007", "--beta", "0.06", "--mu-f", "50"],
        dir.path(),
    );
    assert_eq!(code, EXIT_REJECTED);
    let v = read_json(&dir.path().join("audit.json"));
    let first = &v["audit"]["checks"][0];
    assert_eq!(first["check"], "upper_correlation");
    assert_eq!(first["passed"], false);
    assert_eq!(first["first_violation"], 0);
}

#[test]
fn audit_equilibrium_has_zero_margins() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(
        &["audit", "--named", "ref1", "--alpha", "0.0007", "--beta", "0.06", "--start", "optimum", "--iters", "50"],
        dir.path(),
    );
    assert_eq!(code, EXIT_OK);
    let v = read_json(&dir.path().join("audit.json"));
    for c in v["audit"]["checks"].as_array().unwrap() {
        assert_eq!(c["min_margin"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn audit_refuses_infeasible_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&["audit", "--named", "ref1", "--alpha", "0.05", "--beta", "0.06"], dir.path());
    assert_eq!(code, EXIT_REJECTED);
    assert!(!dir.path().join("audit.json").exists());
}

#[test]
fn gen_writes_loadable_instance() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["gen", "--gen", "5,3,42,10"], dir.path()), EXIT_OK);
    let path = dir.path().join("instance.json");
    let v = read_json(&path);
    for key in ["m", "n", "A", "B", "C", "Q", "d"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(load_instance(&path).unwrap(), make_instance(5, 3, 42, 10.0).unwrap());
}

#[test]
fn commands_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        run(&["certify", "--gen", "2,2,7,1.5", "--auto"], dir.path());
        run(&["solve", "--gen", "2,2,7,1.5", "--auto", "--iters", "300", "--start", "random", "--seed", "9"], dir.path());
    }
    for file in ["certificate.json", "trajectory.csv"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between runs");
    }
}
