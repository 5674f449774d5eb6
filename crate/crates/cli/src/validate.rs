//! Cross-module invariant battery behind `mfg validate`: field algebra,
//! shooting against the direct-search oracle, transport distances against
//! brute force, sampling determinism, and a deliberate-fault detection
//! check. Prints a summary table, writes a metrics CSV (bit-identical
//! across runs at one seed) and a detail JSON.

use crate::manifest::ManifestBuilder;
use crate::CliError;
use mfg_core::bfield::{b_differentiability_probe, b_gradient_exact};
use mfg_core::control::{ControlProblem, OracleGrid};
use mfg_core::csvio::fmt_float;
use mfg_core::linalg::dist;
use mfg_core::measure::{d1_distance, sample_initial, M0Spec, ParticleMeasure};
use mfg_core::scenario::{builtin_scenarios, ScenarioConfig, ScenarioRuntime};
use mfg_core::grid::BoxDomain;
use serde::Serialize;
use std::path::Path;

#[derive(Serialize)]
struct Check {
    name: String,
    value: f64,
    threshold: f64,
    /// "below": pass when value <= threshold; "above": pass when value >
    /// threshold (fault-detection checks).
    mode: &'static str,
    pass: bool,
}

fn below(name: impl Into<String>, value: f64, threshold: f64) -> Check {
    Check {
        name: name.into(),
        value,
        threshold,
        mode: "below",
        pass: value <= threshold && value.is_finite(),
    }
}

fn above(name: impl Into<String>, value: f64, threshold: f64) -> Check {
    Check {
        name: name.into(),
        value,
        threshold,
        mode: "above",
        pass: value > threshold,
    }
}

/// Shrinks a scenario to validation scale without touching its semantics.
fn validation_scale(mut cfg: ScenarioConfig) -> ScenarioConfig {
    cfg.numerics.particles = cfg.numerics.particles.min(128);
    cfg.numerics.dx = cfg.numerics.dx.max(1.0 / 8.0);
    cfg.numerics.snapshots = cfg.numerics.snapshots.min(9);
    cfg
}

fn scenario_checks(cfg: ScenarioConfig, checks: &mut Vec<Check>) -> Result<(), CliError> {
    let name = cfg.name.clone();
    let rt = ScenarioRuntime::new(validation_scale(cfg)).map_err(CliError::from_core)?;

    // Hamiltonian gradient vs central finite differences in p.
    let eps = 1e-4;
    let mut worst = 0.0f64;
    let probe_points: Vec<Vec<f64>> = rt.config.domain.lattice(3);
    for x in &probe_points {
        let p: Vec<f64> = (0..rt.dim()).map(|i| 0.7 - 0.4 * i as f64).collect();
        let grad = rt.field.dp_hamiltonian(x, &p);
        for axis in 0..rt.dim() {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[axis] += eps;
            lo[axis] -= eps;
            let fd = (rt.field.hamiltonian(x, &hi) - rt.field.hamiltonian(x, &lo)) / (2.0 * eps);
            worst = worst.max((fd - grad[axis]).abs() / 1.0f64.max(grad[axis].abs()));
        }
    }
    checks.push(below(format!("{name}/dp-hamiltonian-fd"), worst, 1e-6));

    // Shooting against the direct-minimization oracle at one start point.
    let curve = rt.frozen_curve().map_err(CliError::from_core)?;
    let (f, g) = rt.coupled_costs(&curve).map_err(CliError::from_core)?;
    let problem = ControlProblem::new(&rt.field, &f, &g, rt.config.numerics.horizon);
    let shooting_cfg = rt.config.shooting_config();
    let x0: Vec<f64> = rt.config.domain.center().iter().map(|c| c + 0.25).collect();
    let set = problem
        .solve_bvp_shooting(&x0, 0.0, &shooting_cfg)
        .map_err(CliError::from_core)?;
    checks.push(below(
        format!("{name}/terminal-defect"),
        set.representative.terminal_defect,
        shooting_cfg.bvp_tol,
    ));
    checks.push(below(
        format!("{name}/adjoint-integral-form"),
        problem.integral_form_residual(&set.representative),
        1e-7,
    ));
    let grid = OracleGrid {
        values_per_axis: 7,
        refine_levels: 5,
        max_sweeps: 6,
        substeps_per_interval: 4,
        ..OracleGrid::default()
    };
    let (_, oracle_cost) = problem
        .direct_minimize_oracle(&x0, 0.0, 6, &grid)
        .map_err(CliError::from_core)?;
    checks.push(below(
        format!("{name}/shooting-le-oracle"),
        set.value - oracle_cost,
        1e-3,
    ));
    Ok(())
}

fn global_checks(checks: &mut Vec<Check>) -> Result<(), CliError> {
    // d1 against brute-force permutation minimum on 6-point clouds.
    let support = BoxDomain::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    let spec = M0Spec::Uniform {
        support: support.clone(),
    };
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let a = sample_initial(&spec, 6, 1000 + seed).map_err(CliError::from_core)?;
        let b = sample_initial(&spec, 6, 2000 + seed).map_err(CliError::from_core)?;
        let exact = d1_distance(&a, &b, 512).map_err(CliError::from_core)?.value;
        let brute = brute_force_d1(&a, &b);
        worst = worst.max((exact - brute).abs());
    }
    checks.push(below("d1/brute-force-agreement", worst, 1e-12));

    // metric axioms on random triples
    let mut axiom_violation = 0.0f64;
    for seed in 0..10u64 {
        let a = sample_initial(&spec, 12, 3 * seed).map_err(CliError::from_core)?;
        let b = sample_initial(&spec, 12, 3 * seed + 1).map_err(CliError::from_core)?;
        let c = sample_initial(&spec, 12, 3 * seed + 2).map_err(CliError::from_core)?;
        let dab = d1_distance(&a, &b, 512).map_err(CliError::from_core)?.value;
        let dba = d1_distance(&b, &a, 512).map_err(CliError::from_core)?.value;
        let dac = d1_distance(&a, &c, 512).map_err(CliError::from_core)?.value;
        let dcb = d1_distance(&c, &b, 512).map_err(CliError::from_core)?.value;
        axiom_violation = axiom_violation
            .max((dab - dba).abs())
            .max(dab - (dac + dcb))
            .max(d1_distance(&a, &a, 512).map_err(CliError::from_core)?.value);
    }
    checks.push(below("d1/metric-axioms", axiom_violation, 1e-12));

    // B-differentiability probe recovers Du . B on a smooth field.
    let cfg = builtin_scenarios()
        .into_iter()
        .find(|c| c.name == "grushin-sin-decoupled")
        .expect("library scenario");
    let field = cfg.build_field().map_err(CliError::from_core)?;
    let x = [0.6, -0.3];
    let u = |y: &[f64]| 0.4 * y[0] * y[0] + 0.3 * y[0] * y[1] + 0.5 * y[1];
    let du = [0.8 * x[0] + 0.3 * x[1], 0.3 * x[0] + 0.5];
    let expected = b_gradient_exact(&du, &field, &x);
    let rep = b_differentiability_probe(u, &field, &x, &[1e-2, 1e-3, 1e-4])
        .map_err(CliError::from_core)?;
    let gap = rep
        .rho_b
        .iter()
        .zip(&expected.components)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    checks.push(below("bfield/probe-matches-gradient", gap, 1e-3));

    // deterministic sampling: identical seeds give bitwise-equal clouds
    let m1 = sample_initial(&spec, 64, 7).map_err(CliError::from_core)?;
    let m2 = sample_initial(&spec, 64, 7).map_err(CliError::from_core)?;
    let identical = m1
        .positions()
        .iter()
        .zip(m2.positions())
        .all(|(a, b)| a == b);
    checks.push(below(
        "measure/sampling-determinism",
        if identical { 0.0 } else { 1.0 },
        0.0,
    ));

    // deliberate fault: flipping the adjoint sign must trip the
    // integral-form residual detector
    let lq = builtin_scenarios()
        .into_iter()
        .find(|c| c.name == "identity2d-decoupled")
        .expect("library scenario");
    let rt = ScenarioRuntime::new(validation_scale(lq)).map_err(CliError::from_core)?;
    let curve = rt.frozen_curve().map_err(CliError::from_core)?;
    let (f, g) = rt.coupled_costs(&curve).map_err(CliError::from_core)?;
    let problem = ControlProblem::new(&rt.field, &f, &g, rt.config.numerics.horizon);
    let set = problem
        .solve_bvp_shooting(&[0.5, 0.25], 0.0, &rt.config.shooting_config())
        .map_err(CliError::from_core)?;
    let mut corrupted = set.representative.clone();
    for p in &mut corrupted.adjoints {
        for c in p.iter_mut() {
            *c = -*c;
        }
    }
    checks.push(above(
        "control/adjoint-fault-detected",
        problem.integral_form_residual(&corrupted),
        1e-3,
    ));
    Ok(())
}

fn brute_force_d1(a: &ParticleMeasure, b: &ParticleMeasure) -> f64 {
    let n = a.len();
    let mut cols: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut cols, 0, &mut |perm| {
        let total: f64 = (0..n)
            .map(|i| dist(&a.positions()[i], &b.positions()[perm[i]]))
            .sum();
        best = best.min(total / n as f64);
    });
    best
}

fn permute(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

pub fn run(requested: &[String], out: &Path) -> Result<i32, CliError> {
    let all = builtin_scenarios();
    let selected: Vec<ScenarioConfig> = if requested.is_empty() {
        all
    } else {
        all.into_iter()
            .filter(|c| requested.iter().any(|r| r == &c.name))
            .collect()
    };
    if selected.is_empty() {
        return Err(CliError::config(
            "scenario-list-empty",
            "no scenarios matched the requested names",
        ));
    }
    let dir = out.join("validate");
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::config("io", format!("cannot create {}: {e}", dir.display())))?;
    let seed = selected[0].numerics.seed;
    let mut manifest = ManifestBuilder::new("validate", "builtin-battery", seed, &[]);

    let mut checks = Vec::new();
    global_checks(&mut checks)?;
    for cfg in selected {
        scenario_checks(cfg, &mut checks)?;
    }

    let mut csv = String::from("check,value,threshold,pass\n");
    println!("{:<44} {:>14} {:>12} {:>6}", "check", "value", "threshold", "state");
    let mut failures = Vec::new();
    for c in &checks {
        println!(
            "{:<44} {:>14.6e} {:>12.1e} {:>6}",
            c.name,
            c.value,
            c.threshold,
            if c.pass { "PASS" } else { "FAIL" }
        );
        csv.push_str(&format!(
            "{},{},{},{}\n",
            c.name,
            fmt_float(c.value),
            fmt_float(c.threshold),
            if c.pass { 1 } else { 0 }
        ));
        if !c.pass {
            failures.push(c.name.clone());
        }
    }
    manifest
        .write_artifact(&dir.join("validate_metrics.csv"), csv.as_bytes())
        .map_err(|e| CliError::config("io", e.to_string()))?;
    manifest
        .write_artifact(
            &dir.join("validate_report.json"),
            serde_json::to_string_pretty(&checks).unwrap().as_bytes(),
        )
        .map_err(|e| CliError::config("io", e.to_string()))?;
    let exit = if failures.is_empty() { 0 } else { 5 };
    manifest
        .finish(&dir, exit)
        .map_err(|e| CliError::config("io", e.to_string()))?;
    if !failures.is_empty() {
        eprintln!(
            "{}",
            serde_json::json!({
                "error_kind": "validation-failed",
                "message": format!("{} checks failed", failures.len()),
                "failures": failures,
            })
        );
    }
    Ok(exit)
}
