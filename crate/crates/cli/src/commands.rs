//! Command implementations: each resolves a scenario, runs the solvers, and
//! writes plot-ready CSV tables plus JSON reports under the output
//! directory, recording everything in a run manifest.

use crate::manifest::ManifestBuilder;
use crate::overrides::{parse_point, resolve_scenario};
use crate::{CliError, ScenarioArgs};
use mfg_core::control::ControlProblem;
use mfg_core::csvio::fmt_float;
use mfg_core::hjb::regularity_report;
use mfg_core::measure::{density_estimate, time_lipschitz_report, ParticleMeasure};
use mfg_core::mfg::{picard_solve, verify_solution};
use mfg_core::scenario::{builtin_scenarios, ScenarioConfig, ScenarioRuntime};
use mfg_core::MfgError;
use serde_json::json;
use std::path::{Path, PathBuf};

fn prepare_out(dir: &Path, command: &str, scenario: &str) -> Result<PathBuf, CliError> {
    let sub = dir.join(format!("{command}-{scenario}"));
    std::fs::create_dir_all(&sub)
        .map_err(|e| CliError::config("io", format!("cannot create {}: {e}", sub.display())))?;
    Ok(sub)
}

fn runtime(cfg: ScenarioConfig) -> Result<ScenarioRuntime, CliError> {
    ScenarioRuntime::new(cfg).map_err(CliError::from_core)
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::config("io", e.to_string())
}

/// Closed-form value of the isotropic quadratic benchmark on identity
/// dynamics: g = (kappa/2)|x|^2 with f = 0 gives
/// u(x,t) = (kappa/2)|x|^2 / (1 + kappa (T - t)).
fn hopf_lax_quadratic(x: &[f64], t: f64, horizon: f64, kappa: f64) -> f64 {
    let r2: f64 = x.iter().map(|c| c * c).sum();
    0.5 * kappa * r2 / (1.0 + kappa * (horizon - t))
}

pub fn solve_hjb(args: &ScenarioArgs, out: &Path) -> Result<i32, CliError> {
    let cfg = resolve_scenario(args)?;
    let dir = prepare_out(out, "solve-hjb", &cfg.name)?;
    let mut manifest = ManifestBuilder::new("solve-hjb", &cfg.name, cfg.numerics.seed, &args.set);
    let rt = runtime(cfg)?;
    for w in rt.config.coupling.smoothness_warnings() {
        manifest.note(w);
    }
    let curve = rt.frozen_curve().map_err(CliError::from_core)?;
    let u = rt.solve_hjb_for(&curve).map_err(CliError::from_core)?;

    manifest
        .write_artifact(&dir.join("u.csv"), u.to_csv().as_bytes())
        .map_err(io_err)?;
    u.save_binary(&dir.join("u.bin"))
        .map_err(CliError::from_core)?;

    let reg = regularity_report(&u);
    let mut report = json!({
        "regularity": reg,
        "grid_cells": u.grid.cells,
        "dt": u.dt,
        "steps": u.steps,
    });
    // built-in analytic cross-check for the identity quadratic benchmark
    if rt.config.name.starts_with("identity2d-decoupled") {
        let mut worst = 0.0f64;
        let nodes = u.grid.node_count();
        let mut x = vec![0.0; 2];
        for k in 0..=u.steps {
            let t = k as f64 * u.dt;
            let layer = u.layer(k);
            for node in 0..nodes {
                u.grid.node_position_into(node, &mut x);
                if rt.config.domain.contains(&x) {
                    let exact = hopf_lax_quadratic(&x, t, rt.config.numerics.horizon, 0.5);
                    worst = worst.max((layer[node] - exact).abs());
                }
            }
        }
        report["hopf_lax_comparison"] = json!({
            "sup_error_inner_box": worst,
            "reference": "u(x,t) = 0.25|x|^2 / (1 + 0.5 (T - t))",
        });
    }
    manifest
        .write_artifact(
            &dir.join("regularity.json"),
            serde_json::to_string_pretty(&report).unwrap().as_bytes(),
        )
        .map_err(io_err)?;
    manifest.finish(&dir, 0).map_err(io_err)?;
    println!("solve-hjb {}: wrote {}", rt.config.name, dir.display());
    Ok(0)
}

fn write_snapshots(
    manifest: &mut ManifestBuilder,
    dir: &Path,
    snapshots: &[ParticleMeasure],
) -> Result<(), CliError> {
    for (k, m) in snapshots.iter().enumerate() {
        let base = format!("m_t{k:04}");
        manifest
            .write_artifact(&dir.join(format!("{base}.csv")), m.to_csv().as_bytes())
            .map_err(io_err)?;
        manifest
            .write_artifact(
                &dir.join(format!("{base}.json")),
                serde_json::to_string_pretty(&m.sidecar()).unwrap().as_bytes(),
            )
            .map_err(io_err)?;
    }
    Ok(())
}

pub fn solve_mfg(args: &ScenarioArgs, out: &Path) -> Result<i32, CliError> {
    let cfg = resolve_scenario(args)?;
    let dir = prepare_out(out, "solve-mfg", &cfg.name)?;
    let mut manifest = ManifestBuilder::new("solve-mfg", &cfg.name, cfg.numerics.seed, &args.set);
    let rt = runtime(cfg)?;
    let sol = picard_solve(&rt).map_err(CliError::from_core)?;
    let exit = if sol.converged { 0 } else { 3 };

    manifest
        .write_artifact(&dir.join("u.csv"), sol.u.to_csv().as_bytes())
        .map_err(io_err)?;
    sol.u
        .save_binary(&dir.join("u.bin"))
        .map_err(CliError::from_core)?;
    write_snapshots(&mut manifest, &dir, &sol.flow_snapshots)?;

    let verification = verify_solution(&rt, &sol).map_err(CliError::from_core)?;
    let diagnostics = json!({
        "converged": sol.converged,
        "iterations": sol.iterations,
        "residual_history": sol.residual_history,
        "decoupled": sol.decoupled,
        "snapshot_times": sol.snapshot_times,
        "verification": verification,
    });
    manifest
        .write_artifact(
            &dir.join("diagnostics.json"),
            serde_json::to_string_pretty(&diagnostics).unwrap().as_bytes(),
        )
        .map_err(io_err)?;
    manifest
        .write_artifact(
            &dir.join("scenario.lock"),
            rt.config.to_toml().map_err(CliError::from_core)?.as_bytes(),
        )
        .map_err(io_err)?;
    if !sol.converged {
        manifest.note(format!(
            "fixed point did not converge in {} iterations; final residual {:.3e}",
            sol.iterations,
            sol.residual_history.last().copied().unwrap_or(f64::NAN)
        ));
    }
    manifest.finish(&dir, exit).map_err(io_err)?;
    println!(
        "solve-mfg {}: {} after {} iterations (residuals {:?})",
        rt.config.name,
        if sol.converged { "converged" } else { "NOT converged" },
        sol.iterations,
        sol.residual_history
    );
    Ok(exit)
}

pub fn trajectory(args: &ScenarioArgs, x0_text: &str, t: f64, out: &Path) -> Result<i32, CliError> {
    let cfg = resolve_scenario(args)?;
    let dir = prepare_out(out, "trajectory", &cfg.name)?;
    let mut manifest = ManifestBuilder::new("trajectory", &cfg.name, cfg.numerics.seed, &args.set);
    let rt = runtime(cfg)?;
    let x0 = parse_point(x0_text, rt.dim())?;
    if !rt.config.domain.contains(&x0) {
        return Err(CliError::config(
            "point-outside-box",
            format!("x0 {x0:?} lies outside the scenario box"),
        ));
    }
    if !(t >= 0.0 && t < rt.config.numerics.horizon) {
        return Err(CliError::config(
            "time-outside-horizon",
            format!("t = {t} must lie in [0, T)"),
        ));
    }
    // trajectory-level commands work against the frozen initial population
    let curve = rt.frozen_curve().map_err(CliError::from_core)?;
    let (f, g) = rt.coupled_costs(&curve).map_err(CliError::from_core)?;
    let problem = ControlProblem::new(&rt.field, &f, &g, rt.config.numerics.horizon);
    let shooting_cfg = rt.config.shooting_config();
    let set = match problem.solve_bvp_shooting(&x0, t, &shooting_cfg) {
        Ok(set) => set,
        Err(err @ MfgError::ShootingNonConvergence { .. }) => {
            manifest.note(err.to_string());
            manifest.finish(&dir, 4).map_err(io_err)?;
            eprintln!(
                "{}",
                CliError {
                    exit_code: 4,
                    kind: "shooting-nonconvergence".into(),
                    message: err.to_string()
                }
                .to_json()
            );
            return Ok(4);
        }
        Err(other) => return Err(CliError::from_core(other)),
    };
    manifest
        .write_artifact(
            &dir.join("extremal.csv"),
            set.representative.to_csv().as_bytes(),
        )
        .map_err(io_err)?;

    let u = rt.solve_hjb_for(&curve).map_err(CliError::from_core)?;
    let s_mid = t + 0.5 * (rt.config.numerics.horizon - t);
    let uniq = problem
        .uniqueness_probe(&set.representative, s_mid, &shooting_cfg, Some(&u))
        .map_err(CliError::from_core)?;
    let concat = problem
        .concatenation_check(&set.representative, s_mid, &shooting_cfg)
        .map_err(CliError::from_core)?;
    let probes = json!({
        "cost": set.value,
        "terminal_defect": set.representative.terminal_defect,
        "integral_form_residual": problem.integral_form_residual(&set.representative),
        "alternates": set.alternates.len(),
        "spurious": set.spurious.len(),
        "uniqueness": uniq,
        "concatenation_residual": concat,
        "zero_control_upper_bound": problem.zero_control_cost(&x0, t, shooting_cfg.n_steps),
    });
    manifest
        .write_artifact(
            &dir.join("probes.json"),
            serde_json::to_string_pretty(&probes).unwrap().as_bytes(),
        )
        .map_err(io_err)?;
    manifest.finish(&dir, 0).map_err(io_err)?;
    println!(
        "trajectory {} from {x0:?} at t={t}: cost {:.6e}, defect {:.3e}",
        rt.config.name, set.value, set.representative.terminal_defect
    );
    Ok(0)
}

pub fn pushforward(args: &ScenarioArgs, out: &Path) -> Result<i32, CliError> {
    let cfg = resolve_scenario(args)?;
    let dir = prepare_out(out, "pushforward", &cfg.name)?;
    let mut manifest =
        ManifestBuilder::new("pushforward", &cfg.name, cfg.numerics.seed, &args.set);
    let rt = runtime(cfg)?;
    let curve = rt.frozen_curve().map_err(CliError::from_core)?;
    let u = rt.solve_hjb_for(&curve).map_err(CliError::from_core)?;
    let snapshots = rt.transport(&u).map_err(CliError::from_core)?;
    write_snapshots(&mut manifest, &dir, &snapshots)?;

    let final_density = density_estimate(
        snapshots.last().unwrap(),
        &rt.grid,
        rt.config.numerics.bandwidth,
    )
    .map_err(CliError::from_core)?;
    manifest
        .write_artifact(&dir.join("density_T.csv"), final_density.to_csv().as_bytes())
        .map_err(io_err)?;
    if final_density.undersmoothed {
        manifest.note("density bandwidth is below the grid spacing (undersmoothed)");
    }

    let lip = time_lipschitz_report(
        &snapshots,
        &u,
        &rt.field,
        rt.config.numerics.d1_exact_cap,
        1e-3,
    )
    .map_err(CliError::from_core)?;
    let report = json!({
        "time_lipschitz": lip,
        "density_sup": final_density.sup(),
        "density_bound": rt.config.numerics.density_bound,
        "particles": rt.m0.len(),
    });
    manifest
        .write_artifact(
            &dir.join("flow_report.json"),
            serde_json::to_string_pretty(&report).unwrap().as_bytes(),
        )
        .map_err(io_err)?;
    manifest.finish(&dir, 0).map_err(io_err)?;
    println!(
        "pushforward {}: {} snapshots, d1 ratio {:.4} (bound {:.4})",
        rt.config.name,
        snapshots.len(),
        lip.max_ratio,
        lip.bound
    );
    Ok(0)
}

pub fn list_scenarios(out: &Path) -> Result<i32, CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::config("io", format!("cannot create {}: {e}", out.display())))?;
    let mut rows = String::from("name,dim,coupled,horizon,dx,particles\n");
    println!("{:<26} {:>3} {:>8} {:>8} {:>8} {:>10}", "name", "dim", "coupled", "T", "dx", "particles");
    for cfg in builtin_scenarios() {
        let coupled = !cfg.coupling.is_decoupled();
        println!(
            "{:<26} {:>3} {:>8} {:>8} {:>8} {:>10}",
            cfg.name,
            cfg.domain.dim(),
            coupled,
            cfg.numerics.horizon,
            cfg.numerics.dx,
            cfg.numerics.particles
        );
        rows.push_str(&format!(
            "{},{},{},{},{},{}\n",
            cfg.name,
            cfg.domain.dim(),
            coupled,
            fmt_float(cfg.numerics.horizon),
            fmt_float(cfg.numerics.dx),
            cfg.numerics.particles
        ));
    }
    std::fs::write(out.join("scenarios.csv"), rows).map_err(io_err)?;
    Ok(0)
}
