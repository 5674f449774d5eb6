//! Cross-module checks: the value function against the direct-search
//! oracle, optimality of the lifted feedback control, dynamic-programming
//! residuals on the grid, the transported density bound, and the
//! general-dimension perturbation probe.

use mfg_core::bfield::b_differentiability_probe;
use mfg_core::control::{feedback_flow, ControlPath, ControlProblem, OracleGrid};
use mfg_core::coupling::eval_f;
use mfg_core::expr::Expr;
use mfg_core::fields::{ExprCost, FnCost, RunningCost, TerminalCost, ZeroCost};
use mfg_core::grid::BoxDomain;
use mfg_core::linalg::{dist, simpson_uniform};
use mfg_core::measure::{
    d1_distance, density_estimate, push_forward, sample_initial, M0Spec, ParticleMeasure,
};
use mfg_core::mfg::picard_solve;
use mfg_core::scenario::{builtin, ScenarioRuntime};
use std::sync::Arc;

fn runtime(name: &str, dx: f64, particles: usize) -> ScenarioRuntime {
    let mut cfg = builtin(name).unwrap();
    cfg.numerics.dx = dx;
    cfg.numerics.particles = particles;
    cfg.numerics.snapshots = 9;
    ScenarioRuntime::new(cfg).unwrap()
}

#[test]
fn value_function_matches_direct_oracle_at_scattered_points() {
    for name in [
        "identity2d-decoupled",
        "grushin-sin-decoupled",
        "grushin-sin-coupled",
    ] {
        let rt = runtime(name, 1.0 / 32.0, 256);
        let curve = rt.frozen_curve().unwrap();
        let u = rt.solve_hjb_for(&curve).unwrap();
        let (f, g) = rt.coupled_costs(&curve).unwrap();
        let problem = ControlProblem::new(&rt.field, &f, &g, 1.0);
        let grid = OracleGrid {
            substeps_per_interval: 4,
            ..OracleGrid::default()
        };
        for (x0, t) in [
            (vec![0.5, 0.5], 0.0),
            (vec![-0.5, 0.25], 0.25),
            (vec![0.0, -0.5], 0.5),
            (vec![0.75, -0.25], 0.0),
            (vec![-0.25, -0.75], 0.125),
        ] {
            let numeric = u.value_at(&x0, t).unwrap();
            let (_, oracle) = problem.direct_minimize_oracle(&x0, t, 8, &grid).unwrap();
            assert!(
                (numeric - oracle).abs() < 2e-2,
                "{name} at ({x0:?}, {t}): u = {numeric:.5} vs oracle {oracle:.5}"
            );
        }
    }
}

#[test]
fn lifted_feedback_control_is_near_optimal() {
    // The flow x' = -D_x u B B^T started anywhere admits the lifted control
    // alpha = -D_B u along itself, and its cost must not beat nor trail the
    // optimal value by more than the grid tolerance.
    let rt = runtime("grushin-sin-decoupled", 1.0 / 32.0, 64);
    let curve = rt.frozen_curve().unwrap();
    let u = rt.solve_hjb_for(&curve).unwrap();
    let (f, g) = rt.coupled_costs(&curve).unwrap();
    let problem = ControlProblem::new(&rt.field, &f, &g, 1.0);
    for x0 in [[0.53125, 0.21875], [-0.40625, 0.59375]] {
        let traj = feedback_flow(&x0, &u, &rt.field, 0.0, 1.0, 2).unwrap();
        // lifted control alpha(s) = -D_B u(x(s), s)
        let mut integrand = Vec::with_capacity(traj.times.len());
        for (s, x) in traj.times.iter().zip(&traj.states) {
            let (bg, _) = u.numeric_b_gradient(&rt.field, x, *s).unwrap();
            let a2: f64 = bg.components.iter().map(|c| c * c).sum();
            integrand.push(0.5 * a2 + f.value(x, *s));
        }
        let h = traj.times[1] - traj.times[0];
        let flow_cost = simpson_uniform(&integrand, h) + g.value(traj.final_state());
        let shooting = problem
            .solve_bvp_shooting(&x0, 0.0, &rt.config.shooting_config())
            .unwrap();
        assert!(
            flow_cost <= shooting.value + 0.05,
            "flow cost {flow_cost:.5} should be near the optimal {:.5}",
            shooting.value
        );
        assert!(
            flow_cost >= shooting.value - 1e-6,
            "flow cost cannot beat the optimum: {flow_cost:.6} vs {:.6}",
            shooting.value
        );
    }
}

#[test]
fn feedback_flow_follows_the_analytic_linear_quadratic_path() {
    // identity dynamics, g = 0.25 |x|^2: the optimal path from x0 is the
    // straight line x(s) = x0 (1 - 0.5 s / (1 + 0.5 T)).
    let rt = runtime("identity2d-decoupled", 1.0 / 32.0, 64);
    let curve = rt.frozen_curve().unwrap();
    let u = rt.solve_hjb_for(&curve).unwrap();
    let x0 = [0.625, -0.4375];
    let traj = feedback_flow(&x0, &u, &rt.field, 0.0, 1.0, 2).unwrap();
    let mut worst = 0.0f64;
    for (s, x) in traj.times.iter().zip(&traj.states) {
        let shrink = 1.0 - 0.5 * s / 1.5;
        let exact = [x0[0] * shrink, x0[1] * shrink];
        worst = worst.max(dist(x, &exact));
    }
    assert!(
        worst < 2.0 * rt.grid.min_dx(),
        "flow deviates {worst:.4} from the analytic optimal path"
    );
    // u constant in x keeps the flow stationary
    let flat = runtime("identity2d-decoupled", 1.0 / 8.0, 16);
    let mut cfg2 = flat.config.clone();
    cfg2.coupling.g_form = Expr::parse("3").unwrap();
    let rt2 = ScenarioRuntime::new(cfg2).unwrap();
    let curve2 = rt2.frozen_curve().unwrap();
    let u2 = rt2.solve_hjb_for(&curve2).unwrap();
    let still = feedback_flow(&[0.5, 0.5], &u2, &rt2.field, 0.0, 1.0, 2).unwrap();
    for x in &still.states {
        assert!(dist(x, &[0.5, 0.5]) < 1e-9);
    }
}

#[test]
fn dynamic_programming_residual_on_the_grid() {
    // u(x, t) equals the best [running cost to s] + u(x(s), s) over
    // discrete controls: checked with the direct oracle taking the value
    // snapshot as its terminal datum.
    let rt = runtime("grushin-sin-decoupled", 1.0 / 32.0, 64);
    let curve = rt.frozen_curve().unwrap();
    let u = Arc::new(rt.solve_hjb_for(&curve).unwrap());
    let (f, _) = rt.coupled_costs(&curve).unwrap();
    for (x0, t, s) in [
        (vec![0.5, 0.25], 0.0, 0.5),
        (vec![-0.25, 0.5], 0.25, 0.75),
        (vec![0.0, -0.5], 0.5, 1.0),
    ] {
        let u_terminal = Arc::clone(&u);
        let snapshot = FnCost::new(move |x: &[f64], _| {
            u_terminal.value_at(x, s).unwrap_or(f64::INFINITY)
        });
        let problem = ControlProblem::new(&rt.field, &f, &snapshot, s);
        let grid = OracleGrid {
            substeps_per_interval: 4,
            ..OracleGrid::default()
        };
        let (_, best) = problem.direct_minimize_oracle(&x0, t, 6, &grid).unwrap();
        let direct = u.value_at(&x0, t).unwrap();
        assert!(
            (best - direct).abs() < 2e-2,
            "DPP residual at ({x0:?}, {t}, {s}): {:.4e}",
            (best - direct).abs()
        );
    }
}

#[test]
fn verification_report_on_the_analytic_benchmark() {
    // decoupled identity dynamics with the quadratic well: u is smooth, so
    // the pointwise HJ residual must sit at the scheme's truncation scale
    // and the kink mask should stay silent.
    let rt = runtime("identity2d-decoupled", 1.0 / 16.0, 128);
    let sol = picard_solve(&rt).unwrap();
    let report = mfg_core::mfg::verify_solution(&rt, &sol).unwrap();
    let scale = rt.grid.min_dx() + sol.u.dt;
    assert!(
        report.hj_residual_sup < 10.0 * scale,
        "HJ residual sup {:.3e} vs scheme scale {scale:.3e}",
        report.hj_residual_sup
    );
    assert!(
        report.hj_residual_mean < 2.0 * scale,
        "HJ residual mean {:.3e}",
        report.hj_residual_mean
    );
    assert!(report.kink_fraction < 0.01, "kinks on a smooth solution");
    assert_eq!(report.terminal_consistency, 0.0);
    assert!(report.uniqueness.iter().all(|p| p.within_tol));
}

#[test]
fn transported_density_stays_bounded() {
    // the reconstructed density of the transported cloud stays below the
    // fixture bound as the flow concentrates toward the terminal well
    let rt = runtime("grushin-sin-decoupled", 1.0 / 16.0, 1024);
    let curve = rt.frozen_curve().unwrap();
    let u = rt.solve_hjb_for(&curve).unwrap();
    let half = push_forward(&rt.m0, &u, &rt.field, 0.5, 2).unwrap();
    let density = density_estimate(&half, &rt.grid, 0.3).unwrap();
    assert!(density.values.iter().all(|v| *v >= 0.0));
    // fixture bound: the observed deterministic value is 2.097 as the
    // gaussian cloud drifts into the terminal well; 2.5 leaves margin
    // without hiding a blow-up
    assert!(
        density.sup() < 2.5,
        "density at T/2 should stay below the fixture bound, got {}",
        density.sup()
    );
}

#[test]
fn general_dimension_probe_recovers_the_matrix_row() {
    // u = x3 on the Heisenberg field: rho_B = Du B = third row of B.
    let cfg = builtin("heisenberg3d-decoupled").unwrap();
    let field = cfg.build_field().unwrap();
    let x = [0.4, -0.7, 0.2];
    let rep = b_differentiability_probe(|y| y[2], &field, &x, &[1e-2, 1e-3, 1e-4]).unwrap();
    let row = field.eval_matrix(&x).unwrap()[2].clone();
    for axis in 0..3 {
        assert!(
            (rep.rho_b[axis] - row[axis]).abs() < 1e-4,
            "axis {axis}: probe {} vs row {}",
            rep.rho_b[axis],
            row[axis]
        );
    }
    assert!(rep.residuals.last().unwrap() < &1e-3);
}

#[test]
fn grushin_energy_cost_converges_under_knot_refinement() {
    // alpha = (0,1) from (pi/2, 0): x2(s) = integral of sin(x1) = s, so the
    // cost is 1/2 + g((pi/2, 1)); successive knot refinements must settle
    // below 1e-8.
    let cfg = builtin("grushin-sin-decoupled").unwrap();
    let field = cfg.build_field().unwrap();
    let g = ExprCost::parse("x2*step5(((x1^2+x2^2)-9)/16)", 2).unwrap();
    let problem = ControlProblem::new(&field, &ZeroCost, &g, 1.0);
    let x0 = [std::f64::consts::FRAC_PI_2, 0.0];
    let alpha = ControlPath::constant(vec![0.0, 1.0], 0.0, 1.0);
    let mut costs = Vec::new();
    for steps in [100, 200, 400, 800] {
        let traj = problem.integrate_dynamics(&x0, 0.0, &alpha, steps).unwrap();
        costs.push(problem.cost(&traj, &alpha).unwrap());
    }
    let last_change = (costs[3] - costs[2]).abs();
    assert!(
        last_change < 1e-8,
        "quadrature not settled: {costs:?} (change {last_change:.2e})"
    );
    assert!((costs[3] - 1.5).abs() < 1e-6, "analytic value 0.5 + 1 = 1.5");
}

#[test]
fn quadratic_coupling_value_pinned_against_quadrature() {
    // V(x,t,z) = z^2 composes the quadrature-verified mollified density
    let mut cfg = builtin("grushin-sin-coupled").unwrap();
    cfg.coupling.v = Expr::parse("z^2").unwrap();
    let support = BoxDomain::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
    let m = sample_initial(&M0Spec::Uniform { support }, 4096, 13).unwrap();
    let z = mfg_core::coupling::mollified_density(&m, &cfg.coupling.rho(), &[0.0, 0.0]);
    let v = eval_f(&cfg.coupling, &[0.0, 0.0], 0.3, &m);
    assert!((v - z * z).abs() < 1e-15);
    // the density itself is pinned near the uniform value 1/4
    assert!((z - 0.25).abs() < 5.0 / (m.len() as f64).sqrt() + 0.02, "z = {z}");
}

#[test]
fn equilibrium_is_seed_robust_at_monte_carlo_scale() {
    let mut gaps = Vec::new();
    let mut solutions = Vec::new();
    for seed in [42u64, 1042] {
        let mut cfg = builtin("grushin-sin-coupled").unwrap();
        cfg.numerics.dx = 1.0 / 8.0;
        cfg.numerics.particles = 512;
        cfg.numerics.snapshots = 9;
        cfg.numerics.seed = seed;
        let rt = ScenarioRuntime::new(cfg).unwrap();
        let sol = picard_solve(&rt).unwrap();
        assert!(sol.converged);
        solutions.push(sol);
    }
    let (a, b) = (&solutions[0], &solutions[1]);
    for (ma, mb) in a.flow_snapshots.iter().zip(&b.flow_snapshots) {
        // clouds from different seeds: compare as measures
        let mut mb2: ParticleMeasure = mb.clone();
        mb2.provenance = ma.provenance.clone();
        gaps.push(d1_distance(ma, &mb2, 512).unwrap().value);
    }
    let sup = gaps.iter().copied().fold(0.0f64, f64::max);
    let mc = (512f64).powf(-0.5);
    assert!(
        sup < 4.0 * mc,
        "seed-to-seed equilibrium gap {sup:.4} exceeds the Monte Carlo scale {mc:.4}"
    );
}
