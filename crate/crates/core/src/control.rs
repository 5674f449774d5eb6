//! The optimal-control layer: controlled dynamics x' = alpha B^T(x), cost
//! evaluation, the Pontryagin two-point boundary-value system solved by
//! multistart shooting, a brute-force direct-minimization oracle, the
//! feedback (characteristic) flow, and the uniqueness / concatenation probes.

use crate::bfield::BField;
use crate::error::{MfgError, Result};
use crate::fields::{lipschitz_terminal, RunningCost, TerminalCost};
use crate::grid::MAX_DIM;
use crate::hjb::ValueFunction;
use crate::linalg::{dist, lex_cmp, norm, simpson_uniform, solve_dense};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Interp {
    PiecewiseConstant,
    PiecewiseLinear,
}

/// An open-loop control on a time window.
#[derive(Debug, Clone)]
pub struct ControlPath {
    pub t_start: f64,
    pub t_end: f64,
    /// Strictly increasing sample times inside [t_start, t_end].
    pub knots: Vec<f64>,
    /// Per-knot control vectors.
    pub values: Vec<Vec<f64>>,
    pub interpolation: Interp,
}

impl ControlPath {
    pub fn constant(alpha: Vec<f64>, t_start: f64, t_end: f64) -> ControlPath {
        ControlPath {
            t_start,
            t_end,
            knots: vec![t_start, t_end],
            values: vec![alpha.clone(), alpha],
            interpolation: Interp::PiecewiseConstant,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.len() < 2 || self.knots.len() != self.values.len() {
            return Err(MfgError::Contract(format!(
                "control path needs matching knots/values, got {}/{}",
                self.knots.len(),
                self.values.len()
            )));
        }
        if self.knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MfgError::Contract(
                "control knots must be strictly increasing".into(),
            ));
        }
        if self.knots[0] < self.t_start - 1e-12
            || *self.knots.last().unwrap() > self.t_end + 1e-12
        {
            return Err(MfgError::Contract(
                "control knots must lie inside the window".into(),
            ));
        }
        let d = self.dim();
        if self.values.iter().any(|v| v.len() != d) {
            return Err(MfgError::Contract("control values have mixed dims".into()));
        }
        if !self.l2_squared().is_finite() {
            return Err(MfgError::Contract(
                "control must have finite squared L2 norm".into(),
            ));
        }
        Ok(())
    }

    pub fn eval_into(&self, s: f64, out: &mut [f64]) {
        let n = self.knots.len();
        if s <= self.knots[0] {
            out[..self.dim()].copy_from_slice(&self.values[0]);
            return;
        }
        if s >= self.knots[n - 1] {
            out[..self.dim()].copy_from_slice(&self.values[n - 1]);
            return;
        }
        let mut lo = 0usize;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        match self.interpolation {
            Interp::PiecewiseConstant => out[..self.dim()].copy_from_slice(&self.values[lo]),
            Interp::PiecewiseLinear => {
                let w = (s - self.knots[lo]) / (self.knots[hi] - self.knots[lo]);
                for (k, slot) in out.iter_mut().enumerate().take(self.dim()) {
                    *slot = (1.0 - w) * self.values[lo][k] + w * self.values[hi][k];
                }
            }
        }
    }

    pub fn eval(&self, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(s, &mut out);
        out
    }

    /// Integral of |alpha|^2 over the window (trapezoid on the knot grid for
    /// the linear case, exact for piecewise constant).
    pub fn l2_squared(&self) -> f64 {
        let mut acc = 0.0;
        for w in 0..self.knots.len() - 1 {
            let h = self.knots[w + 1] - self.knots[w];
            let a = self.values[w].iter().map(|v| v * v).sum::<f64>();
            match self.interpolation {
                Interp::PiecewiseConstant => acc += h * a,
                Interp::PiecewiseLinear => {
                    let b = self.values[w + 1].iter().map(|v| v * v).sum::<f64>();
                    acc += 0.5 * h * (a + b);
                }
            }
        }
        acc
    }
}

/// A state trajectory sampled on a time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Joint trajectory / adjoint / control record of one Pontryagin extremal on
/// [t, T]; controls are defined pointwise by alpha(s) = p(s) B(x(s)).
#[derive(Debug, Clone)]
pub struct ExtremalPath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub adjoints: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// |p(T) + grad g(x(T))|.
    pub terminal_defect: f64,
}

impl ExtremalPath {
    pub fn t_start(&self) -> f64 {
        self.times[0]
    }
    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }
    pub fn initial_adjoint(&self) -> &[f64] {
        &self.adjoints[0]
    }
    /// CSV export `s,x1..xd,p1..pd,a1..ad`.
    pub fn to_csv(&self) -> String {
        let d = self.states[0].len();
        let mut header = vec!["s".to_string()];
        for tag in ["x", "p", "a"] {
            for axis in 0..d {
                header.push(format!("{tag}{}", axis + 1));
            }
        }
        let mut out = header.join(",");
        out.push('\n');
        for k in 0..self.times.len() {
            let mut row = vec![self.times[k]];
            row.extend_from_slice(&self.states[k]);
            row.extend_from_slice(&self.adjoints[k]);
            row.extend_from_slice(&self.controls[k]);
            out.push_str(
                &row.iter()
                    .map(|v| crate::csvio::fmt_float(*v))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            out.push('\n');
        }
        out
    }
}

/// All extremals found by multistart shooting, ranked by cost.
#[derive(Debug, Clone)]
pub struct OptimalSet {
    /// Least-cost extremal (ties broken by lexicographic p(t)).
    pub representative: ExtremalPath,
    /// Other distinct converged extremals, by increasing cost.
    pub alternates: Vec<ExtremalPath>,
    /// Cost of the representative.
    pub value: f64,
    /// Converged extremals costing more than the zero-control upper bound
    /// by over `sanity_margin`; stored for diagnostics, never selected.
    pub spurious: Vec<ExtremalPath>,
}

#[derive(Debug, Clone)]
pub struct ShootingConfig {
    /// Defect norm below which a start counts as converged.
    pub bvp_tol: f64,
    /// Multistart initializations (zero + stencil scaled by Lip(g)).
    pub n_starts: usize,
    /// RK4 steps over [t, T].
    pub n_steps: usize,
    pub max_newton_iter: usize,
    /// Converged extremals costing more than the zero-control cost by more
    /// than this margin are flagged spurious.
    pub sanity_margin: f64,
    /// Uniqueness probe tolerance on the sup trajectory distance.
    pub uniq_tol: f64,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        ShootingConfig {
            bvp_tol: 1e-9,
            n_starts: 9,
            n_steps: 200,
            max_newton_iter: 60,
            sanity_margin: 1e-6,
            uniq_tol: 1e-4,
        }
    }
}

/// One control problem instance: dynamics field, costs, horizon.
pub struct ControlProblem<'a> {
    pub field: &'a BField,
    pub f: &'a dyn RunningCost,
    pub g: &'a dyn TerminalCost,
    pub horizon: f64,
}

impl<'a> ControlProblem<'a> {
    pub fn new(
        field: &'a BField,
        f: &'a dyn RunningCost,
        g: &'a dyn TerminalCost,
        horizon: f64,
    ) -> ControlProblem<'a> {
        ControlProblem {
            field,
            f,
            g,
            horizon,
        }
    }

    fn dim(&self) -> usize {
        self.field.dim()
    }

    /// Integrates x' = alpha(s) B^T(x) from (x0, t) to the control's end by
    /// a fixed-step RK4, splitting at control knots so every step sees a
    /// smooth right-hand side. Errors when the state leaves the padded box.
    pub fn integrate_dynamics(
        &self,
        x0: &[f64],
        t: f64,
        alpha: &ControlPath,
        steps: usize,
    ) -> Result<Trajectory> {
        alpha.validate()?;
        if t > alpha.t_end + 1e-12 {
            return Err(MfgError::Contract(format!(
                "start time {t} is past the control window end {}",
                alpha.t_end
            )));
        }
        if !self.field.domain.contains(x0) {
            return Err(MfgError::OutOfDomain { point: x0.to_vec() });
        }
        let d = self.dim();
        let total = alpha.t_end - t;
        let mut segments: Vec<f64> = vec![t];
        for &k in &alpha.knots {
            if k > t + 1e-12 && k < alpha.t_end - 1e-12 {
                segments.push(k);
            }
        }
        segments.push(alpha.t_end);

        let mut times = vec![t];
        let mut states = vec![x0.to_vec()];
        let mut x = [0.0f64; MAX_DIM];
        x[..d].copy_from_slice(x0);
        let mut a = [0.0f64; MAX_DIM];
        if total <= 0.0 {
            return Ok(Trajectory { times, states });
        }
        for w in segments.windows(2) {
            let (s0, s1) = (w[0], w[1]);
            let n = ((steps as f64) * (s1 - s0) / total).ceil().max(1.0) as usize;
            let h = (s1 - s0) / n as f64;
            for step in 0..n {
                let s = s0 + h * step as f64;
                let mut eval_v = |sv: f64, xv: &[f64], out: &mut [f64]| {
                    alpha.eval_into(sv.min(s1 - 1e-13).max(s0), &mut a);
                    let packed = self.field.eval_packed(xv);
                    self.field.dynamics_velocity_packed(&packed, &a[..d], out);
                };
                let mut k1 = [0.0f64; MAX_DIM];
                let mut k2 = [0.0f64; MAX_DIM];
                let mut k3 = [0.0f64; MAX_DIM];
                let mut k4 = [0.0f64; MAX_DIM];
                let mut tmp = [0.0f64; MAX_DIM];
                eval_v(s, &x[..d], &mut k1);
                for i in 0..d {
                    tmp[i] = x[i] + 0.5 * h * k1[i];
                }
                eval_v(s + 0.5 * h, &tmp[..d], &mut k2);
                for i in 0..d {
                    tmp[i] = x[i] + 0.5 * h * k2[i];
                }
                eval_v(s + 0.5 * h, &tmp[..d], &mut k3);
                for i in 0..d {
                    tmp[i] = x[i] + h * k3[i];
                }
                eval_v(s + h, &tmp[..d], &mut k4);
                for i in 0..d {
                    x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                let s_next = s + h;
                if !self.field.domain.contains(&x[..d]) {
                    return Err(MfgError::Excursion {
                        exit_time: s_next,
                        particle: None,
                    });
                }
                times.push(s_next);
                states.push(x[..d].to_vec());
            }
        }
        Ok(Trajectory { times, states })
    }

    /// Composite-Simpson cost of (trajectory, control): integral of
    /// |alpha|^2/2 + f along the samples plus g at the final state.
    pub fn cost(&self, traj: &Trajectory, alpha: &ControlPath) -> Result<f64> {
        if (traj.times[0] - alpha.t_start).abs() > 1e-9
            || (traj.times.last().unwrap() - alpha.t_end).abs() > 1e-9
        {
            return Err(MfgError::Contract(format!(
                "trajectory window [{}, {}] does not match control window [{}, {}]",
                traj.times[0],
                traj.times.last().unwrap(),
                alpha.t_start,
                alpha.t_end
            )));
        }
        let mut a = vec![0.0; self.dim()];
        let integrand: Vec<f64> = traj
            .times
            .iter()
            .zip(&traj.states)
            .map(|(&s, x)| {
                alpha.eval_into(s, &mut a);
                0.5 * a.iter().map(|v| v * v).sum::<f64>() + self.f.value(x, s)
            })
            .collect();
        let h = uniform_step(&traj.times)?;
        Ok(simpson_uniform(&integrand, h) + self.g.value(traj.final_state()))
    }

    /// Right-hand side of the Pontryagin system:
    /// x' = p B B^T, p' = -1/2 D_x|pB|^2 + D_x f; the last adjoint equation
    /// never involves B (triangular structure).
    pub fn pontryagin_rhs(&self, s: f64, x: &[f64], p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut xdot = vec![0.0; d];
        let mut pdot = vec![0.0; d];
        let mut q = vec![0.0; d];
        self.field.dp_hamiltonian_into(x, p, &mut xdot, &mut q);
        self.field.dx_hamiltonian_into(x, p, &mut pdot, &mut q);
        let mut fgrad = vec![0.0; d];
        self.f.grad_x(x, s, &mut fgrad);
        for i in 0..d {
            pdot[i] = -pdot[i] + fgrad[i];
        }
        (xdot, pdot)
    }

    #[inline]
    fn pontryagin_rhs_into(&self, s: f64, y: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let (x, p) = y.split_at(d);
        let mut q = [0.0f64; MAX_DIM];
        let mut fgrad = [0.0f64; MAX_DIM];
        let (xdot, pdot) = out.split_at_mut(d);
        self.field.dp_hamiltonian_into(x, p, xdot, &mut q[..d]);
        self.field.dx_hamiltonian_into(x, p, pdot, &mut q[..d]);
        self.f.grad_x(x, s, &mut fgrad[..d]);
        for i in 0..d {
            pdot[i] = -pdot[i] + fgrad[i];
        }
    }

    /// Forward RK4 integration of the Pontryagin system from (x0, p0) at t.
    /// Returns None if the state leaves the padded box or becomes non-finite.
    fn shoot(
        &self,
        x0: &[f64],
        t: f64,
        p0: &[f64],
        n_steps: usize,
        record: bool,
    ) -> Option<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let d = self.dim();
        let h = (self.horizon - t) / n_steps as f64;
        let mut y = [0.0f64; 2 * MAX_DIM];
        y[..d].copy_from_slice(x0);
        y[d..2 * d].copy_from_slice(p0);
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut adjoints = Vec::new();
        if record {
            times.reserve(n_steps + 1);
            states.reserve(n_steps + 1);
            adjoints.reserve(n_steps + 1);
            times.push(t);
            states.push(y[..d].to_vec());
            adjoints.push(y[d..2 * d].to_vec());
        }
        let mut k1 = [0.0f64; 2 * MAX_DIM];
        let mut k2 = [0.0f64; 2 * MAX_DIM];
        let mut k3 = [0.0f64; 2 * MAX_DIM];
        let mut k4 = [0.0f64; 2 * MAX_DIM];
        let mut tmp = [0.0f64; 2 * MAX_DIM];
        for step in 0..n_steps {
            let s = t + h * step as f64;
            self.pontryagin_rhs_into(s, &y[..2 * d], &mut k1[..2 * d]);
            for i in 0..2 * d {
                tmp[i] = y[i] + 0.5 * h * k1[i];
            }
            self.pontryagin_rhs_into(s + 0.5 * h, &tmp[..2 * d], &mut k2[..2 * d]);
            for i in 0..2 * d {
                tmp[i] = y[i] + 0.5 * h * k2[i];
            }
            self.pontryagin_rhs_into(s + 0.5 * h, &tmp[..2 * d], &mut k3[..2 * d]);
            for i in 0..2 * d {
                tmp[i] = y[i] + h * k3[i];
            }
            self.pontryagin_rhs_into(s + h, &tmp[..2 * d], &mut k4[..2 * d]);
            for i in 0..2 * d {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if y[..2 * d].iter().any(|v| !v.is_finite())
                || !self.field.domain.contains(&y[..d])
            {
                return None;
            }
            if record {
                times.push(t + h * (step + 1) as f64);
                states.push(y[..d].to_vec());
                adjoints.push(y[d..2 * d].to_vec());
            }
        }
        if !record {
            times.push(self.horizon);
            states.push(y[..d].to_vec());
            adjoints.push(y[d..2 * d].to_vec());
        }
        Some((times, states, adjoints))
    }

    /// Shooting defect p(T) + grad g(x(T)) for an initial adjoint guess.
    fn defect(&self, x0: &[f64], t: f64, p0: &[f64], n_steps: usize) -> Option<Vec<f64>> {
        let d = self.dim();
        let (_, states, adjoints) = self.shoot(x0, t, p0, n_steps, false)?;
        let x_end = states.last().unwrap();
        let p_end = adjoints.last().unwrap();
        let mut grad = vec![0.0; d];
        self.g.grad(x_end, &mut grad);
        Some((0..d).map(|i| p_end[i] + grad[i]).collect())
    }

    fn multistart_guesses(&self, n_starts: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        let lip = lipschitz_terminal(self.g, &self.field.domain).max(0.25);
        let mut guesses = vec![vec![0.0; d]];
        for axis in 0..d {
            for sign in [1.0, -1.0] {
                let mut p = vec![0.0; d];
                p[axis] = sign * lip;
                guesses.push(p);
            }
        }
        for corner in 0..(1usize << d) {
            let p: Vec<f64> = (0..d)
                .map(|axis| {
                    if corner >> axis & 1 == 1 {
                        lip
                    } else {
                        -lip
                    }
                })
                .collect();
            guesses.push(p);
        }
        guesses.truncate(n_starts.max(1));
        guesses
    }

    fn newton_solve(
        &self,
        x0: &[f64],
        t: f64,
        p_init: &[f64],
        cfg: &ShootingConfig,
    ) -> (Option<Vec<f64>>, f64) {
        let d = self.dim();
        let mut p = p_init.to_vec();
        let Some(mut defect) = self.defect(x0, t, &p, cfg.n_steps) else {
            return (None, f64::INFINITY);
        };
        let mut best = norm(&defect);
        for _ in 0..cfg.max_newton_iter {
            if best < cfg.bvp_tol {
                return (Some(p), best);
            }
            // finite-difference Jacobian of the defect map
            let mut jac = vec![0.0; d * d];
            let mut ok = true;
            for j in 0..d {
                let hj = 1e-7 * (1.0 + p[j].abs());
                let mut pj = p.clone();
                pj[j] += hj;
                match self.defect(x0, t, &pj, cfg.n_steps) {
                    Some(dj) => {
                        for i in 0..d {
                            jac[i * d + j] = (dj[i] - defect[i]) / hj;
                        }
                    }
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                break;
            }
            let rhs: Vec<f64> = defect.iter().map(|v| -v).collect();
            let Some(step) = solve_dense(&jac, &rhs, d) else {
                break;
            };
            // damped update with backtracking on the defect norm
            let mut lambda = 1.0;
            let mut accepted = false;
            while lambda >= 1.0 / 1024.0 {
                let cand: Vec<f64> = (0..d).map(|i| p[i] + lambda * step[i]).collect();
                if let Some(dn) = self.defect(x0, t, &cand, cfg.n_steps) {
                    let nn = norm(&dn);
                    if nn < best * (1.0 - 0.25 * lambda) || nn < cfg.bvp_tol {
                        p = cand;
                        defect = dn;
                        best = nn;
                        accepted = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if best < cfg.bvp_tol {
            (Some(p), best)
        } else {
            (None, best)
        }
    }

    fn build_extremal(&self, x0: &[f64], t: f64, p0: &[f64], n_steps: usize) -> ExtremalPath {
        let d = self.dim();
        let (times, states, adjoints) = self
            .shoot(x0, t, p0, n_steps, true)
            .expect("a converged start must re-integrate");
        let controls: Vec<Vec<f64>> = states
            .iter()
            .zip(&adjoints)
            .map(|(x, p)| self.field.left_mul(x, p))
            .collect();
        let mut grad = vec![0.0; d];
        self.g.grad(states.last().unwrap(), &mut grad);
        let p_end = adjoints.last().unwrap();
        let defect = norm(&(0..d).map(|i| p_end[i] + grad[i]).collect::<Vec<_>>());
        ExtremalPath {
            times,
            states,
            adjoints,
            controls,
            terminal_defect: defect,
        }
    }

    /// Cost of an extremal from its stored samples (Simpson quadrature).
    pub fn extremal_cost(&self, ext: &ExtremalPath) -> f64 {
        let integrand: Vec<f64> = ext
            .times
            .iter()
            .zip(ext.states.iter().zip(&ext.controls))
            .map(|(&s, (x, a))| 0.5 * a.iter().map(|v| v * v).sum::<f64>() + self.f.value(x, s))
            .collect();
        let h = ext.times[1] - ext.times[0];
        simpson_uniform(&integrand, h) + self.g.value(ext.states.last().unwrap())
    }

    /// Cost of never moving: the universal upper bound for the value.
    pub fn zero_control_cost(&self, x0: &[f64], t: f64, n_steps: usize) -> f64 {
        let h = (self.horizon - t) / n_steps as f64;
        let integrand: Vec<f64> = (0..=n_steps)
            .map(|k| self.f.value(x0, t + h * k as f64))
            .collect();
        simpson_uniform(&integrand, h) + self.g.value(x0)
    }

    /// Multistart shooting for the mixed boundary conditions
    /// x(t) = x0, p(T) = -grad g(x(T)).
    pub fn solve_bvp_shooting(
        &self,
        x0: &[f64],
        t: f64,
        cfg: &ShootingConfig,
    ) -> Result<OptimalSet> {
        if t >= self.horizon {
            return Err(MfgError::Contract(format!(
                "shooting needs t < T, got t={t}, T={}",
                self.horizon
            )));
        }
        let mut converged: Vec<(Vec<f64>, f64)> = Vec::new();
        let mut trace = Vec::new();
        for guess in self.multistart_guesses(cfg.n_starts) {
            let (root, defect) = self.newton_solve(x0, t, &guess, cfg);
            trace.push(defect);
            if let Some(p0) = root {
                let dup = converged
                    .iter()
                    .any(|(q, _)| dist(q, &p0) < 1e-6 * (1.0 + norm(q)));
                if !dup {
                    converged.push((p0, defect));
                }
            }
        }
        if converged.is_empty() {
            let best = trace.iter().copied().fold(f64::INFINITY, f64::min);
            return Err(MfgError::ShootingNonConvergence {
                defect_trace: trace,
                best_defect: best,
            });
        }
        let mut ranked: Vec<(f64, ExtremalPath)> = converged
            .iter()
            .map(|(p0, _)| {
                let ext = self.build_extremal(x0, t, p0, cfg.n_steps);
                (self.extremal_cost(&ext), ext)
            })
            .collect();
        ranked.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| lex_cmp(a.1.initial_adjoint(), b.1.initial_adjoint()))
        });
        let upper = self.zero_control_cost(x0, t, cfg.n_steps);
        let (mut sane, spurious): (Vec<_>, Vec<_>) = ranked
            .into_iter()
            .partition(|(c, _)| *c <= upper + cfg.sanity_margin);
        if sane.is_empty() {
            // every extremal exceeds the zero-control bound; keep the least
            // bad as representative but mark the rest spurious
            sane = spurious.clone();
            return Ok(OptimalSet {
                value: sane[0].0,
                representative: sane.remove(0).1,
                alternates: Vec::new(),
                spurious: spurious.into_iter().map(|(_, e)| e).collect(),
            });
        }
        let value = sane[0].0;
        let representative = sane.remove(0).1;
        Ok(OptimalSet {
            representative,
            alternates: sane.into_iter().map(|(_, e)| e).collect(),
            value,
            spurious: spurious.into_iter().map(|(_, e)| e).collect(),
        })
    }

    /// Residual of the integral form of the adjoint equations: p(s)
    /// recomputed by backward quadrature of the adjoint drift along the
    /// stored samples, compared with the stored p(s). Max norm over samples.
    pub fn integral_form_residual(&self, ext: &ExtremalPath) -> f64 {
        let n = ext.times.len();
        let d = self.dim();
        let h = ext.times[1] - ext.times[0];
        let mut grad = vec![0.0; d];
        self.g.grad(ext.states.last().unwrap(), &mut grad);
        let p_end: Vec<f64> = grad.iter().map(|v| -v).collect();
        // adjoint drift at every stored sample
        let drifts: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                let (_, pdot) =
                    self.pontryagin_rhs(ext.times[k], &ext.states[k], &ext.adjoints[k]);
                pdot
            })
            .collect();
        let mut worst = 0.0f64;
        for k in 0..n {
            for axis in 0..d {
                let tail: Vec<f64> = (k..n).map(|j| drifts[j][axis]).collect();
                let integral = simpson_uniform(&tail, h);
                let recomputed = p_end[axis] - integral;
                worst = worst.max((recomputed - ext.adjoints[k][axis]).abs());
            }
        }
        worst
    }

    /// Exhaustive-descent minimization over piecewise-constant controls on
    /// `n_steps` uniform intervals; the independent oracle for the shooting
    /// solver and the HJB scheme. Test scale only (n_steps <= 10).
    pub fn direct_minimize_oracle(
        &self,
        x0: &[f64],
        t: f64,
        n_steps: usize,
        grid: &OracleGrid,
    ) -> Result<(ControlPath, f64)> {
        if n_steps == 0 || n_steps > 10 {
            return Err(MfgError::Contract(format!(
                "oracle is test-scale only: n_steps must be in 1..=10, got {n_steps}"
            )));
        }
        if t >= self.horizon {
            return Err(MfgError::Contract("oracle needs t < T".into()));
        }
        let d = self.dim();
        let substeps = grid.substeps_per_interval.max(2);

        let evaluate = |alphas: &[Vec<f64>]| -> f64 {
            self.eval_piecewise_cost(x0, t, alphas, substeps)
                .unwrap_or(f64::INFINITY)
        };

        let mut starts: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; d]; n_steps]];
        for axis in 0..d {
            for sign in [1.0, -1.0] {
                let mut a = vec![vec![0.0; d]; n_steps];
                for interval in a.iter_mut() {
                    interval[axis] = sign * 0.5 * grid.radius;
                }
                starts.push(a);
            }
        }

        let mut best_alphas: Option<Vec<Vec<f64>>> = None;
        let mut best_cost = f64::INFINITY;
        for start in starts {
            let mut alphas = start;
            let mut cost = evaluate(&alphas);
            let mut spacing = grid.radius / ((grid.values_per_axis.max(3) - 1) / 2) as f64;
            // descent on the coarse lattice, then shrinking local lattices
            for level in 0..=grid.refine_levels {
                let candidates: Vec<f64> = if level == 0 {
                    lattice_1d(0.0, grid.radius, grid.values_per_axis)
                } else {
                    spacing *= 0.5;
                    lattice_1d(0.0, 2.0 * spacing, grid.values_per_axis)
                };
                for _sweep in 0..grid.max_sweeps {
                    let mut improved = false;
                    for interval in 0..n_steps {
                        for axis in 0..d {
                            let current = alphas[interval][axis];
                            let mut local_best = cost;
                            let mut local_val = current;
                            for &cand in &candidates {
                                let v = if level == 0 { cand } else { current + cand };
                                if (v - current).abs() < 1e-15 {
                                    continue;
                                }
                                alphas[interval][axis] = v;
                                let c = evaluate(&alphas);
                                if c < local_best - 1e-15 {
                                    local_best = c;
                                    local_val = v;
                                }
                            }
                            alphas[interval][axis] = local_val;
                            if local_best < cost - 1e-15 {
                                cost = local_best;
                                improved = true;
                            }
                        }
                    }
                    if !improved {
                        break;
                    }
                }
            }
            if cost < best_cost {
                best_cost = cost;
                best_alphas = Some(alphas);
            }
        }

        let alphas = best_alphas.expect("at least the zero start is evaluated");
        let h = (self.horizon - t) / n_steps as f64;
        let mut knots: Vec<f64> = (0..=n_steps).map(|k| t + h * k as f64).collect();
        *knots.last_mut().unwrap() = self.horizon;
        let mut values = alphas;
        values.push(values.last().unwrap().clone());
        let path = ControlPath {
            t_start: t,
            t_end: self.horizon,
            knots,
            values,
            interpolation: Interp::PiecewiseConstant,
        };
        Ok((path, best_cost))
    }

    /// RK4 with the running cost integrated as an augmented state; None when
    /// the candidate drives the state out of the padded box.
    fn eval_piecewise_cost(
        &self,
        x0: &[f64],
        t: f64,
        alphas: &[Vec<f64>],
        substeps: usize,
    ) -> Option<f64> {
        let d = self.dim();
        let n_steps = alphas.len();
        let h_int = (self.horizon - t) / n_steps as f64;
        let h = h_int / substeps as f64;
        let mut x = [0.0f64; MAX_DIM];
        x[..d].copy_from_slice(x0);
        let mut cost = 0.0;
        let mut packed = [0.0f64; MAX_DIM * (MAX_DIM + 1) / 2];
        let plen = self.field.packed_len();
        for (interval, a) in alphas.iter().enumerate() {
            let s0 = t + h_int * interval as f64;
            let half_a2 = 0.5 * a.iter().map(|v| v * v).sum::<f64>();
            for step in 0..substeps {
                let s = s0 + h * step as f64;
                let mut k = [[0.0f64; MAX_DIM + 1]; 4];
                let mut tmp = [0.0f64; MAX_DIM];
                // stage evaluations of (x' = a B^T(x), c' = |a|^2/2 + f(x,s))
                for (stage, (ds, source)) in [
                    (0.0, None),
                    (0.5, Some(0usize)),
                    (0.5, Some(1)),
                    (1.0, Some(2)),
                ]
                .into_iter()
                .enumerate()
                {
                    match source {
                        None => tmp[..d].copy_from_slice(&x[..d]),
                        Some(src) => {
                            let w = if stage == 3 { h } else { 0.5 * h };
                            for i in 0..d {
                                tmp[i] = x[i] + w * k[src][i];
                            }
                        }
                    }
                    self.field.eval_packed_into(&tmp[..d], &mut packed[..plen]);
                    let (kx, rest) = k[stage].split_at_mut(d);
                    self.field.dynamics_velocity_packed(&packed[..plen], a, kx);
                    rest[0] = half_a2 + self.f.value(&tmp[..d], s + ds * h);
                }
                for i in 0..d {
                    x[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
                }
                cost += h / 6.0 * (k[0][d] + 2.0 * k[1][d] + 2.0 * k[2][d] + k[3][d]);
                if !self.field.domain.contains(&x[..d]) || !cost.is_finite() {
                    return None;
                }
            }
        }
        Some(cost + self.g.value(&x[..d]))
    }

    /// Re-solves the boundary-value problem from a point of an extremal and
    /// reports how far the restarted trajectories stray from the original —
    /// the numerical probe of uniqueness after the starting time. When a
    /// value function is supplied, also checks D_B u(x(s), s) = -alpha(s)
    /// strictly inside (s, T).
    pub fn uniqueness_probe(
        &self,
        ext: &ExtremalPath,
        s: f64,
        cfg: &ShootingConfig,
        u: Option<&ValueFunction>,
    ) -> Result<UniquenessReport> {
        let t0 = ext.t_start();
        let t1 = ext.t_end();
        let h = ext.times[1] - ext.times[0];
        let k = ((s - t0) / h).round() as i64;
        if k <= 0 || k as usize >= ext.times.len() - 1 {
            return Ok(UniquenessReport::not_applicable(s));
        }
        let k = k as usize;
        let s_snapped = ext.times[k];
        let x_s = ext.states[k].clone();
        let steps_tail = ext.times.len() - 1 - k;
        let tail_cfg = ShootingConfig {
            n_steps: steps_tail,
            ..cfg.clone()
        };
        let restarted = self.solve_bvp_shooting(&x_s, s_snapped, &tail_cfg)?;

        let mut sup_dist = 0.0f64;
        let mut count = 0usize;
        for cand in std::iter::once(&restarted.representative).chain(&restarted.alternates) {
            count += 1;
            for (j, state) in cand.states.iter().enumerate() {
                sup_dist = sup_dist.max(dist(state, &ext.states[k + j]));
            }
        }

        let db_u_plus_alpha_sup = match u {
            None => None,
            Some(u) => {
                let mut worst = 0.0f64;
                for j in (k + 1)..(ext.times.len() - 1) {
                    let (bg, _) = u.numeric_b_gradient(self.field, &ext.states[j], ext.times[j])?;
                    let diff: Vec<f64> = bg
                        .components
                        .iter()
                        .zip(&ext.controls[j])
                        .map(|(g, a)| g + a)
                        .collect();
                    worst = worst.max(norm(&diff));
                }
                Some(worst)
            }
        };
        let _ = t1;
        Ok(UniquenessReport {
            applicable: true,
            s: s_snapped,
            restarts_converged: count,
            sup_trajectory_distance: sup_dist,
            within_tol: sup_dist < cfg.uniq_tol,
            db_u_plus_alpha_sup,
        })
    }

    /// Dynamic-programming residual along an extremal:
    /// |cost(t,T) - (running cost on [t,s] + value re-solved from (x(s),s))|.
    pub fn concatenation_check(
        &self,
        ext: &ExtremalPath,
        s: f64,
        cfg: &ShootingConfig,
    ) -> Result<f64> {
        let t0 = ext.t_start();
        let h = ext.times[1] - ext.times[0];
        let k = ((s - t0) / h).round() as i64;
        if k <= 0 || k as usize > ext.times.len() - 1 {
            return Err(MfgError::Contract(format!(
                "concatenation check needs t < s <= T, got s={s}"
            )));
        }
        let k = k as usize;
        let full = self.extremal_cost(ext);
        let head: Vec<f64> = (0..=k)
            .map(|j| {
                0.5 * ext.controls[j].iter().map(|v| v * v).sum::<f64>()
                    + self.f.value(&ext.states[j], ext.times[j])
            })
            .collect();
        let running = simpson_uniform(&head, h);
        let value_tail = if k == ext.times.len() - 1 {
            self.g.value(&ext.states[k])
        } else {
            let tail_cfg = ShootingConfig {
                n_steps: ext.times.len() - 1 - k,
                ..cfg.clone()
            };
            self.solve_bvp_shooting(&ext.states[k], ext.times[k], &tail_cfg)?
                .value
        };
        Ok((full - (running + value_tail)).abs())
    }
}

/// Oracle search lattice.
#[derive(Debug, Clone)]
pub struct OracleGrid {
    /// Per-axis candidate range [-radius, radius].
    pub radius: f64,
    /// Coarse candidates per axis (odd recommended).
    pub values_per_axis: usize,
    /// Shrinking local-refinement levels after the coarse sweep.
    pub refine_levels: usize,
    pub max_sweeps: usize,
    /// RK4 substeps per control interval.
    pub substeps_per_interval: usize,
}

impl Default for OracleGrid {
    fn default() -> Self {
        OracleGrid {
            radius: 3.0,
            values_per_axis: 9,
            refine_levels: 6,
            max_sweeps: 8,
            substeps_per_interval: 8,
        }
    }
}

fn lattice_1d(center: f64, radius: f64, points: usize) -> Vec<f64> {
    if points <= 1 || radius == 0.0 {
        return vec![center];
    }
    (0..points)
        .map(|i| center - radius + 2.0 * radius * i as f64 / (points - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct UniquenessReport {
    /// False when s is not strictly inside (t, T): the uniqueness claim
    /// only covers times after the start.
    pub applicable: bool,
    pub s: f64,
    pub restarts_converged: usize,
    /// sup over restarted extremals and samples of |x_restart - x_original|.
    pub sup_trajectory_distance: f64,
    pub within_tol: bool,
    /// sup over interior samples of |D_B u(x(s), s) + alpha(s)|, when a
    /// value function was supplied.
    pub db_u_plus_alpha_sup: Option<f64>,
}

impl UniquenessReport {
    fn not_applicable(s: f64) -> UniquenessReport {
        UniquenessReport {
            applicable: false,
            s,
            restarts_converged: 0,
            sup_trajectory_distance: 0.0,
            within_tol: true,
            db_u_plus_alpha_sup: None,
        }
    }
}

/// Integrates the characteristic flow x' = -D_x u(x,s) B(x) B^T(x) between
/// two times, sampling on the value function's time grid refined by
/// `substeps` RK4 steps per layer.
pub fn feedback_flow(
    x0: &[f64],
    u: &ValueFunction,
    field: &BField,
    t_from: f64,
    t_to: f64,
    substeps: usize,
) -> Result<Trajectory> {
    if t_to < t_from - 1e-12 {
        return Err(MfgError::Contract(format!(
            "feedback flow needs t_from <= t_to, got {t_from} > {t_to}"
        )));
    }
    let d = field.dim();
    let span = t_to - t_from;
    let mut times = vec![t_from];
    let mut states = vec![x0.to_vec()];
    if span <= 0.0 {
        return Ok(Trajectory { times, states });
    }
    let layers = (span / u.dt).ceil().max(1.0) as usize;
    let n = layers * substeps.max(1);
    let h = span / n as f64;
    let mut x = x0.to_vec();
    let velocity = |xv: &[f64], s: f64| -> Result<Vec<f64>> {
        let mut clamped = xv.to_vec();
        u.grid.domain.clamp(&mut clamped);
        u.b_velocity(field, &clamped, s.min(u.horizon()).max(0.0))
    };
    for step in 0..n {
        let s = t_from + h * step as f64;
        let k1 = velocity(&x, s)?;
        let mut tmp: Vec<f64> = (0..d).map(|i| x[i] + 0.5 * h * k1[i]).collect();
        let k2 = velocity(&tmp, s + 0.5 * h)?;
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        let k3 = velocity(&tmp, s + 0.5 * h)?;
        for i in 0..d {
            tmp[i] = x[i] + h * k3[i];
        }
        let k4 = velocity(&tmp, s + h)?;
        for i in 0..d {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let s_next = t_from + h * (step + 1) as f64;
        if !field.domain.contains(&x) {
            return Err(MfgError::Excursion {
                exit_time: s_next,
                particle: None,
            });
        }
        times.push(s_next);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

fn uniform_step(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Ok(0.0);
    }
    let h = times[1] - times[0];
    for w in times.windows(2) {
        if ((w[1] - w[0]) - h).abs() > 1e-9 * (1.0 + h.abs()) {
            return Err(MfgError::Contract(
                "quadrature requires a uniform sample grid".into(),
            ));
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::fields::{ExprCost, ZeroCost};
    use crate::grid::BoxDomain;

    fn dom(r: f64, d: usize) -> BoxDomain {
        BoxDomain::new(vec![-r; d], vec![r; d]).unwrap()
    }

    fn identity2(r: f64) -> BField {
        BField::identity(2, dom(r, 2)).unwrap()
    }

    fn grushin_sin(r: f64) -> BField {
        BField::grushin(Expr::parse("sin(x1)").unwrap(), dom(r, 2)).unwrap()
    }

    #[test]
    fn zero_control_freezes_state() {
        let field = grushin_sin(4.0);
        let problem = ControlProblem::new(&field, &ZeroCost, &ZeroCost, 1.0);
        let alpha = ControlPath::constant(vec![0.0, 0.0], 0.0, 1.0);
        let traj = problem
            .integrate_dynamics(&[0.3, -0.7], 0.0, &alpha, 50)
            .unwrap();
        for s in &traj.states {
            assert_eq!(s, &vec![0.3, -0.7]);
        }
    }

    #[test]
    fn unit_control_moves_straight_for_identity() {
        let field = identity2(4.0);
        let problem = ControlProblem::new(&field, &ZeroCost, &ZeroCost, 1.0);
        let alpha = ControlPath::constant(vec![1.0, 0.0], 0.0, 1.0);
        let traj = problem
            .integrate_dynamics(&[0.0, 0.0], 0.0, &alpha, 64)
            .unwrap();
        let end = traj.final_state();
        assert!((end[0] - 1.0).abs() < 1e-12 && end[1].abs() < 1e-14);
    }

    #[test]
    fn forbidden_direction_is_exactly_frozen() {
        let field = grushin_sin(4.0);
        let problem = ControlProblem::new(&field, &ZeroCost, &ZeroCost, 1.0);
        let alpha = ControlPath::constant(vec![0.0, 1.0], 0.0, 1.0);
        let traj = problem
            .integrate_dynamics(&[0.0, 0.0], 0.0, &alpha, 100)
            .unwrap();
        for s in &traj.states {
            assert!(s[0].abs() <= 1e-12 && s[1].abs() <= 1e-12);
        }
    }

    #[test]
    fn excursion_reports_exit_time() {
        let field = identity2(1.0);
        let problem = ControlProblem::new(&field, &ZeroCost, &ZeroCost, 1.0);
        let alpha = ControlPath::constant(vec![4.0, 0.0], 0.0, 1.0);
        match problem.integrate_dynamics(&[0.5, 0.0], 0.0, &alpha, 100) {
            Err(MfgError::Excursion { exit_time, .. }) => {
                assert!((exit_time - 0.125).abs() < 0.05, "exit near x=1: {exit_time}")
            }
            other => panic!("expected excursion, got {other:?}"),
        }
    }

    #[test]
    fn cost_of_pure_control_energy() {
        let field = identity2(4.0);
        let problem = ControlProblem::new(&field, &ZeroCost, &ZeroCost, 1.0);
        let alpha = ControlPath::constant(vec![1.0, 0.0], 0.0, 1.0);
        let traj = problem
            .integrate_dynamics(&[0.0, 0.0], 0.0, &alpha, 64)
            .unwrap();
        let c = problem.cost(&traj, &alpha).unwrap();
        assert!((c - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cost_zero_control_is_terminal_value() {
        let field = identity2(4.0);
        let g = ExprCost::parse("x1^2+3", 2).unwrap();
        let problem = ControlProblem::new(&field, &ZeroCost, &g, 1.0);
        let alpha = ControlPath::constant(vec![0.0, 0.0], 0.0, 1.0);
        let traj = problem
            .integrate_dynamics(&[2.0, 0.0], 0.0, &alpha, 16)
            .unwrap();
        let c = problem.cost(&traj, &alpha).unwrap();
        assert!((c - 7.0).abs() < 1e-12);
    }

    #[test]
    fn cost_rejects_mismatched_windows() {
        let field = identity2(4.0);
        let problem = ControlProblem::new(&field, &ZeroCost, &ZeroCost, 1.0);
        let alpha = ControlPath::constant(vec![0.0, 0.0], 0.0, 1.0);
        let traj = problem
            .integrate_dynamics(&[0.0, 0.0], 0.5, &alpha, 16)
            .unwrap();
        assert!(matches!(
            problem.cost(&traj, &alpha),
            Err(MfgError::Contract(_))
        ));
    }

    #[test]
    fn pontryagin_rhs_matches_hand_computation() {
        // Grushin h = sin: x' = (p1, h^2 p2), p' = (-p2^2 h' h + f_x1, f_x2).
        let field = grushin_sin(4.0);
        let problem = ControlProblem::new(&field, &ZeroCost, &ZeroCost, 1.0);
        let (xdot, pdot) = problem.pontryagin_rhs(0.0, &[std::f64::consts::FRAC_PI_6, 0.0], &[0.0, 2.0]);
        assert!(xdot[0].abs() < 1e-15);
        assert!((xdot[1] - 0.5).abs() < 1e-15, "h^2 p2 = 1/4 * 2");
        assert!((pdot[0] + 3.0f64.sqrt()).abs() < 1e-14, "-p2^2 h' h = -4 cos sin");
        assert!(pdot[1].abs() < 1e-15);

        // identity: x' = p, p' = 0
        let idf = identity2(4.0);
        let p2 = ControlProblem::new(&idf, &ZeroCost, &ZeroCost, 1.0);
        let (xdot, pdot) = p2.pontryagin_rhs(0.3, &[0.4, -0.2], &[1.5, -2.5]);
        assert_eq!(xdot, vec![1.5, -2.5]);
        assert_eq!(pdot, vec![0.0, 0.0]);

        // running cost drives the adjoint
        let f = ExprCost::parse("x1", 2).unwrap();
        let p3 = ControlProblem::new(&field, &f, &ZeroCost, 1.0);
        let (xdot, pdot) = p3.pontryagin_rhs(0.0, &[0.9, 0.1], &[0.0, 0.0]);
        assert_eq!(xdot, vec![0.0, 0.0]);
        assert!((pdot[0] - 1.0).abs() < 1e-15 && pdot[1].abs() < 1e-15);
    }

    #[test]
    fn shooting_flat_data_returns_zero_extremal() {
        let field = grushin_sin(4.0);
        let g = ExprCost::parse("2", 2).unwrap();
        let problem = ControlProblem::new(&field, &ZeroCost, &g, 1.0);
        let set = problem
            .solve_bvp_shooting(&[0.4, -0.3], 0.0, &ShootingConfig::default())
            .unwrap();
        assert!((set.value - 2.0).abs() < 1e-10);
        for p in &set.representative.adjoints {
            assert!(norm(p) < 1e-10);
        }
        for x in &set.representative.states {
            assert!(dist(x, &[0.4, -0.3]) < 1e-10);
        }
    }

    #[test]
    fn shooting_linear_terminal_matches_analytic() {
        // g = c . x inside the box (plateau cutoff far away), f = 0, B = I:
        // p = -c constant, x(s) = x0 - c s, cost = |c|^2 T / 2 + g(x(T)).
        let field = identity2(6.0);
        let g = ExprCost::parse("(0.3*x1-0.2*x2)*step5((x1^2+x2^2-16)/20)", 2).unwrap();
        let problem = ControlProblem::new(&field, &ZeroCost, &g, 1.0);
        let x0 = [0.25, -0.5];
        let set = problem
            .solve_bvp_shooting(&x0, 0.0, &ShootingConfig::default())
            .unwrap();
        let c = [0.3, -0.2];
        let rep = &set.representative;
        assert!(rep.terminal_defect < 1e-9);
        for (k, p) in rep.adjoints.iter().enumerate() {
            assert!(
                (p[0] + c[0]).abs() < 1e-8 && (p[1] + c[1]).abs() < 1e-8,
                "sample {k}: adjoint {p:?}"
            );
        }
        let x_end = rep.states.last().unwrap();
        assert!((x_end[0] - (x0[0] - 0.3)).abs() < 1e-8);
        assert!((x_end[1] - (x0[1] + 0.2)).abs() < 1e-8);
        let expected = 0.5 * (0.09 + 0.04) + (0.3 * x_end[0] - 0.2 * x_end[1]);
        assert!((set.value - expected).abs() < 1e-8, "{} vs {expected}", set.value);
        // alpha = p B structurally
        for (a, p) in rep.controls.iter().zip(&rep.adjoints) {
            assert_eq!(a, p, "identity field: alpha = p exactly");
        }
    }

    #[test]
    fn shooting_beats_or_matches_oracle_on_lq() {
        let field = identity2(6.0);
        let g = ExprCost::parse("0.5*(x1^2+x2^2)*step5((x1^2+x2^2-16)/20)", 2).unwrap();
        let problem = ControlProblem::new(&field, &ZeroCost, &g, 1.0);
        let x0 = [0.8, -0.6];
        let set = problem
            .solve_bvp_shooting(&x0, 0.0, &ShootingConfig::default())
            .unwrap();
        let (_, oracle_cost) = problem
            .direct_minimize_oracle(&x0, 0.0, 8, &OracleGrid::default())
            .unwrap();
        // Hopf-Lax closed form: |x0|^2 / (2 (1 + T))
        let exact = (x0[0] * x0[0] + x0[1] * x0[1]) / 4.0;
        assert!((set.value - exact).abs() < 1e-6, "shooting {} vs {exact}", set.value);
        assert!(set.value <= oracle_cost + 1e-3);
        assert!((oracle_cost - exact).abs() < 5e-3, "oracle {oracle_cost} vs {exact}");
    }

    #[test]
    fn integral_form_consistency_on_grushin() {
        let field = grushin_sin(6.0);
        let f = ExprCost::parse("0.2*cos(x2)", 2).unwrap();
        let g = ExprCost::parse("0.3*(x1^2+x2^2)*step5((x1^2+x2^2-16)/20)", 2).unwrap();
        let problem = ControlProblem::new(&field, &f, &g, 1.0);
        let set = problem
            .solve_bvp_shooting(&[0.6, 0.4], 0.0, &ShootingConfig::default())
            .unwrap();
        let residual = problem.integral_form_residual(&set.representative);
        assert!(residual < 1e-8, "integral-form residual {residual}");
    }

    #[test]
    fn rk4_order_between_12_and_20() {
        let field = grushin_sin(6.0);
        let problem = ControlProblem::new(&field, &ZeroCost, &ZeroCost, 1.0);
        // smooth, nontrivial control
        let knots: Vec<f64> = (0..=8).map(|k| k as f64 / 8.0).collect();
        let values: Vec<Vec<f64>> = knots
            .iter()
            .map(|s| vec![(2.0 * s).sin(), (3.0 * s).cos()])
            .collect();
        let alpha = ControlPath {
            t_start: 0.0,
            t_end: 1.0,
            knots,
            values,
            interpolation: Interp::PiecewiseLinear,
        };
        let x0 = [0.9, -0.2];
        let runs: Vec<Vec<f64>> = [40usize, 80, 160]
            .iter()
            .map(|&n| {
                problem
                    .integrate_dynamics(&x0, 0.0, &alpha, n)
                    .unwrap()
                    .final_state()
                    .to_vec()
            })
            .collect();
        let e1 = dist(&runs[0], &runs[1]);
        let e2 = dist(&runs[1], &runs[2]);
        let ratio = e1 / e2;
        assert!(
            (12.0..=20.0).contains(&ratio),
            "step-halving ratio {ratio} (e1={e1:.3e}, e2={e2:.3e})"
        );
    }

    #[test]
    fn degenerate_line_traps_symmetric_extremals() {
        // f, g even in x1 about the zero of h at x1 = 0, x0 on the zero line:
        // the representative stays on it and x2 never moves.
        let field = grushin_sin(6.0);
        let g = ExprCost::parse("0.4*(x1^2+(x2-0.5)^2)*step5((x1^2+x2^2-16)/20)", 2).unwrap();
        let f = ExprCost::parse("0.1*cos(x1)", 2).unwrap();
        let problem = ControlProblem::new(&field, &f, &g, 1.0);
        let set = problem
            .solve_bvp_shooting(&[0.0, -0.25], 0.0, &ShootingConfig::default())
            .unwrap();
        for (k, x) in set.representative.states.iter().enumerate() {
            assert!(x[0].abs() < 1e-9, "sample {k}: x1 = {}", x[0]);
            // Eq (12)(2): x2' = h^2(x1) p2 vanishes on the degenerate line
            let h = x[0].sin();
            let x2dot = h * h * set.representative.adjoints[k][1];
            assert!(x2dot.abs() < 1e-12);
            assert!((x[1] + 0.25).abs() < 1e-9, "x2 frozen");
        }
    }

    #[test]
    fn uniqueness_probe_on_lq_is_tight() {
        let field = identity2(6.0);
        let g = ExprCost::parse("0.5*((x1-0.2)^2+x2^2)*step5((x1^2+x2^2-16)/20)", 2).unwrap();
        let problem = ControlProblem::new(&field, &ZeroCost, &g, 1.0);
        let cfg = ShootingConfig::default();
        let set = problem.solve_bvp_shooting(&[0.9, -0.7], 0.0, &cfg).unwrap();
        let rep = problem
            .uniqueness_probe(&set.representative, 0.5, &cfg, None)
            .unwrap();
        assert!(rep.applicable);
        assert!(rep.restarts_converged >= 1);
        assert!(
            rep.sup_trajectory_distance < 1e-6,
            "restarts must coincide: {}",
            rep.sup_trajectory_distance
        );
        // boundary case refuses
        let rep0 = problem
            .uniqueness_probe(&set.representative, 0.0, &cfg, None)
            .unwrap();
        assert!(!rep0.applicable);
    }

    #[test]
    fn concatenation_residual_lq() {
        let field = identity2(6.0);
        let g = ExprCost::parse("0.5*(x1^2+x2^2)*step5((x1^2+x2^2-16)/20)", 2).unwrap();
        let problem = ControlProblem::new(&field, &ZeroCost, &g, 1.0);
        let cfg = ShootingConfig::default();
        let set = problem.solve_bvp_shooting(&[0.8, 0.3], 0.0, &cfg).unwrap();
        let mid = problem
            .concatenation_check(&set.representative, 0.5, &cfg)
            .unwrap();
        assert!(mid < 1e-6, "DPP residual at midpoint: {mid}");
        let at_t = problem
            .concatenation_check(&set.representative, 1.0, &cfg)
            .unwrap();
        assert!(at_t < 1e-12, "s = T is an identity: {at_t}");
        assert!(problem
            .concatenation_check(&set.representative, 0.0, &cfg)
            .is_err());
    }

    #[test]
    fn oracle_flat_data_returns_zero_control() {
        let field = grushin_sin(4.0);
        let g = ExprCost::parse("5", 2).unwrap();
        let problem = ControlProblem::new(&field, &ZeroCost, &g, 1.0);
        let (path, cost) = problem
            .direct_minimize_oracle(&[0.2, 0.1], 0.0, 4, &OracleGrid::default())
            .unwrap();
        assert!((cost - 5.0).abs() < 1e-9);
        for v in &path.values {
            assert!(norm(v) < 1e-9);
        }
        assert!(problem
            .direct_minimize_oracle(&[0.2, 0.1], 0.0, 11, &OracleGrid::default())
            .is_err());
    }

    #[test]
    fn shooting_nonconvergence_carries_the_defect_trace() {
        let field = identity2(6.0);
        let g = ExprCost::parse("0.5*(x1^2+x2^2)*step5((x1^2+x2^2-16)/20)", 2).unwrap();
        let problem = ControlProblem::new(&field, &ZeroCost, &g, 1.0);
        // forbid Newton iterations: no start can reach the tolerance
        let cfg = ShootingConfig {
            max_newton_iter: 0,
            ..ShootingConfig::default()
        };
        match problem.solve_bvp_shooting(&[0.9, -0.7], 0.0, &cfg) {
            Err(MfgError::ShootingNonConvergence { defect_trace, best_defect }) => {
                assert_eq!(defect_trace.len(), cfg.n_starts);
                assert!(best_defect > cfg.bvp_tol);
            }
            other => panic!("expected nonconvergence, got {other:?}"),
        }
    }

    #[test]
    fn representative_is_never_spurious_and_partition_works() {
        let field = identity2(6.0);
        // rippled terminal cost with several shooting roots
        let g = ExprCost::parse("0.4*cos(3*x1)*step5((x1^2+x2^2-16)/20)", 2).unwrap();
        let problem = ControlProblem::new(&field, &ZeroCost, &g, 1.0);
        let cfg = ShootingConfig::default();
        let x0 = [0.2, 0.0];
        let set = problem.solve_bvp_shooting(&x0, 0.0, &cfg).unwrap();
        let upper = problem.zero_control_cost(&x0, 0.0, cfg.n_steps);
        assert!(set.value <= upper + cfg.sanity_margin);
        for alt in &set.alternates {
            assert!(problem.extremal_cost(alt) >= set.value - 1e-12);
        }
        // an impossible margin flags every extremal; the least-cost one is
        // still surfaced as representative with the rest marked spurious
        let harsh = ShootingConfig {
            sanity_margin: -1e9,
            ..ShootingConfig::default()
        };
        let flagged = problem.solve_bvp_shooting(&x0, 0.0, &harsh).unwrap();
        assert!(flagged.alternates.is_empty());
        assert!(!flagged.spurious.is_empty());
        assert!((flagged.value - set.value).abs() < 1e-9);
    }

    #[test]
    fn control_path_validation() {
        let mut p = ControlPath::constant(vec![1.0, 0.0], 0.0, 1.0);
        assert!(p.validate().is_ok());
        p.knots = vec![0.5, 0.5];
        assert!(p.validate().is_err());
        let q = ControlPath {
            t_start: 0.0,
            t_end: 1.0,
            knots: vec![0.0, 2.0],
            values: vec![vec![0.0; 2]; 2],
            interpolation: Interp::PiecewiseConstant,
        };
        assert!(q.validate().is_err());
    }
}
