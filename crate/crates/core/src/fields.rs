//! Running and terminal cost fields with exact spatial gradients.
//!
//! Shooting, the feedback flow and the semi-Lagrangian solver all consume
//! data through these traits, so a frozen measure coupling, a closed-form
//! expression and a test closure are interchangeable.

use crate::expr::{EvalCtx, Expr, Var};
use crate::error::{MfgError, Result};
use crate::grid::{BoxDomain, SpaceGrid};
use std::sync::Arc;

/// Running cost f(x, t), differentiable in x.
pub trait RunningCost: Sync + Send {
    fn value(&self, x: &[f64], t: f64) -> f64;
    fn grad_x(&self, x: &[f64], t: f64, out: &mut [f64]);

    /// Values at every node of `grid` for one time layer. The default loops
    /// nodes; measure-coupled fields override this with a particle scatter.
    fn render_layer(&self, grid: &SpaceGrid, t: f64, out: &mut [f64]) {
        let mut x = vec![0.0; grid.dim()];
        for (flat, slot) in out.iter_mut().enumerate() {
            grid.node_position_into(flat, &mut x);
            *slot = self.value(&x, t);
        }
    }
}

/// Terminal cost g(x), differentiable.
pub trait TerminalCost: Sync + Send {
    fn value(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64], out: &mut [f64]);
}

/// f = 0 / g = 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroCost;

impl RunningCost for ZeroCost {
    fn value(&self, _x: &[f64], _t: f64) -> f64 {
        0.0
    }
    fn grad_x(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn render_layer(&self, _grid: &SpaceGrid, _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
}

impl TerminalCost for ZeroCost {
    fn value(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn grad(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Closed-form cost from the expression grammar, gradients by exact
/// differentiation.
#[derive(Debug, Clone)]
pub struct ExprCost {
    expr: Expr,
    grads: Vec<Expr>,
}

impl ExprCost {
    pub fn new(expr: Expr, dim: usize) -> Result<ExprCost> {
        if expr.uses(Var::Z) {
            return Err(MfgError::Config(
                "cost expressions may not reference the coupling variable z".into(),
            ));
        }
        if let Some(i) = expr.max_x_index() {
            if i >= dim {
                return Err(MfgError::Config(format!(
                    "cost expression references x{} beyond dimension {dim}",
                    i + 1
                )));
            }
        }
        let grads = (0..dim).map(|k| expr.diff(Var::X(k))).collect();
        Ok(ExprCost { expr, grads })
    }

    pub fn parse(src: &str, dim: usize) -> Result<ExprCost> {
        ExprCost::new(Expr::parse(src)?, dim)
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }
}

impl RunningCost for ExprCost {
    fn value(&self, x: &[f64], t: f64) -> f64 {
        self.expr.eval(&EvalCtx::space_time(x, t))
    }
    fn grad_x(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let ctx = EvalCtx::space_time(x, t);
        for (slot, g) in out.iter_mut().zip(&self.grads) {
            *slot = g.eval(&ctx);
        }
    }
}

impl TerminalCost for ExprCost {
    fn value(&self, x: &[f64]) -> f64 {
        self.expr.eval(&EvalCtx::space(x))
    }
    fn grad(&self, x: &[f64], out: &mut [f64]) {
        let ctx = EvalCtx::space(x);
        for (slot, g) in out.iter_mut().zip(&self.grads) {
            *slot = g.eval(&ctx);
        }
    }
}

/// Closure-backed running cost with finite-difference gradients; test and
/// harness plumbing (e.g. treating a value-function snapshot as a terminal
/// datum for dynamic-programming checks).
#[derive(Clone)]
pub struct FnCost {
    f: Arc<dyn Fn(&[f64], f64) -> f64 + Sync + Send>,
    step: f64,
}

impl FnCost {
    pub fn new(f: impl Fn(&[f64], f64) -> f64 + Sync + Send + 'static) -> FnCost {
        FnCost {
            f: Arc::new(f),
            step: 1e-6,
        }
    }

    pub fn with_step(mut self, step: f64) -> FnCost {
        self.step = step;
        self
    }
}

impl RunningCost for FnCost {
    fn value(&self, x: &[f64], t: f64) -> f64 {
        (self.f)(x, t)
    }
    fn grad_x(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let mut hi = x.to_vec();
        let mut lo = x.to_vec();
        for axis in 0..x.len() {
            hi[axis] = x[axis] + self.step;
            lo[axis] = x[axis] - self.step;
            out[axis] = ((self.f)(&hi, t) - (self.f)(&lo, t)) / (2.0 * self.step);
            hi[axis] = x[axis];
            lo[axis] = x[axis];
        }
    }
}

impl TerminalCost for FnCost {
    fn value(&self, x: &[f64]) -> f64 {
        (self.f)(x, 0.0)
    }
    fn grad(&self, x: &[f64], out: &mut [f64]) {
        self.grad_x(x, 0.0, out);
    }
}

fn time_samples(horizon: f64) -> [f64; 5] {
    [0.0, 0.25 * horizon, 0.5 * horizon, 0.75 * horizon, horizon]
}

/// Sampled sup |f| over box x [0, horizon].
pub fn sup_abs_running(f: &dyn RunningCost, domain: &BoxDomain, horizon: f64) -> f64 {
    let pts = domain.lattice(if domain.dim() <= 2 { 17 } else { 7 });
    let mut sup: f64 = 0.0;
    for t in time_samples(horizon) {
        for x in &pts {
            sup = sup.max(f.value(x, t).abs());
        }
    }
    sup
}

/// Sampled sup |grad_x f| over box x [0, horizon].
pub fn lipschitz_running(f: &dyn RunningCost, domain: &BoxDomain, horizon: f64) -> f64 {
    let pts = domain.lattice(if domain.dim() <= 2 { 17 } else { 7 });
    let mut g = vec![0.0; domain.dim()];
    let mut sup: f64 = 0.0;
    for t in time_samples(horizon) {
        for x in &pts {
            f.grad_x(x, t, &mut g);
            sup = sup.max(crate::linalg::norm(&g));
        }
    }
    sup
}

pub fn sup_abs_terminal(g: &dyn TerminalCost, domain: &BoxDomain) -> f64 {
    domain
        .lattice(if domain.dim() <= 2 { 33 } else { 9 })
        .iter()
        .map(|x| g.value(x).abs())
        .fold(0.0, f64::max)
}

pub fn lipschitz_terminal(g: &dyn TerminalCost, domain: &BoxDomain) -> f64 {
    let mut gr = vec![0.0; domain.dim()];
    domain
        .lattice(if domain.dim() <= 2 { 33 } else { 9 })
        .iter()
        .map(|x| {
            g.grad(x, &mut gr);
            crate::linalg::norm(&gr)
        })
        .fold(0.0, f64::max)
}
