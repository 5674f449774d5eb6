//! The regularizing couplings F(x,t,m) = V(x, t, (rho * m)(x)) and
//! G(x, m(T)) = G_form(x, (rho_G * m(T))(x)), their exact gradients, the
//! C^2-bound certification, and the frozen measure curves they are
//! evaluated along.

use crate::error::{MfgError, Result};
use crate::expr::{EvalCtx, Expr, Var};
use crate::fields::{RunningCost, TerminalCost};
use crate::grid::{BoxDomain, SpaceGrid};
use crate::measure::{BumpKernel, ParticleMeasure};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Mean over particles of the mollifier centered at each particle:
/// (rho * m)(x). Nonnegative and smooth in x by construction.
pub fn mollified_density(m: &ParticleMeasure, rho: &BumpKernel, x: &[f64]) -> f64 {
    let d = m.dim();
    let nc = rho.normalization(d).expect("kernel dimension checked upstream");
    let mut y = vec![0.0; d];
    let mut acc = 0.0;
    for p in m.positions() {
        for axis in 0..d {
            y[axis] = x[axis] - p[axis];
        }
        acc += rho.eval(&y, nc);
    }
    acc / m.len() as f64
}

/// Gradient in x of the mollified density.
pub fn mollified_density_grad(m: &ParticleMeasure, rho: &BumpKernel, x: &[f64], out: &mut [f64]) {
    let d = m.dim();
    let nc = rho.normalization(d).expect("kernel dimension checked upstream");
    let mut y = vec![0.0; d];
    let mut g = vec![0.0; d];
    out[..d].fill(0.0);
    for p in m.positions() {
        for axis in 0..d {
            y[axis] = x[axis] - p[axis];
        }
        rho.grad(&y, nc, &mut g);
        for axis in 0..d {
            out[axis] += g[axis];
        }
    }
    let w = 1.0 / m.len() as f64;
    for slot in out.iter_mut().take(d) {
        *slot *= w;
    }
}

/// Uniform spatial bins over a cloud at the kernel width, so a mollified
/// density query touches only the 3^d neighboring bins instead of every
/// particle. Exact: particles outside the neighborhood cannot intersect
/// the kernel support.
pub struct BinnedCloud {
    positions: Vec<Vec<f64>>,
    weight: f64,
    origin: Vec<f64>,
    inv_w: f64,
    dims: Vec<usize>,
    bins: Vec<Vec<u32>>,
}

impl BinnedCloud {
    pub fn new(m: &ParticleMeasure, width: f64) -> BinnedCloud {
        let d = m.dim();
        let mut origin = vec![f64::MAX; d];
        let mut hi = vec![f64::MIN; d];
        for p in m.positions() {
            for axis in 0..d {
                origin[axis] = origin[axis].min(p[axis]);
                hi[axis] = hi[axis].max(p[axis]);
            }
        }
        let inv_w = 1.0 / width;
        let dims: Vec<usize> = (0..d)
            .map(|axis| ((hi[axis] - origin[axis]) * inv_w).floor() as usize + 1)
            .collect();
        let total: usize = dims.iter().product();
        let mut bins = vec![Vec::new(); total];
        for (idx, p) in m.positions().iter().enumerate() {
            let mut flat = 0usize;
            for axis in 0..d {
                let c = ((p[axis] - origin[axis]) * inv_w) as usize;
                flat = flat * dims[axis] + c.min(dims[axis] - 1);
            }
            bins[flat].push(idx as u32);
        }
        BinnedCloud {
            positions: m.positions().to_vec(),
            weight: 1.0 / m.len() as f64,
            origin,
            inv_w,
            dims,
            bins,
        }
    }

    /// Visits every particle within kernel range of `x` in deterministic
    /// (bin-major, then insertion) order.
    #[inline]
    fn for_each_near(&self, x: &[f64], mut visit: impl FnMut(&[f64])) {
        let d = self.origin.len();
        let mut lo = [0i64; crate::grid::MAX_DIM];
        let mut hi = [0i64; crate::grid::MAX_DIM];
        for axis in 0..d {
            let c = ((x[axis] - self.origin[axis]) * self.inv_w).floor() as i64;
            lo[axis] = (c - 1).max(0);
            hi[axis] = (c + 1).min(self.dims[axis] as i64 - 1);
            if lo[axis] > hi[axis] {
                return;
            }
        }
        let mut idx = lo;
        'outer: loop {
            let mut flat = 0usize;
            for axis in 0..d {
                flat = flat * self.dims[axis] + idx[axis] as usize;
            }
            for &p in &self.bins[flat] {
                visit(&self.positions[p as usize]);
            }
            let mut axis = d;
            loop {
                if axis == 0 {
                    break 'outer;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] <= hi[axis] {
                    break;
                }
                idx[axis] = lo[axis];
            }
        }
    }

    pub fn density(&self, rho: &BumpKernel, norm_const: f64, x: &[f64]) -> f64 {
        let d = self.origin.len();
        let mut y = [0.0f64; crate::grid::MAX_DIM];
        let mut acc = 0.0;
        self.for_each_near(x, |p| {
            for axis in 0..d {
                y[axis] = x[axis] - p[axis];
            }
            acc += rho.eval(&y[..d], norm_const);
        });
        acc * self.weight
    }

    pub fn density_and_grad(
        &self,
        rho: &BumpKernel,
        norm_const: f64,
        x: &[f64],
        grad: &mut [f64],
    ) -> f64 {
        let d = self.origin.len();
        let mut y = [0.0f64; crate::grid::MAX_DIM];
        let mut g = [0.0f64; crate::grid::MAX_DIM];
        let mut acc = 0.0;
        grad[..d].fill(0.0);
        self.for_each_near(x, |p| {
            for axis in 0..d {
                y[axis] = x[axis] - p[axis];
            }
            acc += rho.eval(&y[..d], norm_const);
            rho.grad(&y[..d], norm_const, &mut g[..d]);
            for axis in 0..d {
                grad[axis] += g[axis];
            }
        });
        for slot in grad.iter_mut().take(d) {
            *slot *= self.weight;
        }
        acc * self.weight
    }
}

/// Coupling data of a scenario: V(x,t,z), the mollifier width for F, the
/// terminal form G(x,z) with its own mollifier, and the certified C^2 bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingSpec {
    /// Running coupling V from the expression grammar; `z` is the mollified
    /// density value.
    pub v: Expr,
    pub rho_width: f64,
    /// Terminal form G(x, z); must not reference t.
    pub g_form: Expr,
    pub g_rho_width: f64,
    /// Certified bound from `c2_certify`, when computed.
    #[serde(default)]
    pub c2_cert: Option<f64>,
}

impl CouplingSpec {
    pub fn decoupled(g_form: Expr) -> CouplingSpec {
        CouplingSpec {
            v: Expr::zero(),
            rho_width: 1.0,
            g_form,
            g_rho_width: 1.0,
            c2_cert: None,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for (name, e, allow_t) in [("V", &self.v, true), ("G", &self.g_form, false)] {
            if let Some(i) = e.max_x_index() {
                if i >= dim {
                    return Err(MfgError::Config(format!(
                        "{name} references x{} beyond dimension {dim}",
                        i + 1
                    )));
                }
            }
            if !allow_t && e.uses(Var::T) {
                return Err(MfgError::Config("G may not depend on t".into()));
            }
        }
        if !(self.rho_width > 0.0) || !(self.g_rho_width > 0.0) {
            return Err(MfgError::Config("mollifier widths must be > 0".into()));
        }
        Ok(())
    }

    /// True when the system has no feedback through m: V vanishes and G does
    /// not read the mollified density.
    pub fn is_decoupled(&self) -> bool {
        self.v.clone().simplified().is_zero() && !self.g_form.uses(Var::Z)
    }

    pub fn rho(&self) -> BumpKernel {
        BumpKernel { width: self.rho_width }
    }

    pub fn g_rho(&self) -> BumpKernel {
        BumpKernel { width: self.g_rho_width }
    }

    /// Warn-worthy smoothness hazards (sqrt near zero breaks analyticity).
    pub fn smoothness_warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.v.uses_sqrt() {
            w.push("V uses sqrt: analyticity can fail where the argument vanishes".into());
        }
        if self.g_form.uses_sqrt() {
            w.push("G uses sqrt: analyticity can fail where the argument vanishes".into());
        }
        w
    }
}

/// F(x, t, m) = V(x, t, (rho * m)(x)).
pub fn eval_f(spec: &CouplingSpec, x: &[f64], t: f64, m: &ParticleMeasure) -> f64 {
    let z = mollified_density(m, &spec.rho(), x);
    spec.v.eval(&EvalCtx { x, t, z })
}

/// G(x, m_T) = G_form(x, (rho_G * m_T)(x)).
pub fn eval_g(spec: &CouplingSpec, x: &[f64], m_t: &ParticleMeasure) -> f64 {
    let z = mollified_density(m_t, &spec.g_rho(), x);
    spec.g_form.eval(&EvalCtx { x, t: 0.0, z })
}

/// A measure-valued curve sampled at increasing times; `at(t)` picks the
/// nearest snapshot.
#[derive(Debug, Clone)]
pub struct MeasureCurve {
    pub times: Vec<f64>,
    pub snapshots: Vec<ParticleMeasure>,
}

impl MeasureCurve {
    pub fn new(times: Vec<f64>, snapshots: Vec<ParticleMeasure>) -> Result<MeasureCurve> {
        if times.is_empty() || times.len() != snapshots.len() {
            return Err(MfgError::Contract(
                "measure curve needs matching nonempty times/snapshots".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MfgError::Contract("curve times must be increasing".into()));
        }
        Ok(MeasureCurve { times, snapshots })
    }

    /// Frozen-in-time curve (every snapshot is `m` relabeled).
    pub fn constant(m: &ParticleMeasure, times: Vec<f64>) -> Result<MeasureCurve> {
        let snapshots = times
            .iter()
            .map(|&t| {
                let mut s = m.clone();
                s.time_label = t;
                s
            })
            .collect();
        MeasureCurve::new(times, snapshots)
    }

    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 0usize;
        let mut gap = f64::INFINITY;
        // times are sorted; binary search for the closest
        let n = self.times.len();
        let mut lo = 0usize;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.times[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        for k in [lo, hi] {
            let g = (self.times[k] - t).abs();
            if g < gap {
                gap = g;
                best = k;
            }
        }
        best
    }

    pub fn at(&self, t: f64) -> &ParticleMeasure {
        &self.snapshots[self.nearest_index(t)]
    }

    pub fn terminal(&self) -> &ParticleMeasure {
        self.snapshots.last().unwrap()
    }
}

/// Running cost f(x,t) = F(x,t,m(t)) for a frozen curve, with exact
/// gradients and a per-snapshot grid cache for the semi-Lagrangian solver.
pub struct CoupledRunningCost {
    v: Expr,
    v_dx: Vec<Expr>,
    v_dz: Expr,
    rho: BumpKernel,
    pub curve: Arc<MeasureCurve>,
    binned: Vec<BinnedCloud>,
    cache: Option<GridCache>,
}

struct GridCache {
    grid: SpaceGrid,
    /// Mollified density at every grid node, one layer per curve snapshot.
    z_grids: Vec<Vec<f64>>,
}

impl CoupledRunningCost {
    pub fn new(spec: &CouplingSpec, curve: Arc<MeasureCurve>, dim: usize) -> Result<Self> {
        spec.validate(dim)?;
        let rho = spec.rho();
        let binned = curve
            .snapshots
            .iter()
            .map(|m| BinnedCloud::new(m, rho.width))
            .collect();
        Ok(CoupledRunningCost {
            v: spec.v.clone(),
            v_dx: (0..dim).map(|k| spec.v.diff(Var::X(k))).collect(),
            v_dz: spec.v.diff(Var::Z),
            rho,
            curve,
            binned,
            cache: None,
        })
    }

    /// Precomputes the mollified density of every snapshot at the grid
    /// nodes by compact-support scatter, so `render_layer` costs one
    /// expression evaluation per node.
    pub fn prepare_grid_cache(&mut self, grid: &SpaceGrid) -> Result<()> {
        let d = grid.dim();
        let nc = self.rho.normalization(d)?;
        let z_grids: Vec<Vec<f64>> = self
            .curve
            .snapshots
            .par_iter()
            .map(|m| scatter_density(m, &self.rho, nc, grid))
            .collect();
        self.cache = Some(GridCache {
            grid: grid.clone(),
            z_grids,
        });
        Ok(())
    }

    fn z_at(&self, x: &[f64], t: f64) -> f64 {
        let d = self.v_dx.len();
        let nc = self.rho.normalization(d).expect("dimension checked at build");
        self.binned[self.curve.nearest_index(t)].density(&self.rho, nc, x)
    }
}

/// Accumulates kernel mass into the nodes covered by each particle's
/// support window. Exact: every (node, particle) pair within the kernel
/// support contributes, all others are zero.
fn scatter_density(
    m: &ParticleMeasure,
    rho: &BumpKernel,
    norm_const: f64,
    grid: &SpaceGrid,
) -> Vec<f64> {
    let d = grid.dim();
    let mut out = vec![0.0; grid.node_count()];
    let weight = 1.0 / m.len() as f64;
    let mut lo_idx = vec![0usize; d];
    let mut hi_idx = vec![0usize; d];
    let mut y = vec![0.0; d];
    for p in m.positions() {
        for axis in 0..d {
            let dx = grid.dx(axis);
            let lo = grid.domain.lo[axis];
            let n = grid.nodes_per_axis(axis);
            let a = ((p[axis] - rho.width - lo) / dx).ceil().max(0.0) as usize;
            let b = ((p[axis] + rho.width - lo) / dx).floor().min((n - 1) as f64);
            lo_idx[axis] = a.min(n - 1);
            hi_idx[axis] = if b < 0.0 { 0 } else { b as usize };
            if b < a as f64 {
                lo_idx[axis] = 1;
                hi_idx[axis] = 0; // empty window
            }
        }
        if (0..d).any(|axis| hi_idx[axis] < lo_idx[axis]) {
            continue;
        }
        let mut idx = lo_idx.clone();
        'window: loop {
            for axis in 0..d {
                y[axis] = grid.node_coord(axis, idx[axis]) - p[axis];
            }
            let v = rho.eval(&y, norm_const);
            if v != 0.0 {
                out[grid.flat_index(&idx)] += v * weight;
            }
            let mut axis = d;
            loop {
                if axis == 0 {
                    break 'window;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] <= hi_idx[axis] {
                    break;
                }
                idx[axis] = lo_idx[axis];
            }
        }
    }
    out
}

impl RunningCost for CoupledRunningCost {
    fn value(&self, x: &[f64], t: f64) -> f64 {
        let z = self.z_at(x, t);
        self.v.eval(&EvalCtx { x, t, z })
    }

    fn grad_x(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let d = self.v_dx.len();
        let nc = self.rho.normalization(d).expect("dimension checked at build");
        let z = self.binned[self.curve.nearest_index(t)].density_and_grad(&self.rho, nc, x, out);
        let ctx = EvalCtx { x, t, z };
        let vz = self.v_dz.eval(&ctx);
        for (slot, dv) in out.iter_mut().zip(&self.v_dx) {
            *slot = dv.eval(&ctx) + vz * *slot;
        }
    }

    fn render_layer(&self, grid: &SpaceGrid, t: f64, out: &mut [f64]) {
        if let Some(cache) = &self.cache {
            if cache.grid == *grid {
                let z_grid = &cache.z_grids[self.curve.nearest_index(t)];
                let d = grid.dim();
                let mut x = vec![0.0; d];
                for (node, slot) in out.iter_mut().enumerate() {
                    grid.node_position_into(node, &mut x);
                    *slot = self.v.eval(&EvalCtx { x: &x, t, z: z_grid[node] });
                }
                return;
            }
        }
        let d = grid.dim();
        let mut x = vec![0.0; d];
        for (node, slot) in out.iter_mut().enumerate() {
            grid.node_position_into(node, &mut x);
            *slot = self.value(&x, t);
        }
    }
}

/// Terminal cost g(x) = G(x, m_T) for a frozen terminal measure.
pub struct CoupledTerminalCost {
    g_form: Expr,
    g_dx: Vec<Expr>,
    g_dz: Expr,
    rho: BumpKernel,
    binned: BinnedCloud,
    pub m_t: ParticleMeasure,
}

impl CoupledTerminalCost {
    pub fn new(spec: &CouplingSpec, m_t: ParticleMeasure, dim: usize) -> Result<Self> {
        spec.validate(dim)?;
        let rho = spec.g_rho();
        let binned = BinnedCloud::new(&m_t, rho.width);
        Ok(CoupledTerminalCost {
            g_form: spec.g_form.clone(),
            g_dx: (0..dim).map(|k| spec.g_form.diff(Var::X(k))).collect(),
            g_dz: spec.g_form.diff(Var::Z),
            rho,
            binned,
            m_t,
        })
    }
}

impl TerminalCost for CoupledTerminalCost {
    fn value(&self, x: &[f64]) -> f64 {
        let d = self.g_dx.len();
        let nc = self.rho.normalization(d).expect("dimension checked at build");
        let z = self.binned.density(&self.rho, nc, x);
        self.g_form.eval(&EvalCtx { x, t: 0.0, z })
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) {
        let d = self.g_dx.len();
        let nc = self.rho.normalization(d).expect("dimension checked at build");
        let z = self.binned.density_and_grad(&self.rho, nc, x, out);
        let ctx = EvalCtx { x, t: 0.0, z };
        let gz = self.g_dz.eval(&ctx);
        for (slot, dg) in out.iter_mut().zip(&self.g_dx) {
            *slot = dg.eval(&ctx) + gz * *slot;
        }
    }
}

/// Dense finite-difference certification of the C^2 bound of F and G over
/// the box, for representative times and measures. Errors when the scan
/// diverges under step refinement.
pub fn c2_certify(
    spec: &CouplingSpec,
    domain: &BoxDomain,
    t_samples: &[f64],
    m_samples: &[ParticleMeasure],
) -> Result<f64> {
    if m_samples.is_empty() {
        return Err(MfgError::Contract(
            "certification needs at least one measure sample".into(),
        ));
    }
    let d = domain.dim();
    spec.validate(d)?;
    let pts = domain.lattice(if d <= 2 { 13 } else { 5 });
    let width = domain.widths().iter().fold(f64::MAX, |a, &b| a.min(b));
    let scan = |step: f64| -> f64 {
        let mut bound: f64 = 0.0;
        let mut hi = vec![0.0; d];
        let mut lo = vec![0.0; d];
        for m in m_samples {
            let mut eval_all = |value: &mut dyn FnMut(&[f64]) -> f64| {
                for x in &pts {
                    let v = value(x);
                    bound = bound.max(v.abs());
                    for axis in 0..d {
                        hi.copy_from_slice(x);
                        lo.copy_from_slice(x);
                        hi[axis] += step;
                        lo[axis] -= step;
                        let vh = value(&hi);
                        let vl = value(&lo);
                        bound = bound.max(((vh - vl) / (2.0 * step)).abs());
                        bound = bound.max(((vh - 2.0 * v + vl) / (step * step)).abs());
                    }
                }
            };
            for &t in t_samples {
                eval_all(&mut |x| eval_f(spec, x, t, m));
            }
            eval_all(&mut |x| eval_g(spec, x, m));
        }
        bound
    };
    let coarse = scan(width / 64.0);
    let fine = scan(width / 128.0);
    if fine > 1.5 * coarse.max(1e-9) {
        return Err(MfgError::Certification(format!(
            "second differences grow under refinement ({coarse:.3e} -> {fine:.3e})"
        )));
    }
    Ok(coarse.max(fine))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{sample_initial, M0Spec};

    fn unit_box() -> BoxDomain {
        BoxDomain::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap()
    }

    fn delta(x: &[f64]) -> ParticleMeasure {
        ParticleMeasure::new(vec![x.to_vec()], 0.0, "test").unwrap()
    }

    fn spec_linear() -> CouplingSpec {
        CouplingSpec {
            v: Expr::parse("z").unwrap(),
            rho_width: 0.8,
            g_form: Expr::parse("z").unwrap(),
            g_rho_width: 0.8,
            c2_cert: None,
        }
    }

    #[test]
    fn convolution_with_dirac_is_the_kernel() {
        let spec = spec_linear();
        let m = delta(&[0.0, 0.0]);
        let rho = spec.rho();
        let nc = rho.normalization(2).unwrap();
        for x in [[0.0, 0.0], [0.3, -0.2], [0.5, 0.5]] {
            let direct = rho.eval(&x, nc);
            assert!((mollified_density(&m, &rho, &x) - direct).abs() < 1e-15);
            assert!((eval_f(&spec, &x, 0.0, &m) - direct).abs() < 1e-15);
            assert!((eval_g(&spec, &x, &m) - direct).abs() < 1e-15);
        }
        // outside the kernel support the density vanishes exactly
        assert_eq!(mollified_density(&m, &rho, &[2.0, 0.0]), 0.0);
    }

    #[test]
    fn decoupled_v_is_zero_everywhere() {
        let spec = CouplingSpec::decoupled(Expr::parse("x1^2").unwrap());
        assert!(spec.is_decoupled());
        let m = delta(&[0.0, 0.0]);
        assert_eq!(eval_f(&spec, &[0.2, 0.3], 0.5, &m), 0.0);
        // G independent of z reduces to a fixed terminal cost
        assert!((eval_g(&spec, &[0.5, 0.0], &m) - 0.25).abs() < 1e-15);
        let coupled = spec_linear();
        assert!(!coupled.is_decoupled());
    }

    #[test]
    fn mollified_density_matches_dense_quadrature() {
        // uniform cloud: (rho * m)(x) at the center approximates the
        // box-average of kernel translates, computed by dense quadrature
        let spec = spec_linear();
        let rho = spec.rho();
        let nc = rho.normalization(2).unwrap();
        let m = sample_initial(
            &M0Spec::Uniform { support: unit_box() },
            4096,
            13,
        )
        .unwrap();
        let x = [0.0, 0.0];
        let got = mollified_density(&m, &rho, &x);
        // dense quadrature of int rho(x - y) (1/4) dy over the box
        let n = 200;
        let h = 2.0 / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let y = [-1.0 + (i as f64 + 0.5) * h, -1.0 + (j as f64 + 0.5) * h];
                acc += rho.eval(&[x[0] - y[0], x[1] - y[1]], nc) * 0.25 * h * h;
            }
        }
        let tol = 5.0 / (m.len() as f64).sqrt();
        assert!((got - acc).abs() < tol, "monte carlo {got} vs quadrature {acc}");
    }

    #[test]
    fn coupled_gradients_match_finite_differences() {
        let spec = CouplingSpec {
            v: Expr::parse("0.5*z^2 + 0.1*x1*z + 0.2*t").unwrap(),
            rho_width: 0.9,
            g_form: Expr::parse("z^2 + 0.3*x2").unwrap(),
            g_rho_width: 0.9,
            c2_cert: None,
        };
        let m = sample_initial(&M0Spec::Uniform { support: unit_box() }, 256, 5).unwrap();
        let curve =
            Arc::new(MeasureCurve::constant(&m, vec![0.0, 0.5, 1.0]).unwrap());
        let f = CoupledRunningCost::new(&spec, curve, 2).unwrap();
        let g = CoupledTerminalCost::new(&spec, m, 2).unwrap();
        let h = 1e-6;
        for x in [[0.1, 0.2], [-0.4, 0.6]] {
            let mut grad = [0.0; 2];
            f.grad_x(&x, 0.5, &mut grad);
            for axis in 0..2 {
                let mut hi = x;
                let mut lo = x;
                hi[axis] += h;
                lo[axis] -= h;
                let fd = (f.value(&hi, 0.5) - f.value(&lo, 0.5)) / (2.0 * h);
                assert!(
                    (fd - grad[axis]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "f axis {axis}: fd {fd} vs exact {}",
                    grad[axis]
                );
            }
            let mut ggrad = [0.0; 2];
            g.grad(&x, &mut ggrad);
            for axis in 0..2 {
                let mut hi = x;
                let mut lo = x;
                hi[axis] += h;
                lo[axis] -= h;
                let fd = (g.value(&hi) - g.value(&lo)) / (2.0 * h);
                assert!(
                    (fd - ggrad[axis]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "g axis {axis}: fd {fd} vs exact {}",
                    ggrad[axis]
                );
            }
        }
    }

    #[test]
    fn grid_cache_matches_pointwise_values() {
        let spec = CouplingSpec {
            v: Expr::parse("0.1*z + 0.05*x2").unwrap(),
            rho_width: 0.7,
            g_form: Expr::parse("0").unwrap(),
            g_rho_width: 0.7,
            c2_cert: None,
        };
        let m = sample_initial(&M0Spec::Uniform { support: unit_box() }, 128, 21).unwrap();
        let curve = Arc::new(MeasureCurve::constant(&m, vec![0.0, 1.0]).unwrap());
        let mut f = CoupledRunningCost::new(&spec, curve, 2).unwrap();
        let grid = SpaceGrid::new(
            BoxDomain::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap(),
            vec![24, 24],
        )
        .unwrap();
        let mut direct = vec![0.0; grid.node_count()];
        RunningCost::render_layer(&f, &grid, 0.0, &mut direct);
        f.prepare_grid_cache(&grid).unwrap();
        let mut cached = vec![0.0; grid.node_count()];
        RunningCost::render_layer(&f, &grid, 0.0, &mut cached);
        for (a, b) in direct.iter().zip(&cached) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn lipschitz_composability_in_the_measure() {
        // |F(., m1) - F(., m2)| <= Lip_z(V) Lip(rho) d1(m1, m2)
        let spec = CouplingSpec {
            v: Expr::parse("0.5*z").unwrap(),
            rho_width: 0.8,
            g_form: Expr::parse("0").unwrap(),
            g_rho_width: 0.8,
            c2_cert: None,
        };
        let lip_v = 0.5;
        let lip_rho = spec.rho().lipschitz(2).unwrap();
        let m1 = sample_initial(&M0Spec::Uniform { support: unit_box() }, 128, 31).unwrap();
        // translate the cloud: d1 = |shift| exactly
        let shift = [0.15, -0.1];
        let m2 = ParticleMeasure::new(
            m1.positions()
                .iter()
                .map(|p| vec![p[0] + shift[0], p[1] + shift[1]])
                .collect(),
            0.0,
            "t",
        )
        .unwrap();
        let d1 = crate::measure::d1_distance(&m1, &m2, 512).unwrap().value;
        assert!((d1 - crate::linalg::norm(&shift)).abs() < 1e-9);
        for x in [[0.0, 0.0], [0.4, 0.3], [-0.6, 0.2]] {
            let gap = (eval_f(&spec, &x, 0.0, &m1) - eval_f(&spec, &x, 0.0, &m2)).abs();
            assert!(
                gap <= lip_v * lip_rho * d1 + 1e-12,
                "gap {gap} exceeds {}",
                lip_v * lip_rho * d1
            );
        }
    }

    #[test]
    fn certification_bounds_linear_coupling_by_kernel_norms() {
        let spec = spec_linear();
        let m = delta(&[0.0, 0.0]);
        let c = c2_certify(&spec, &unit_box(), &[0.0, 1.0], &[m]).unwrap();
        assert!(c.is_finite() && c > 0.0);
        // V = 0 certifies to 0 for the F part; G = z still contributes
        let spec0 = CouplingSpec {
            v: Expr::zero(),
            g_form: Expr::zero(),
            ..spec_linear()
        };
        let c0 = c2_certify(&spec0, &unit_box(), &[0.0], &[delta(&[0.0, 0.0])]).unwrap();
        assert_eq!(c0, 0.0);
    }

    #[test]
    fn binned_density_matches_naive_sum() {
        let spec = spec_linear();
        let rho = spec.rho();
        let nc = rho.normalization(2).unwrap();
        let m = sample_initial(&M0Spec::Uniform { support: unit_box() }, 512, 9).unwrap();
        let binned = BinnedCloud::new(&m, rho.width);
        let mut grad_b = [0.0; 2];
        let mut grad_n = [0.0; 2];
        for x in [[0.0, 0.0], [0.7, -0.9], [2.5, 2.5], [-1.2, 0.4]] {
            let naive = mollified_density(&m, &rho, &x);
            let fast = binned.density(&rho, nc, &x);
            assert!((naive - fast).abs() < 1e-12, "at {x:?}: {naive} vs {fast}");
            let fast2 = binned.density_and_grad(&rho, nc, &x, &mut grad_b);
            mollified_density_grad(&m, &rho, &x, &mut grad_n);
            assert!((fast2 - naive).abs() < 1e-12);
            for axis in 0..2 {
                assert!((grad_b[axis] - grad_n[axis]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn monte_carlo_stability_in_particle_count() {
        let spec = spec_linear();
        let base = sample_initial(&M0Spec::Uniform { support: unit_box() }, 1024, 77).unwrap();
        let big = sample_initial(&M0Spec::Uniform { support: unit_box() }, 4096, 77).unwrap();
        let x = [0.1, -0.3];
        let a = eval_f(&spec, &x, 0.0, &base);
        let b = eval_f(&spec, &x, 0.0, &big);
        assert!(
            (a - b).abs() < 6.0 / (1024f64).sqrt(),
            "N -> 4N changed eval_F by {}",
            (a - b).abs()
        );
    }

    #[test]
    fn smoothness_of_f_in_x_under_refinement() {
        let spec = CouplingSpec {
            v: Expr::parse("z^2").unwrap(),
            rho_width: 0.8,
            g_form: Expr::parse("0").unwrap(),
            g_rho_width: 0.8,
            c2_cert: None,
        };
        let m = sample_initial(&M0Spec::Uniform { support: unit_box() }, 512, 3).unwrap();
        // second central differences converge (no kinks)
        let x = [0.2, 0.1];
        let second = |h: f64| {
            (eval_f(&spec, &[x[0] + h, x[1]], 0.0, &m) - 2.0 * eval_f(&spec, &x, 0.0, &m)
                + eval_f(&spec, &[x[0] - h, x[1]], 0.0, &m))
                / (h * h)
        };
        let a = second(1e-2);
        let b = second(5e-3);
        let c = second(2.5e-3);
        assert!((a - b).abs() > (b - c).abs() * 0.5 || (b - c).abs() < 1e-6);
        assert!((b - c).abs() < 1e-2 * (1.0 + c.abs()));
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut spec = spec_linear();
        spec.g_form = Expr::parse("t*z").unwrap();
        assert!(spec.validate(2).is_err());
        let mut spec = spec_linear();
        spec.rho_width = 0.0;
        assert!(spec.validate(2).is_err());
        let spec3 = CouplingSpec {
            v: Expr::parse("x3").unwrap(),
            ..spec_linear()
        };
        assert!(spec3.validate(2).is_err());
    }
}
