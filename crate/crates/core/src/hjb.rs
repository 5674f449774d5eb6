//! Backward semi-Lagrangian solver for the Hamilton-Jacobi equation
//!
//! ```text
//! -du/dt + 1/2 |D_x u . B(x)|^2 = f(x,t),   u(.,T) = g
//! ```
//!
//! The update is the control-theoretic one: at each node the new value is the
//! minimum over a compact lattice of controls `a` of
//! `dt (|a|^2/2 + f) + Interp(u_next)(x + dt a B^T(x))`. Because the update
//! inherits correctness from the value-function representation rather than
//! from coercivity of the Hamiltonian, it tolerates the degenerate
//! directions (h = 0) that break upwind finite-difference Hamiltonians.

use crate::bfield::{BField, BGradient};
use crate::error::{MfgError, Result};
use crate::fields::{lipschitz_running, lipschitz_terminal, RunningCost, TerminalCost};
use crate::grid::{BoxDomain, SpaceGrid, MAX_DIM};
use rayon::prelude::*;

/// Space-time grid of u values, multilinear in space and linear in time.
#[derive(Debug, Clone)]
pub struct ValueFunction {
    pub grid: SpaceGrid,
    pub dt: f64,
    /// Number of time intervals; layers = steps + 1, layer k holds t = k dt.
    pub steps: usize,
    /// Layer-major storage: `values[layer * nodes + node]`.
    pub values: Vec<f64>,
    pub lipschitz_x: f64,
    pub lipschitz_t: f64,
    pub semiconcavity: f64,
    /// One-sided slope mismatch beyond this flags a kink.
    pub kink_threshold: f64,
}

/// Lattice and stepping parameters of the semi-Lagrangian scheme.
#[derive(Debug, Clone)]
pub struct HjbScheme {
    /// Explicit time step; when `None`, dt ~ dx / (radius * max(1, |B|)).
    pub dt: Option<f64>,
    /// Control-lattice radius; default 2 (Lip(g) + T Lip(f)).
    pub lattice_radius: Option<f64>,
    /// Points per axis of the coarse lattice (odd, so 0 is included).
    pub lattice_points: usize,
    /// Local refinement passes around the per-node argmin.
    pub refine_passes: usize,
    /// Points per axis per refinement pass.
    pub refine_points: usize,
}

impl Default for HjbScheme {
    fn default() -> Self {
        HjbScheme {
            dt: None,
            lattice_radius: None,
            lattice_points: 11,
            refine_passes: 2,
            refine_points: 7,
        }
    }
}

/// Full problem description for one backward solve.
pub struct HjbProblem<'a> {
    pub field: &'a BField,
    pub f: &'a dyn RunningCost,
    pub g: &'a dyn TerminalCost,
    pub grid: SpaceGrid,
    pub horizon: f64,
    pub scheme: HjbScheme,
    /// Region of interest; the grid box must pad it by at least
    /// `horizon * max_char_speed` per axis.
    pub scenario_box: Option<BoxDomain>,
    /// A-priori bound on the optimal feedback speed, used by the padding
    /// check. Estimated from the data slopes when absent.
    pub max_char_speed: Option<f64>,
}

impl<'a> HjbProblem<'a> {
    /// Sampled estimate of the optimal feedback speed |D u . B B^T| built
    /// from the slopes of g and f over the region of interest.
    pub fn estimated_char_speed(&self) -> f64 {
        let region = self.scenario_box.as_ref().unwrap_or(&self.grid.domain);
        let pts = region.lattice(if region.dim() <= 2 { 17 } else { 7 });
        let d = region.dim();
        let mut grad = vec![0.0; d];
        let mut speed: f64 = 0.0;
        for x in &pts {
            self.g.grad(x, &mut grad);
            speed = speed.max(crate::linalg::norm(&self.field.dp_hamiltonian(x, &grad)));
        }
        let mut fspeed: f64 = 0.0;
        for t in [0.0, 0.5 * self.horizon, self.horizon] {
            for x in &pts {
                self.f.grad_x(x, t, &mut grad);
                fspeed =
                    fspeed.max(crate::linalg::norm(&self.field.dp_hamiltonian(x, &grad)));
            }
        }
        speed + self.horizon * fspeed
    }

    fn check_padding(&self) -> Result<()> {
        let Some(scen) = &self.scenario_box else {
            return Ok(());
        };
        let speed = self.max_char_speed.unwrap_or_else(|| self.estimated_char_speed());
        let needed = self.horizon * speed;
        for axis in 0..scen.dim() {
            let pad = (scen.lo[axis] - self.grid.domain.lo[axis])
                .min(self.grid.domain.hi[axis] - scen.hi[axis]);
            if pad + 1e-12 < needed {
                return Err(MfgError::Config(format!(
                    "grid padding {pad:.4} on axis {} is below horizon*speed = {needed:.4}; \
                     enlarge the grid box or lower max_char_speed",
                    axis + 1
                )));
            }
        }
        Ok(())
    }
}

/// Per-axis candidate values of a centered control lattice.
fn lattice_axis(center: f64, radius: f64, points: usize) -> Vec<f64> {
    if points <= 1 || radius == 0.0 {
        return vec![center];
    }
    (0..points)
        .map(|i| center - radius + 2.0 * radius * i as f64 / (points - 1) as f64)
        .collect()
}

/// Per-layer minimizer with the grid geometry flattened into stack arrays,
/// so one candidate evaluation is a handful of fused multiply-adds plus a
/// 2^d-corner blend of the next layer.
struct NodeMin<'a> {
    prev: &'a [f64],
    dt: f64,
    dim: usize,
    lo: [f64; MAX_DIM],
    inv_dx: [f64; MAX_DIM],
    max_cell: [f64; MAX_DIM],
    strides: [usize; MAX_DIM],
}

impl<'a> NodeMin<'a> {
    fn new(grid: &SpaceGrid, prev: &'a [f64], dt: f64) -> NodeMin<'a> {
        let d = grid.dim();
        let mut lo = [0.0; MAX_DIM];
        let mut inv_dx = [0.0; MAX_DIM];
        let mut max_cell = [0.0; MAX_DIM];
        let mut strides = [1usize; MAX_DIM];
        for axis in (0..d.saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * grid.nodes_per_axis(axis + 1);
        }
        for axis in 0..d {
            lo[axis] = grid.domain.lo[axis];
            inv_dx[axis] = 1.0 / grid.dx(axis);
            max_cell[axis] = (grid.cells[axis] - 1) as f64;
        }
        NodeMin {
            prev,
            dt,
            dim: d,
            lo,
            inv_dx,
            max_cell,
            strides,
        }
    }

    /// Multilinear interpolation of the next layer with clamping, using the
    /// cached geometry.
    #[inline(always)]
    fn interp(&self, foot: &[f64; MAX_DIM]) -> f64 {
        let d = self.dim;
        let mut base = 0usize;
        let mut w = [0.0f64; MAX_DIM];
        for axis in 0..d {
            let pos = ((foot[axis] - self.lo[axis]) * self.inv_dx[axis])
                .clamp(0.0, self.max_cell[axis] + 1.0);
            let cell = (pos.min(self.max_cell[axis])) as usize;
            base += cell * self.strides[axis];
            w[axis] = (pos - cell as f64).min(1.0);
        }
        let corners = 1usize << d;
        let mut acc = 0.0;
        for corner in 0..corners {
            let mut idx = base;
            let mut weight = 1.0;
            for axis in 0..d {
                if corner >> axis & 1 == 1 {
                    idx += self.strides[axis];
                    weight *= w[axis];
                } else {
                    weight *= 1.0 - w[axis];
                }
            }
            if weight != 0.0 {
                acc += weight * self.prev[idx];
            }
        }
        acc
    }

    /// dt (|a|^2/2 + f) + Interp(prev)(x + dt a B^T(x)); the foot point is
    /// clamped to the grid box (padding keeps the region of interest clean).
    #[inline(always)]
    fn candidate(&self, x: &[f64], packed_b: &[f64], f_val: f64, a: &[f64]) -> f64 {
        let mut foot = [0.0f64; MAX_DIM];
        let mut k = 0;
        let mut a2 = 0.0;
        for i in 0..self.dim {
            let mut v = 0.0;
            for (j, &aj) in a.iter().enumerate().take(i + 1) {
                v += packed_b[k + j] * aj;
            }
            foot[i] = x[i] + self.dt * v;
            k += i + 1;
        }
        for &aj in a.iter().take(self.dim) {
            a2 += aj * aj;
        }
        self.dt * (0.5 * a2 + f_val) + self.interp(&foot)
    }

    /// Minimize over the product lattice given by per-axis value lists.
    fn min_over(
        &self,
        x: &[f64],
        packed_b: &[f64],
        f_val: f64,
        axes: &[&[f64]],
        best: &mut f64,
        argmin: &mut [f64],
    ) {
        if self.dim == 2 {
            return self.min_over_2d(x, packed_b, f_val, axes, best, argmin);
        }
        if self.dim == 3 {
            return self.min_over_3d(x, packed_b, f_val, axes, best, argmin);
        }
        let d = self.dim;
        let mut idx = [0usize; MAX_DIM];
        let mut a = [0.0f64; MAX_DIM];
        for axis in 0..d {
            a[axis] = axes[axis][0];
        }
        loop {
            let val = self.candidate(x, packed_b, f_val, &a[..d]);
            if val < *best {
                *best = val;
                argmin[..d].copy_from_slice(&a[..d]);
            }
            // odometer over the product lattice
            let mut axis = d;
            loop {
                if axis == 0 {
                    return;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < axes[axis].len() {
                    a[axis] = axes[axis][idx[axis]];
                    break;
                }
                idx[axis] = 0;
                a[axis] = axes[axis][0];
            }
        }
    }

    /// d = 2 fast path: everything depending on a1 alone (first foot
    /// coordinate, its interpolation row, the a1 energy) is hoisted out of
    /// the inner a2 loop, which reduces one candidate to a 1d lerp pair.
    fn min_over_2d(
        &self,
        x: &[f64],
        packed_b: &[f64],
        f_val: f64,
        axes: &[&[f64]],
        best: &mut f64,
        argmin: &mut [f64],
    ) {
        let (b11, b21, b22) = (packed_b[0], packed_b[1], packed_b[2]);
        let stride0 = self.strides[0];
        let dt = self.dt;
        let base_cost = dt * f_val;
        let max1 = self.max_cell[0];
        let max2 = self.max_cell[1];
        for &a1 in axes[0] {
            let cost1 = base_cost + 0.5 * dt * a1 * a1;
            let foot1 = x[0] + dt * b11 * a1;
            let pos1 = ((foot1 - self.lo[0]) * self.inv_dx[0]).clamp(0.0, max1 + 1.0);
            let cell1 = pos1.min(max1) as usize;
            let w1 = (pos1 - cell1 as f64).min(1.0);
            let row0 = &self.prev[cell1 * stride0..];
            let row1 = &self.prev[(cell1 + 1) * stride0..];
            let z = x[1] + dt * b21 * a1;
            let db22 = dt * b22;
            for &a2 in axes[1] {
                let foot2 = z + db22 * a2;
                let pos2 = ((foot2 - self.lo[1]) * self.inv_dx[1]).clamp(0.0, max2 + 1.0);
                let cell2 = pos2.min(max2) as usize;
                let w2 = (pos2 - cell2 as f64).min(1.0);
                let lower = row0[cell2] + w2 * (row0[cell2 + 1] - row0[cell2]);
                let upper = row1[cell2] + w2 * (row1[cell2 + 1] - row1[cell2]);
                let val = cost1 + 0.5 * dt * a2 * a2 + lower + w1 * (upper - lower);
                if val < *best {
                    *best = val;
                    argmin[0] = a1;
                    argmin[1] = a2;
                }
            }
        }
    }

    /// d = 3 fast path with the same hoisting structure: plane work per a1,
    /// row work per (a1, a2), a trilinear blend per candidate.
    fn min_over_3d(
        &self,
        x: &[f64],
        packed_b: &[f64],
        f_val: f64,
        axes: &[&[f64]],
        best: &mut f64,
        argmin: &mut [f64],
    ) {
        let (b11, b21, b22) = (packed_b[0], packed_b[1], packed_b[2]);
        let (b31, b32, b33) = (packed_b[3], packed_b[4], packed_b[5]);
        let (s0, s1) = (self.strides[0], self.strides[1]);
        let dt = self.dt;
        let base_cost = dt * f_val;
        for &a1 in axes[0] {
            let cost1 = base_cost + 0.5 * dt * a1 * a1;
            let foot1 = x[0] + dt * b11 * a1;
            let pos1 = ((foot1 - self.lo[0]) * self.inv_dx[0]).clamp(0.0, self.max_cell[0] + 1.0);
            let cell1 = pos1.min(self.max_cell[0]) as usize;
            let w1 = (pos1 - cell1 as f64).min(1.0);
            let plane0 = cell1 * s0;
            let plane1 = (cell1 + 1) * s0;
            let z2 = x[1] + dt * b21 * a1;
            let z3a = x[2] + dt * b31 * a1;
            for &a2 in axes[1] {
                let cost2 = cost1 + 0.5 * dt * a2 * a2;
                let foot2 = z2 + dt * b22 * a2;
                let pos2 =
                    ((foot2 - self.lo[1]) * self.inv_dx[1]).clamp(0.0, self.max_cell[1] + 1.0);
                let cell2 = pos2.min(self.max_cell[1]) as usize;
                let w2 = (pos2 - cell2 as f64).min(1.0);
                let r00 = &self.prev[plane0 + cell2 * s1..];
                let r01 = &self.prev[plane0 + (cell2 + 1) * s1..];
                let r10 = &self.prev[plane1 + cell2 * s1..];
                let r11 = &self.prev[plane1 + (cell2 + 1) * s1..];
                let z3 = z3a + dt * b32 * a2;
                let db33 = dt * b33;
                for &a3 in axes[2] {
                    let foot3 = z3 + db33 * a3;
                    let pos3 = ((foot3 - self.lo[2]) * self.inv_dx[2])
                        .clamp(0.0, self.max_cell[2] + 1.0);
                    let cell3 = pos3.min(self.max_cell[2]) as usize;
                    let w3 = (pos3 - cell3 as f64).min(1.0);
                    let v00 = r00[cell3] + w3 * (r00[cell3 + 1] - r00[cell3]);
                    let v01 = r01[cell3] + w3 * (r01[cell3 + 1] - r01[cell3]);
                    let v10 = r10[cell3] + w3 * (r10[cell3 + 1] - r10[cell3]);
                    let v11 = r11[cell3] + w3 * (r11[cell3 + 1] - r11[cell3]);
                    let lower = v00 + w2 * (v01 - v00);
                    let upper = v10 + w2 * (v11 - v10);
                    let val = cost2 + 0.5 * dt * a3 * a3 + lower + w1 * (upper - lower);
                    if val < *best {
                        *best = val;
                        argmin[0] = a1;
                        argmin[1] = a2;
                        argmin[2] = a3;
                    }
                }
            }
        }
    }
}

/// Solves the backward Hamilton-Jacobi problem on the given grid.
pub fn solve_hjb(problem: &HjbProblem) -> Result<ValueFunction> {
    problem.check_padding()?;
    let grid = problem.grid.clone();
    let d = grid.dim();
    if d != problem.field.dim() {
        return Err(MfgError::Config(format!(
            "grid dimension {d} does not match B-field dimension {}",
            problem.field.dim()
        )));
    }
    let horizon = problem.horizon;
    if !(horizon > 0.0) {
        return Err(MfgError::Config(format!("horizon must be > 0, got {horizon}")));
    }

    let radius = problem.scheme.lattice_radius.unwrap_or_else(|| {
        2.0 * (lipschitz_terminal(problem.g, &grid.domain)
            + horizon * lipschitz_running(problem.f, &grid.domain, horizon))
    });
    let sup_b = problem.field.sup_entry_bound().max(1.0);
    let dt = match problem.scheme.dt {
        Some(dt) if dt > 0.0 => dt,
        Some(dt) => {
            return Err(MfgError::Config(format!("dt must be > 0, got {dt}")));
        }
        None => grid.min_dx() / (radius.max(1e-3) * sup_b),
    };
    let steps = (horizon / dt).round().max(1.0) as usize;
    let dt = horizon / steps as f64;

    let nodes = grid.node_count();
    let mut values = vec![0.0; nodes * (steps + 1)];

    // Node coordinates and B rows are time independent: precompute once.
    let mut coords = vec![0.0; nodes * d];
    let packed_len = problem.field.packed_len();
    let mut packed = vec![0.0; nodes * packed_len];
    for node in 0..nodes {
        let span = &mut coords[node * d..(node + 1) * d];
        grid.node_position_into(node, span);
        problem
            .field
            .eval_packed_into(span, &mut packed[node * packed_len..(node + 1) * packed_len]);
    }

    // Terminal layer: u(., T) = g exactly at nodes.
    {
        let layer = &mut values[steps * nodes..(steps + 1) * nodes];
        for (node, slot) in layer.iter_mut().enumerate() {
            *slot = problem.g.value(&coords[node * d..(node + 1) * d]);
        }
    }

    let coarse: Vec<f64> = lattice_axis(0.0, radius, problem.scheme.lattice_points);
    let coarse_spacing = if coarse.len() > 1 {
        coarse[1] - coarse[0]
    } else {
        0.0
    };

    let mut f_layer = vec![0.0; nodes];
    for k in (0..steps).rev() {
        let t = k as f64 * dt;
        problem.f.render_layer(&grid, t, &mut f_layer);

        let (head, tail) = values.split_at_mut((k + 1) * nodes);
        let layer = &mut head[k * nodes..];
        let prev = &tail[..nodes];

        let minimizer = NodeMin::new(&grid, prev, dt);
        let scheme = &problem.scheme;
        let coarse_axes: Vec<&[f64]> = vec![coarse.as_slice(); d];
        layer
            .par_iter_mut()
            .enumerate()
            .for_each(|(node, slot)| {
                let x = &coords[node * d..(node + 1) * d];
                let pb = &packed[node * packed_len..(node + 1) * packed_len];
                let f_val = f_layer[node];
                let mut best = f64::INFINITY;
                let mut argmin = [0.0f64; MAX_DIM];
                minimizer.min_over(x, pb, f_val, &coarse_axes, &mut best, &mut argmin);
                let mut spacing = coarse_spacing;
                for _ in 0..scheme.refine_passes {
                    if spacing == 0.0 {
                        break;
                    }
                    let locals: Vec<Vec<f64>> = (0..d)
                        .map(|axis| {
                            lattice_axis(argmin[axis], 0.6 * spacing, scheme.refine_points)
                        })
                        .collect();
                    let axes: Vec<&[f64]> = locals.iter().map(Vec::as_slice).collect();
                    let mut arg = argmin;
                    minimizer.min_over(x, pb, f_val, &axes, &mut best, &mut arg);
                    argmin = arg;
                    spacing = 1.2 * spacing / (scheme.refine_points.max(2) - 1) as f64;
                }
                *slot = best;
            });
    }

    let mut u = ValueFunction {
        grid,
        dt,
        steps,
        values,
        lipschitz_x: 0.0,
        lipschitz_t: 0.0,
        semiconcavity: 0.0,
        kink_threshold: 0.0,
    };
    let reg = regularity_report(&u);
    u.lipschitz_x = reg.lipschitz_x;
    u.lipschitz_t = reg.lipschitz_t;
    u.semiconcavity = reg.semiconcavity_sup;
    u.kink_threshold = 10.0 * u.grid.min_dx() * reg.semiconcavity_sup.abs().max(1e-6);
    Ok(u)
}

impl ValueFunction {
    pub fn horizon(&self) -> f64 {
        self.dt * self.steps as f64
    }

    pub fn layer(&self, k: usize) -> &[f64] {
        let n = self.grid.node_count();
        &self.values[k * n..(k + 1) * n]
    }

    fn time_weight(&self, t: f64) -> Result<(usize, f64)> {
        let horizon = self.horizon();
        if t < -1e-9 || t > horizon + 1e-9 {
            return Err(MfgError::OutOfGrid {
                point: vec![],
                time: t,
            });
        }
        let pos = (t / self.dt).clamp(0.0, self.steps as f64);
        let mut k = pos as usize;
        if k >= self.steps {
            k = self.steps - 1;
        }
        Ok((k, pos - k as f64))
    }

    /// Multilinear in space, linear in time.
    pub fn value_at(&self, x: &[f64], t: f64) -> Result<f64> {
        if !self.grid.domain.contains(x) {
            return Err(MfgError::OutOfGrid {
                point: x.to_vec(),
                time: t,
            });
        }
        let (k, w) = self.time_weight(t)?;
        let a = self.grid.interp_clamped(self.layer(k), x);
        if w == 0.0 {
            return Ok(a);
        }
        let b = self.grid.interp_clamped(self.layer(k + 1), x);
        Ok((1.0 - w) * a + w * b)
    }

    fn value_interp(&self, k: usize, w: f64, x: &[f64]) -> f64 {
        let a = self.grid.interp_clamped(self.layer(k), x);
        if w == 0.0 {
            return a;
        }
        let b = self.grid.interp_clamped(self.layer(k + 1), x);
        (1.0 - w) * a + w * b
    }

    /// Spatial gradient by grid-step central differences, with one-sided
    /// stencils near the boundary. Returns the per-axis (left, right)
    /// one-sided slopes as well so callers can detect kinks.
    fn slopes(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if !self.grid.domain.contains(x) {
            return Err(MfgError::OutOfGrid {
                point: x.to_vec(),
                time: t,
            });
        }
        let (k, w) = self.time_weight(t)?;
        let d = self.grid.dim();
        let mut left = vec![0.0; d];
        let mut right = vec![0.0; d];
        let mut probe = x.to_vec();
        let center = self.value_interp(k, w, x);
        for axis in 0..d {
            let h = self.grid.dx(axis);
            let lo = self.grid.domain.lo[axis];
            let hi = self.grid.domain.hi[axis];
            let can_left = x[axis] - h >= lo - 1e-12;
            let can_right = x[axis] + h <= hi + 1e-12;
            if !can_left && !can_right {
                return Err(MfgError::Stencil { point: x.to_vec() });
            }
            if can_right {
                probe[axis] = (x[axis] + h).min(hi);
                right[axis] = (self.value_interp(k, w, &probe) - center) / h;
            }
            if can_left {
                probe[axis] = (x[axis] - h).max(lo);
                left[axis] = (center - self.value_interp(k, w, &probe)) / h;
            }
            if !can_left {
                left[axis] = right[axis];
            }
            if !can_right {
                right[axis] = left[axis];
            }
            probe[axis] = x[axis];
        }
        Ok((left, right))
    }

    /// D u selected kink-aware: central slopes where smooth; at detected
    /// kinks, the one-sided combination minimizing the Hamiltonian (the
    /// semiconcave superdifferential selection). Returns (Du, kinked).
    pub fn gradient_selected(&self, field: &BField, x: &[f64], t: f64) -> Result<(Vec<f64>, bool)> {
        let (left, right) = self.slopes(x, t)?;
        let d = left.len();
        let kinked: Vec<bool> = (0..d)
            .map(|a| (right[a] - left[a]).abs() > self.kink_threshold.max(1e-12))
            .collect();
        if !kinked.iter().any(|&k| k) {
            let central: Vec<f64> = (0..d).map(|a| 0.5 * (left[a] + right[a])).collect();
            return Ok((central, false));
        }
        // Enumerate one-sided choices on kinked axes, minimize H.
        let kinked_axes: Vec<usize> = (0..d).filter(|&a| kinked[a]).collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 0..(1usize << kinked_axes.len()) {
            let mut du: Vec<f64> = (0..d).map(|a| 0.5 * (left[a] + right[a])).collect();
            for (bit, &axis) in kinked_axes.iter().enumerate() {
                du[axis] = if mask >> bit & 1 == 1 {
                    right[axis]
                } else {
                    left[axis]
                };
            }
            let h = field.hamiltonian(x, &du);
            if best.as_ref().map_or(true, |(hb, _)| h < *hb) {
                best = Some((h, du));
            }
        }
        Ok((best.unwrap().1, true))
    }

    /// D_B u = (D u) . B with the kink-aware selection; the flag reports
    /// whether a kink was detected at the query point.
    pub fn numeric_b_gradient(&self, field: &BField, x: &[f64], t: f64) -> Result<(BGradient, bool)> {
        let (du, kinked) = self.gradient_selected(field, x, t)?;
        Ok((crate::bfield::b_gradient_exact(&du, field, x), kinked))
    }

    /// Characteristic velocity -D_x u B B^T for the feedback flow.
    pub fn b_velocity(&self, field: &BField, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let (du, _) = self.gradient_selected(field, x, t)?;
        Ok(self::neg(field.dp_hamiltonian(x, &du)))
    }

    /// CSV export `t,x1..xd,u` in full double precision.
    pub fn to_csv(&self) -> String {
        let d = self.grid.dim();
        let mut out = String::new();
        out.push('t');
        for axis in 0..d {
            out.push_str(&format!(",x{}", axis + 1));
        }
        out.push_str(",u\n");
        let nodes = self.grid.node_count();
        let mut x = vec![0.0; d];
        for k in 0..=self.steps {
            let t = k as f64 * self.dt;
            for node in 0..nodes {
                self.grid.node_position_into(node, &mut x);
                out.push_str(&crate::csvio::fmt_float(t));
                for c in &x {
                    out.push(',');
                    out.push_str(&crate::csvio::fmt_float(*c));
                }
                out.push(',');
                out.push_str(&crate::csvio::fmt_float(self.values[k * nodes + node]));
                out.push('\n');
            }
        }
        out
    }

    /// Binary layout: magic, dim, cells, lo, hi, dt, steps, then the value
    /// array in time-major blocks of row-major node order (little endian).
    pub fn save_binary(&self, path: &std::path::Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"MFGVF001");
        let d = self.grid.dim() as u64;
        buf.extend_from_slice(&d.to_le_bytes());
        for axis in 0..self.grid.dim() {
            buf.extend_from_slice(&(self.grid.cells[axis] as u64).to_le_bytes());
        }
        for axis in 0..self.grid.dim() {
            buf.extend_from_slice(&self.grid.domain.lo[axis].to_le_bytes());
            buf.extend_from_slice(&self.grid.domain.hi[axis].to_le_bytes());
        }
        buf.extend_from_slice(&self.dt.to_le_bytes());
        buf.extend_from_slice(&(self.steps as u64).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_binary(path: &std::path::Path) -> Result<ValueFunction> {
        let data = std::fs::read(path)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > data.len() {
                return Err(MfgError::Config("value function file truncated".into()));
            }
            let s = &data[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != b"MFGVF001" {
            return Err(MfgError::Config("bad value function magic".into()));
        }
        let read_u64 = |pos: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };
        let read_f64 = |pos: &mut usize| -> Result<f64> {
            Ok(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };
        let d = read_u64(&mut pos)? as usize;
        let mut cells = Vec::with_capacity(d);
        for _ in 0..d {
            cells.push(read_u64(&mut pos)? as usize);
        }
        let mut lo = Vec::with_capacity(d);
        let mut hi = Vec::with_capacity(d);
        for _ in 0..d {
            lo.push(read_f64(&mut pos)?);
            hi.push(read_f64(&mut pos)?);
        }
        let dt = read_f64(&mut pos)?;
        let steps = read_u64(&mut pos)? as usize;
        let grid = SpaceGrid::new(BoxDomain::new(lo, hi)?, cells)?;
        let nodes = grid.node_count();
        let mut values = Vec::with_capacity(nodes * (steps + 1));
        for _ in 0..nodes * (steps + 1) {
            values.push(read_f64(&mut pos)?);
        }
        let mut u = ValueFunction {
            grid,
            dt,
            steps,
            values,
            lipschitz_x: 0.0,
            lipschitz_t: 0.0,
            semiconcavity: 0.0,
            kink_threshold: 0.0,
        };
        let reg = regularity_report(&u);
        u.lipschitz_x = reg.lipschitz_x;
        u.lipschitz_t = reg.lipschitz_t;
        u.semiconcavity = reg.semiconcavity_sup;
        u.kink_threshold = 10.0 * u.grid.min_dx() * reg.semiconcavity_sup.abs().max(1e-6);
        Ok(u)
    }
}

fn neg(mut v: Vec<f64>) -> Vec<f64> {
    for c in &mut v {
        *c = -*c;
    }
    v
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct RegularityReport {
    /// max over axes/nodes/times of |one-step difference| / dx.
    pub lipschitz_x: f64,
    /// max over nodes/layer pairs of |difference| / dt.
    pub lipschitz_t: f64,
    /// max over axes/interior nodes of the second central difference / dx^2
    /// (signed; bounded above is the semiconcavity certificate).
    pub semiconcavity_sup: f64,
}

pub fn regularity_report(u: &ValueFunction) -> RegularityReport {
    let grid = &u.grid;
    let d = grid.dim();
    let nodes = grid.node_count();
    let mut lip_x: f64 = 0.0;
    let mut semi: f64 = f64::NEG_INFINITY;
    for k in 0..=u.steps {
        let layer = u.layer(k);
        for node in 0..nodes {
            let multi = grid.multi_index(node);
            for axis in 0..d {
                let dx = grid.dx(axis);
                let n_axis = grid.nodes_per_axis(axis);
                if multi[axis] + 1 < n_axis {
                    let mut right = multi.clone();
                    right[axis] += 1;
                    let diff = (layer[grid.flat_index(&right)] - layer[node]).abs() / dx;
                    lip_x = lip_x.max(diff);
                }
                if multi[axis] >= 1 && multi[axis] + 1 < n_axis {
                    let mut right = multi.clone();
                    right[axis] += 1;
                    let mut left = multi.clone();
                    left[axis] -= 1;
                    let second = (layer[grid.flat_index(&right)] - 2.0 * layer[node]
                        + layer[grid.flat_index(&left)])
                        / (dx * dx);
                    semi = semi.max(second);
                }
            }
        }
    }
    let mut lip_t: f64 = 0.0;
    for k in 0..u.steps {
        let a = u.layer(k);
        let b = u.layer(k + 1);
        for node in 0..nodes {
            lip_t = lip_t.max((b[node] - a[node]).abs() / u.dt);
        }
    }
    RegularityReport {
        lipschitz_x: lip_x,
        lipschitz_t: lip_t,
        semiconcavity_sup: if semi.is_finite() { semi } else { 0.0 },
    }
}
