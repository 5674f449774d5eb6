//! Axis-aligned boxes and uniform node grids with multilinear interpolation.

use crate::error::{MfgError, Result};
use serde::{Deserialize, Serialize};

/// Maximum spatial dimension supported by the stack-allocated kernels.
pub const MAX_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<BoxDomain> {
        if lo.len() != hi.len() || lo.is_empty() || lo.len() > MAX_DIM {
            return Err(MfgError::Config(format!(
                "box must have 1..={MAX_DIM} matching bounds, got lo={lo:?} hi={hi:?}"
            )));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(MfgError::Config(format!(
                "box bounds must satisfy lo < hi, got lo={lo:?} hi={hi:?}"
            )));
        }
        Ok(BoxDomain { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Box expanded by `pad` on every side.
    pub fn padded(&self, pad: f64) -> BoxDomain {
        BoxDomain {
            lo: self.lo.iter().map(|v| v - pad).collect(),
            hi: self.hi.iter().map(|v| v + pad).collect(),
        }
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    /// Deterministic lattice of `per_axis` points per axis (cell centers of a
    /// uniform partition), flattened. Used by sampling-based estimators.
    pub fn lattice(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        let total = per_axis.pow(d as u32);
        let mut pts = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut x = vec![0.0; d];
            for axis in (0..d).rev() {
                let i = rem % per_axis;
                rem /= per_axis;
                let frac = (i as f64 + 0.5) / per_axis as f64;
                x[axis] = self.lo[axis] + frac * (self.hi[axis] - self.lo[axis]);
            }
            pts.push(x);
        }
        pts
    }
}

/// Uniform node grid over a box: `cells[i] + 1` nodes per axis, row-major
/// flat order with the last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceGrid {
    pub domain: BoxDomain,
    pub cells: Vec<usize>,
}

impl SpaceGrid {
    pub fn new(domain: BoxDomain, cells: Vec<usize>) -> Result<SpaceGrid> {
        if cells.len() != domain.dim() || cells.iter().any(|&c| c == 0) {
            return Err(MfgError::Config(format!(
                "grid cells {cells:?} do not match box dimension {}",
                domain.dim()
            )));
        }
        Ok(SpaceGrid { domain, cells })
    }

    /// Grid with spacing as close to `dx` as possible without exceeding it.
    pub fn with_spacing(domain: BoxDomain, dx: f64) -> Result<SpaceGrid> {
        if !(dx > 0.0) {
            return Err(MfgError::Config(format!("grid spacing must be > 0, got {dx}")));
        }
        let cells = domain
            .widths()
            .iter()
            .map(|w| (w / dx).round().max(1.0) as usize)
            .collect();
        SpaceGrid::new(domain, cells)
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn nodes_per_axis(&self, axis: usize) -> usize {
        self.cells[axis] + 1
    }

    pub fn dx(&self, axis: usize) -> f64 {
        (self.domain.hi[axis] - self.domain.lo[axis]) / self.cells[axis] as f64
    }

    pub fn min_dx(&self) -> f64 {
        (0..self.dim()).map(|a| self.dx(a)).fold(f64::MAX, f64::min)
    }

    pub fn node_count(&self) -> usize {
        self.cells.iter().map(|c| c + 1).product()
    }

    fn strides(&self) -> [usize; MAX_DIM] {
        let d = self.dim();
        let mut s = [1usize; MAX_DIM];
        for axis in (0..d.saturating_sub(1)).rev() {
            s[axis] = s[axis + 1] * self.nodes_per_axis(axis + 1);
        }
        s
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let s = self.strides();
        multi.iter().zip(s.iter()).map(|(i, st)| i * st).sum()
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let d = self.dim();
        let mut rem = flat;
        let mut idx = vec![0usize; d];
        for axis in (0..d).rev() {
            let n = self.nodes_per_axis(axis);
            idx[axis] = rem % n;
            rem /= n;
        }
        idx
    }

    pub fn node_coord(&self, axis: usize, i: usize) -> f64 {
        self.domain.lo[axis] + self.dx(axis) * i as f64
    }

    /// Coordinates of the node with flat index `flat`, written into `out`.
    pub fn node_position_into(&self, flat: usize, out: &mut [f64]) {
        let d = self.dim();
        let mut rem = flat;
        for axis in (0..d).rev() {
            let n = self.nodes_per_axis(axis);
            out[axis] = self.node_coord(axis, rem % n);
            rem /= n;
        }
    }

    pub fn node_position(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.node_position_into(flat, &mut out);
        out
    }

    /// Multilinear interpolation of nodal `values` at `x`, with `x` clamped
    /// to the grid box. Allocation-free.
    pub fn interp_clamped(&self, values: &[f64], x: &[f64]) -> f64 {
        let d = self.dim();
        debug_assert_eq!(values.len(), self.node_count());
        let strides = self.strides();
        let mut base = 0usize;
        let mut w = [0.0f64; MAX_DIM];
        for axis in 0..d {
            let dx = self.dx(axis);
            let lo = self.domain.lo[axis];
            let cells = self.cells[axis];
            let pos = ((x[axis] - lo) / dx).clamp(0.0, cells as f64);
            let mut cell = pos as usize;
            if cell >= cells {
                cell = cells - 1;
            }
            base += cell * strides[axis];
            w[axis] = pos - cell as f64;
        }
        // Sum over the 2^d cell corners.
        let corners = 1usize << d;
        let mut acc = 0.0;
        for corner in 0..corners {
            let mut idx = base;
            let mut weight = 1.0;
            for axis in 0..d {
                if corner >> axis & 1 == 1 {
                    idx += strides[axis];
                    weight *= w[axis];
                } else {
                    weight *= 1.0 - w[axis];
                }
            }
            if weight != 0.0 {
                acc += weight * values[idx];
            }
        }
        acc
    }

    /// As `interp_clamped` but errors when `x` lies outside the box.
    pub fn interp(&self, values: &[f64], x: &[f64]) -> Result<f64> {
        if !self.domain.contains(x) {
            return Err(MfgError::OutOfGrid {
                point: x.to_vec(),
                time: f64::NAN,
            });
        }
        Ok(self.interp_clamped(values, x))
    }
}
