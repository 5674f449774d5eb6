//! The triangular dynamics matrix B, the Hamiltonian H(x,p) = 1/2 |pB(x)|^2
//! with its gradients, and the B-calculus (B-gradient, B-divergence,
//! B-differentiability probe).

use crate::error::{MfgError, Result};
use crate::expr::{EvalCtx, Expr, Var};
use crate::grid::BoxDomain;
use crate::linalg::solve_dense;
use serde::Serialize;

/// Lower-triangular dynamics matrix: row `i` holds entries `h_i1 .. h_ii`,
/// each a function of the first `i-1` coordinates only; `h_11` is a nonzero
/// constant. Entries above the diagonal are identically zero and not stored.
#[derive(Debug, Clone)]
pub struct BField {
    dim: usize,
    rows: Vec<Vec<Expr>>,
    /// Bound on entry values and their first/second derivatives over the box.
    pub c2_bound: f64,
    /// The padded computational box the field is certified on.
    pub domain: BoxDomain,
    derivs: Vec<Vec<Vec<Expr>>>,
}

/// Row vector D_B phi = (D phi) . B at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct BGradient {
    pub components: Vec<f64>,
}

impl BField {
    /// Builds and validates a field. When `c2_bound` is not supplied it is
    /// estimated by densely sampling entry values and their exact first and
    /// second derivatives over the box.
    pub fn new(rows: Vec<Vec<Expr>>, domain: BoxDomain, c2_bound: Option<f64>) -> Result<BField> {
        let dim = domain.dim();
        if rows.len() != dim {
            return Err(MfgError::Config(format!(
                "B matrix has {} rows but the domain dimension is {dim}",
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(MfgError::Config(format!(
                    "B row {} must hold exactly {} lower-triangular entries, got {}",
                    i + 1,
                    i + 1,
                    row.len()
                )));
            }
            for (j, entry) in row.iter().enumerate() {
                if entry.uses(Var::T) || entry.uses(Var::Z) {
                    return Err(MfgError::Config(format!(
                        "B entry h_{}{} may depend on x only",
                        i + 1,
                        j + 1
                    )));
                }
                if let Some(k) = entry.max_x_index() {
                    if k + 1 > i {
                        return Err(MfgError::Config(format!(
                            "B entry h_{}{} may depend on x1..x{} only, found x{}",
                            i + 1,
                            j + 1,
                            i,
                            k + 1
                        )));
                    }
                }
            }
        }
        match rows[0][0].clone().simplified() {
            Expr::Const(c) if c != 0.0 => {}
            _ => {
                return Err(MfgError::Config(
                    "h_11 must be a nonzero constant".into(),
                ))
            }
        }
        let derivs = rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .map(|e| (0..i).map(|k| e.diff(Var::X(k))).collect())
                    .collect()
            })
            .collect();
        let mut field = BField {
            dim,
            rows,
            c2_bound: 0.0,
            domain,
            derivs,
        };
        let estimate = field.estimate_c2_bound();
        field.c2_bound = match c2_bound {
            Some(c) if c > 0.0 => {
                if c < estimate * (1.0 - 1e-9) {
                    return Err(MfgError::Config(format!(
                        "supplied c2_bound {c} is violated on the box \
                         (sampled entry/derivative sup is {estimate:.6})"
                    )));
                }
                c
            }
            Some(c) => {
                return Err(MfgError::Config(format!("c2_bound must be > 0, got {c}")))
            }
            None => estimate,
        };
        Ok(field)
    }

    /// d=2 field diag(1, h(x1)).
    pub fn grushin(h: Expr, domain: BoxDomain) -> Result<BField> {
        BField::new(vec![vec![Expr::Const(1.0)], vec![Expr::zero(), h]], domain, None)
    }

    /// Identity dynamics in `dim` dimensions.
    pub fn identity(dim: usize, domain: BoxDomain) -> Result<BField> {
        let rows = (0..dim)
            .map(|i| {
                (0..=i)
                    .map(|j| Expr::Const(if i == j { 1.0 } else { 0.0 }))
                    .collect()
            })
            .collect();
        BField::new(rows, domain, None)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[Vec<Expr>] {
        &self.rows
    }

    /// Number of stored lower-triangular entries, d(d+1)/2.
    pub fn packed_len(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    /// Evaluates the lower triangle into `out` (packed row-major:
    /// h11, h21, h22, h31, ...). `out.len()` must be `packed_len()`.
    pub fn eval_packed_into(&self, x: &[f64], out: &mut [f64]) {
        let ctx = EvalCtx::space(x);
        let mut k = 0;
        for row in &self.rows {
            for e in row {
                out[k] = e.eval(&ctx);
                k += 1;
            }
        }
    }

    pub fn eval_packed(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.packed_len()];
        self.eval_packed_into(x, &mut out);
        out
    }

    /// Full d x d matrix (zeros above the diagonal). Errors when `x` lies
    /// outside the computational domain.
    pub fn eval_matrix(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if !self.domain.contains(x) {
            return Err(MfgError::OutOfDomain { point: x.to_vec() });
        }
        let ctx = EvalCtx::space(x);
        Ok((0..self.dim)
            .map(|i| {
                (0..self.dim)
                    .map(|j| {
                        if j <= i {
                            self.rows[i][j].eval(&ctx)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect())
    }

    /// q = p B(x) written into `q`: q_j = sum_{i>=j} p_i h_ij(x).
    pub fn left_mul_into(&self, x: &[f64], p: &[f64], q: &mut [f64]) {
        let ctx = EvalCtx::space(x);
        q[..self.dim].fill(0.0);
        for i in 0..self.dim {
            let pi = p[i];
            if pi == 0.0 {
                continue;
            }
            for j in 0..=i {
                q[j] += pi * self.rows[i][j].eval(&ctx);
            }
        }
    }

    /// q = p B(x): q_j = sum_{i>=j} p_i h_ij(x).
    pub fn left_mul(&self, x: &[f64], p: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.dim];
        self.left_mul_into(x, p, &mut q);
        q
    }

    /// H(x,p) = 1/2 |p B(x)|^2.
    pub fn hamiltonian(&self, x: &[f64], p: &[f64]) -> f64 {
        0.5 * self.left_mul(x, p).iter().map(|q| q * q).sum::<f64>()
    }

    /// dH/dp = p B(x) B^T(x) into `out`; `q` is scratch of length d.
    pub fn dp_hamiltonian_into(&self, x: &[f64], p: &[f64], out: &mut [f64], q: &mut [f64]) {
        self.left_mul_into(x, p, q);
        let ctx = EvalCtx::space(x);
        for i in 0..self.dim {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.rows[i][j].eval(&ctx) * q[j];
            }
            out[i] = acc;
        }
    }

    /// dH/dp = p B(x) B^T(x); component i is row i of B dotted with pB.
    pub fn dp_hamiltonian(&self, x: &[f64], p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let mut q = vec![0.0; self.dim];
        self.dp_hamiltonian_into(x, p, &mut out, &mut q);
        out
    }

    /// dH/dx = 1/2 D_x |p B(x)|^2 into `out`, via the exact entry
    /// derivatives: component k is sum_j q_j sum_{i>=j} p_i d h_ij / d x_k.
    /// The last component is always zero (no entry depends on x_d).
    pub fn dx_hamiltonian_into(&self, x: &[f64], p: &[f64], out: &mut [f64], q: &mut [f64]) {
        self.left_mul_into(x, p, q);
        let ctx = EvalCtx::space(x);
        out[..self.dim].fill(0.0);
        for i in 0..self.dim {
            let pi = p[i];
            if pi == 0.0 {
                continue;
            }
            for j in 0..=i {
                let qj = q[j];
                if qj == 0.0 {
                    continue;
                }
                for (k, d) in self.derivs[i][j].iter().enumerate() {
                    out[k] += qj * pi * d.eval(&ctx);
                }
            }
        }
    }

    pub fn dx_hamiltonian(&self, x: &[f64], p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let mut q = vec![0.0; self.dim];
        self.dx_hamiltonian_into(x, p, &mut out, &mut q);
        out
    }

    /// Velocity of the controlled dynamics, x' = alpha B^T(x):
    /// component i is sum_{j<=i} h_ij(x) alpha_j.
    pub fn dynamics_velocity_packed(&self, packed: &[f64], alpha: &[f64], out: &mut [f64]) {
        let mut k = 0;
        for i in 0..self.dim {
            let mut v = 0.0;
            for (j, &aj) in alpha.iter().enumerate().take(i + 1) {
                v += packed[k + j] * aj;
            }
            out[i] = v;
            k += i + 1;
        }
    }

    pub fn dynamics_velocity(&self, x: &[f64], alpha: &[f64]) -> Vec<f64> {
        let packed = self.eval_packed(x);
        let mut out = vec![0.0; self.dim];
        self.dynamics_velocity_packed(&packed, alpha, &mut out);
        out
    }

    /// sup over a sample lattice of |h_ij(x)| (the operator scale of B).
    pub fn sup_entry_bound(&self) -> f64 {
        self.domain
            .lattice(if self.dim <= 2 { 33 } else { 9 })
            .iter()
            .map(|x| {
                let ctx = EvalCtx::space(x);
                self.rows
                    .iter()
                    .flatten()
                    .map(|e| e.eval(&ctx).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    fn estimate_c2_bound(&self) -> f64 {
        let pts = self.domain.lattice(if self.dim <= 2 { 33 } else { 9 });
        let mut bound: f64 = 0.0;
        for (i, row) in self.rows.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                let firsts: Vec<Expr> = self.derivs[i][j].clone();
                let seconds: Vec<Expr> = firsts
                    .iter()
                    .flat_map(|d| (0..i).map(move |k| d.diff(Var::X(k))))
                    .collect();
                for x in &pts {
                    let ctx = EvalCtx::space(x);
                    bound = bound.max(e.eval(&ctx).abs());
                    for d in &firsts {
                        bound = bound.max(d.eval(&ctx).abs());
                    }
                    for d in &seconds {
                        bound = bound.max(d.eval(&ctx).abs());
                    }
                }
            }
        }
        bound.max(1e-12)
    }

    /// CSV dump of the matrix at a point: header `i,j,value`, row-major
    /// over the full d x d matrix (explicit zeros above the diagonal).
    pub fn matrix_csv(&self, x: &[f64]) -> Result<String> {
        let m = self.eval_matrix(x)?;
        let mut out = String::from("i,j,value\n");
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{}\n",
                    i + 1,
                    j + 1,
                    crate::csvio::fmt_float(*v)
                ));
            }
        }
        Ok(out)
    }

    /// The iterated B-adapted perturbation of a point: coordinate i moves by
    /// sum_{j<=i} h_ij evaluated at the already-perturbed coordinates.
    pub fn perturb(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let mut xt = x.to_vec();
        for i in 0..self.dim {
            let ctx = EvalCtx::space(&xt);
            let mut shift = 0.0;
            for (j, &vj) in v.iter().enumerate().take(i + 1) {
                shift += self.rows[i][j].eval(&ctx) * vj;
            }
            xt[i] = x[i] + shift;
        }
        xt
    }
}

/// D_B phi = (D phi) . B with the gradient supplied analytically.
pub fn b_gradient_exact(dphi: &[f64], field: &BField, x: &[f64]) -> BGradient {
    BGradient {
        components: field.left_mul(x, dphi),
    }
}

/// D_B phi by second-order central differences of a callable field.
pub fn b_gradient<F: Fn(&[f64]) -> f64>(phi: F, field: &BField, x: &[f64], step: f64) -> BGradient {
    let d = field.dim();
    let mut grad = vec![0.0; d];
    let mut hi = x.to_vec();
    let mut lo = x.to_vec();
    for axis in 0..d {
        hi[axis] = x[axis] + step;
        lo[axis] = x[axis] - step;
        grad[axis] = (phi(&hi) - phi(&lo)) / (2.0 * step);
        hi[axis] = x[axis];
        lo[axis] = x[axis];
    }
    b_gradient_exact(&grad, field, x)
}

/// div_B Phi = sum_j (D Phi_j . B)_j, central differences per component.
pub fn b_divergence<F: Fn(&[f64]) -> Vec<f64>>(
    phi: F,
    field: &BField,
    x: &[f64],
    step: f64,
) -> f64 {
    let d = field.dim();
    let mut hi = x.to_vec();
    let mut lo = x.to_vec();
    let mut jac = vec![vec![0.0; d]; d]; // jac[j][axis] = d Phi_j / d x_axis
    for axis in 0..d {
        hi[axis] = x[axis] + step;
        lo[axis] = x[axis] - step;
        let fh = phi(&hi);
        let fl = phi(&lo);
        for j in 0..d {
            jac[j][axis] = (fh[j] - fl[j]) / (2.0 * step);
        }
        hi[axis] = x[axis];
        lo[axis] = x[axis];
    }
    (0..d)
        .map(|j| field.left_mul(x, &jac[j])[j])
        .sum()
}

/// Result of the numerical B-differentiability probe.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    /// Least-squares candidate for rho_B, fitted at the smallest radius.
    pub rho_b: Vec<f64>,
    /// Directions whose B-adapted perturbation does not move the point at
    /// all; the corresponding rho_B component is not determined by the data.
    pub undetermined: Vec<bool>,
    pub radii: Vec<f64>,
    /// sup over sampled v with |v| = radius of |u(x~) - u(x) - (rho_B, v)| / |v|.
    pub residuals: Vec<f64>,
    /// True when no sampled perturbation moved the point (fit impossible).
    pub degenerate_fit: bool,
}

fn probe_directions(d: usize) -> Vec<Vec<f64>> {
    let mut dirs = Vec::new();
    for axis in 0..d {
        for sign in [1.0, -1.0] {
            let mut v = vec![0.0; d];
            v[axis] = sign;
            dirs.push(v);
        }
    }
    // diagonal corners, normalized
    for corner in 0..(1usize << d) {
        let v: Vec<f64> = (0..d)
            .map(|axis| if corner >> axis & 1 == 1 { 1.0 } else { -1.0 })
            .collect();
        let n = (d as f64).sqrt();
        dirs.push(v.into_iter().map(|c| c / n).collect());
    }
    dirs
}

/// Fits a candidate rho_B at the smallest radius and reports, per radius,
/// the worst normalized first-order defect of the B-adapted expansion.
/// Residuals tending to zero certify B-differentiability numerically.
pub fn b_differentiability_probe<F: Fn(&[f64]) -> f64>(
    u: F,
    field: &BField,
    x: &[f64],
    radii: &[f64],
) -> Result<ProbeReport> {
    let d = field.dim();
    if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0)) {
        return Err(MfgError::Contract(
            "probe radii must be positive and nonempty".into(),
        ));
    }
    if radii.windows(2).any(|w| w[1] >= w[0]) {
        return Err(MfgError::Contract("probe radii must be decreasing".into()));
    }
    let dirs = probe_directions(d);
    let r_fit = *radii.last().unwrap();
    let u0 = u(x);

    // Per-direction sensitivity at the fit radius flags degenerate directions.
    let mut undetermined = vec![false; d];
    let mut any_motion = false;
    for axis in 0..d {
        let mut v = vec![0.0; d];
        v[axis] = r_fit;
        let moved = crate::linalg::dist(&field.perturb(x, &v), x);
        if moved < 1e-14 * (1.0 + r_fit) {
            undetermined[axis] = true;
        } else {
            any_motion = true;
        }
    }

    // Least squares rho_B from all directions at the fit radius.
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for dir in &dirs {
        let v: Vec<f64> = dir.iter().map(|c| c * r_fit).collect();
        let delta = u(&field.perturb(x, &v)) - u0;
        for a in 0..d {
            rhs[a] += delta * v[a];
            for b in 0..d {
                gram[a * d + b] += v[a] * v[b];
            }
        }
    }
    let rho_b = solve_dense(&gram, &rhs, d).unwrap_or_else(|| vec![0.0; d]);

    let residuals = radii
        .iter()
        .map(|&r| {
            dirs.iter()
                .map(|dir| {
                    let v: Vec<f64> = dir.iter().map(|c| c * r).collect();
                    let delta = u(&field.perturb(x, &v)) - u0;
                    let lin: f64 = rho_b.iter().zip(&v).map(|(a, b)| a * b).sum();
                    (delta - lin).abs() / r
                })
                .fold(0.0, f64::max)
        })
        .collect();

    Ok(ProbeReport {
        rho_b,
        undetermined,
        radii: radii.to_vec(),
        residuals,
        degenerate_fit: !any_motion,
    })
}
