//! Particle representation of the population measure: sampling of the
//! initial distribution, push-forward through the characteristic flow,
//! kernel density reconstruction, the Kantorovich-Rubinstein distance d_1,
//! and the weak-form continuity-equation residual.
//!
//! The population is a cloud of N equal-weight particles, so total mass 1 is
//! structural and push-forward is literally the flow map applied per
//! particle — the representation the existence theory builds on.

use crate::assignment::min_cost_assignment;
use crate::bfield::{b_gradient_exact, BField};
use crate::control::feedback_flow;
use crate::error::{MfgError, Result};
use crate::fields::{ExprCost, RunningCost};
use crate::grid::{BoxDomain, SpaceGrid};
use crate::hjb::ValueFunction;
use crate::linalg::dist;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Equal-weight particle cloud representing m(t).
#[derive(Debug, Clone)]
pub struct ParticleMeasure {
    positions: Vec<Vec<f64>>,
    /// The time this cloud represents.
    pub time_label: f64,
    /// Cached integral of |x|^2 dm.
    pub second_moment: f64,
    /// Identifier of the evolution this snapshot belongs to.
    pub provenance: String,
    /// Seed that generated the initial cloud, when known.
    pub seed: Option<u64>,
}

impl ParticleMeasure {
    pub fn new(
        positions: Vec<Vec<f64>>,
        time_label: f64,
        provenance: impl Into<String>,
    ) -> Result<ParticleMeasure> {
        if positions.is_empty() {
            return Err(MfgError::Contract("a measure needs at least one particle".into()));
        }
        let d = positions[0].len();
        if d == 0 || positions.iter().any(|p| p.len() != d) {
            return Err(MfgError::Contract("particles must share one dimension".into()));
        }
        let second_moment = positions
            .iter()
            .map(|p| p.iter().map(|c| c * c).sum::<f64>())
            .sum::<f64>()
            / positions.len() as f64;
        Ok(ParticleMeasure {
            positions,
            time_label,
            second_moment,
            provenance: provenance.into(),
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.positions[0].len()
    }

    /// Uniform particle weight 1/N (mass one is structural).
    pub fn weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    pub fn positions(&self) -> &[Vec<f64>] {
        &self.positions
    }

    pub fn support_inside(&self, domain: &BoxDomain) -> bool {
        self.positions.iter().all(|p| domain.contains(p))
    }

    /// Mean of phi over the cloud: the particle realization of
    /// int phi dm(t).
    pub fn integrate_against<F: Fn(&[f64]) -> f64>(&self, phi: F) -> f64 {
        self.positions.iter().map(|p| phi(p)).sum::<f64>() / self.len() as f64
    }

    /// CSV export `id,x1..xd`.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut header = vec!["id".to_string()];
        for axis in 0..d {
            header.push(format!("x{}", axis + 1));
        }
        let mut out = header.join(",");
        out.push('\n');
        for (id, p) in self.positions.iter().enumerate() {
            out.push_str(&id.to_string());
            for c in p {
                out.push(',');
                out.push_str(&crate::csvio::fmt_float(*c));
            }
            out.push('\n');
        }
        out
    }

    /// JSON sidecar recorded next to the CSV.
    pub fn sidecar(&self) -> MeasureSidecar {
        MeasureSidecar {
            time_label: self.time_label,
            seed: self.seed,
            provenance: self.provenance.clone(),
            particles: self.len(),
            second_moment: self.second_moment,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureSidecar {
    pub time_label: f64,
    pub seed: Option<u64>,
    pub provenance: String,
    pub particles: usize,
    pub second_moment: f64,
}

/// Initial density specification (bounded, compactly supported).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum M0Spec {
    /// Uniform on a box.
    Uniform { support: BoxDomain },
    /// Gaussian truncated to a box (rejection sampling).
    TruncatedGaussian {
        center: Vec<f64>,
        sigma: f64,
        support: BoxDomain,
    },
    /// Normalized mixture of the above.
    Mixture {
        weights: Vec<f64>,
        components: Vec<M0Spec>,
    },
}

impl M0Spec {
    pub fn dim(&self) -> usize {
        match self {
            M0Spec::Uniform { support } => support.dim(),
            M0Spec::TruncatedGaussian { support, .. } => support.dim(),
            M0Spec::Mixture { components, .. } => {
                components.first().map_or(0, M0Spec::dim)
            }
        }
    }

    pub fn support(&self) -> BoxDomain {
        match self {
            M0Spec::Uniform { support } | M0Spec::TruncatedGaussian { support, .. } => {
                support.clone()
            }
            M0Spec::Mixture { components, .. } => {
                let mut b = components[0].support();
                for c in &components[1..] {
                    let s = c.support();
                    for axis in 0..b.lo.len() {
                        b.lo[axis] = b.lo[axis].min(s.lo[axis]);
                        b.hi[axis] = b.hi[axis].max(s.hi[axis]);
                    }
                }
                b
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            M0Spec::Uniform { .. } => Ok(()),
            M0Spec::TruncatedGaussian { center, sigma, support } => {
                if center.len() != support.dim() {
                    return Err(MfgError::Config(
                        "gaussian center dimension does not match the support box".into(),
                    ));
                }
                if !(*sigma > 0.0) {
                    return Err(MfgError::Config(format!(
                        "gaussian sigma must be > 0, got {sigma}"
                    )));
                }
                Ok(())
            }
            M0Spec::Mixture { weights, components } => {
                if weights.len() != components.len() || components.is_empty() {
                    return Err(MfgError::Config(
                        "mixture needs matching nonempty weights/components".into(),
                    ));
                }
                if weights.iter().any(|w| !(*w > 0.0)) {
                    return Err(MfgError::Config("mixture weights must be > 0".into()));
                }
                let d = components[0].dim();
                if components.iter().any(|c| c.dim() != d) {
                    return Err(MfgError::Config("mixture components have mixed dims".into()));
                }
                for c in components {
                    c.validate()?;
                }
                Ok(())
            }
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            M0Spec::Uniform { support } => (0..support.dim())
                .map(|axis| rng.random_range(support.lo[axis]..support.hi[axis]))
                .collect(),
            M0Spec::TruncatedGaussian { center, sigma, support } => loop {
                let candidate: Vec<f64> = center
                    .iter()
                    .map(|c| c + sigma * gaussian(rng))
                    .collect();
                if support.contains(&candidate) {
                    break candidate;
                }
            },
            M0Spec::Mixture { weights, components } => {
                let total: f64 = weights.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                for (w, c) in weights.iter().zip(components) {
                    if pick < *w {
                        return c.draw(rng);
                    }
                    pick -= w;
                }
                components.last().unwrap().draw(rng)
            }
        }
    }
}

/// Box-Muller standard normal.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Draws N i.i.d. samples from the initial density; deterministic per seed.
pub fn sample_initial(spec: &M0Spec, n: usize, seed: u64) -> Result<ParticleMeasure> {
    spec.validate()?;
    if n == 0 {
        return Err(MfgError::Config("particle count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<Vec<f64>> = (0..n).map(|_| spec.draw(&mut rng)).collect();
    let mut m = ParticleMeasure::new(positions, 0.0, format!("m0(seed={seed})"))?;
    m.seed = Some(seed);
    Ok(m)
}

/// Transports every particle through the characteristic flow of `u` to
/// `t_target`. Particle count and weights are untouched; an excursion error
/// carries the offending particle index.
pub fn push_forward(
    m: &ParticleMeasure,
    u: &ValueFunction,
    field: &BField,
    t_target: f64,
    substeps: usize,
) -> Result<ParticleMeasure> {
    let moved: Vec<std::result::Result<Vec<f64>, MfgError>> = m
        .positions
        .par_iter()
        .enumerate()
        .map(|(idx, p)| {
            feedback_flow(p, u, field, m.time_label, t_target, substeps)
                .map(|traj| traj.final_state().to_vec())
                .map_err(|e| match e {
                    MfgError::Excursion { exit_time, .. } => MfgError::Excursion {
                        exit_time,
                        particle: Some(idx),
                    },
                    other => other,
                })
        })
        .collect();
    let mut positions = Vec::with_capacity(m.len());
    for r in moved {
        positions.push(r?);
    }
    let mut out = ParticleMeasure::new(positions, t_target, m.provenance.clone())?;
    out.seed = m.seed;
    Ok(out)
}

/// Transports the cloud once over [t_label, horizon] and records a snapshot
/// at every requested time (times must be increasing, starting at the
/// cloud's label).
pub fn push_forward_path(
    m0: &ParticleMeasure,
    u: &ValueFunction,
    field: &BField,
    record_times: &[f64],
    substeps: usize,
) -> Result<Vec<ParticleMeasure>> {
    if record_times.is_empty() {
        return Err(MfgError::Contract("record_times must be nonempty".into()));
    }
    let t_end = *record_times.last().unwrap();
    let paths: Vec<std::result::Result<Vec<Vec<f64>>, MfgError>> = m0
        .positions
        .par_iter()
        .enumerate()
        .map(|(idx, p)| {
            let traj = feedback_flow(p, u, field, m0.time_label, t_end, substeps).map_err(
                |e| match e {
                    MfgError::Excursion { exit_time, .. } => MfgError::Excursion {
                        exit_time,
                        particle: Some(idx),
                    },
                    other => other,
                },
            )?;
            // sample the trajectory at the requested times
            Ok(record_times
                .iter()
                .map(|&t| sample_trajectory(&traj.times, &traj.states, t))
                .collect())
        })
        .collect();
    let mut per_particle = Vec::with_capacity(m0.len());
    for r in paths {
        per_particle.push(r?);
    }
    record_times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let positions: Vec<Vec<f64>> =
                per_particle.iter().map(|snaps| snaps[k].clone()).collect();
            let mut m = ParticleMeasure::new(positions, t, m0.provenance.clone())?;
            m.seed = m0.seed;
            Ok(m)
        })
        .collect()
}

fn sample_trajectory(times: &[f64], states: &[Vec<f64>], t: f64) -> Vec<f64> {
    if t <= times[0] {
        return states[0].clone();
    }
    if t >= *times.last().unwrap() {
        return states.last().unwrap().clone();
    }
    let mut lo = 0usize;
    let mut hi = times.len() - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if times[mid] <= t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let w = (t - times[lo]) / (times[hi] - times[lo]);
    states[lo]
        .iter()
        .zip(&states[hi])
        .map(|(a, b)| (1.0 - w) * a + w * b)
        .collect()
}

/// Bounded density view of a cloud.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub grid: SpaceGrid,
    pub values: Vec<f64>,
    /// Quadrature of `values` over the grid (re-normalized to 1).
    pub total: f64,
    /// Set when the bandwidth undercuts the grid spacing.
    pub undersmoothed: bool,
}

impl DensityGrid {
    pub fn sup(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// CSV export `x1..xd,value`.
    pub fn to_csv(&self) -> String {
        let d = self.grid.dim();
        let mut header: Vec<String> = (0..d).map(|a| format!("x{}", a + 1)).collect();
        header.push("value".into());
        let mut out = header.join(",");
        out.push('\n');
        let mut x = vec![0.0; d];
        for (node, v) in self.values.iter().enumerate() {
            self.grid.node_position_into(node, &mut x);
            for (k, c) in x.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                out.push_str(&crate::csvio::fmt_float(*c));
            }
            out.push(',');
            out.push_str(&crate::csvio::fmt_float(*v));
            out.push('\n');
        }
        out
    }
}

/// Volume of the unit-ball integral of the bump kernel (1-|y|^2)^3.
fn bump_norm_constant(d: usize) -> Result<f64> {
    match d {
        1 => Ok(32.0 / 35.0),
        2 => Ok(std::f64::consts::PI / 4.0),
        3 => Ok(64.0 * std::f64::consts::PI / 315.0),
        other => Err(MfgError::Config(format!(
            "bump kernel normalization implemented for d <= 3, got {other}"
        ))),
    }
}

/// Compactly supported C^2 kernel (1-(r/w)^2)^3 scaled to unit mass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BumpKernel {
    pub width: f64,
}

impl BumpKernel {
    pub fn new(width: f64) -> Result<BumpKernel> {
        if !(width > 0.0) {
            return Err(MfgError::Config(format!("kernel width must be > 0, got {width}")));
        }
        Ok(BumpKernel { width })
    }

    pub fn normalization(&self, d: usize) -> Result<f64> {
        Ok(bump_norm_constant(d)? * self.width.powi(d as i32))
    }

    /// Kernel value at displacement `y` (unit total mass in dimension d).
    pub fn eval(&self, y: &[f64], norm_const: f64) -> f64 {
        let r2: f64 = y.iter().map(|c| (c / self.width) * (c / self.width)).sum();
        if r2 >= 1.0 {
            return 0.0;
        }
        let w = 1.0 - r2;
        w * w * w / norm_const
    }

    /// Gradient of the kernel at displacement `y`.
    pub fn grad(&self, y: &[f64], norm_const: f64, out: &mut [f64]) {
        let r2: f64 = y.iter().map(|c| (c / self.width) * (c / self.width)).sum();
        if r2 >= 1.0 {
            out.fill(0.0);
            return;
        }
        let w = 1.0 - r2;
        let factor = -6.0 * w * w / (self.width * self.width) / norm_const;
        for (slot, c) in out.iter_mut().zip(y) {
            *slot = factor * c;
        }
    }

    pub fn sup(&self, d: usize) -> Result<f64> {
        Ok(1.0 / self.normalization(d)?)
    }

    /// Sampled Lipschitz constant sup |grad rho|.
    pub fn lipschitz(&self, d: usize) -> Result<f64> {
        let norm_const = self.normalization(d)?;
        // |grad| = 6 r (1-r^2)^2 / (w^{d+1} c_d), maximal at r = 1/3... scan.
        let mut sup: f64 = 0.0;
        for k in 0..=1000 {
            let r = k as f64 / 1000.0 * self.width;
            let mut y = vec![0.0; d];
            y[0] = r;
            let mut g = vec![0.0; d];
            self.grad(&y, norm_const, &mut g);
            sup = sup.max(crate::linalg::norm(&g));
        }
        Ok(sup)
    }
}

/// Kernel density estimate on a grid, re-normalized to unit quadrature.
pub fn density_estimate(
    m: &ParticleMeasure,
    grid: &SpaceGrid,
    bandwidth: f64,
) -> Result<DensityGrid> {
    let kernel = BumpKernel::new(bandwidth)?;
    let d = m.dim();
    if grid.dim() != d {
        return Err(MfgError::Contract("grid dimension != particle dimension".into()));
    }
    let norm_const = kernel.normalization(d)?;
    let undersmoothed = bandwidth < grid.min_dx();
    let nodes = grid.node_count();
    let mut values = vec![0.0; nodes];
    let weight = m.weight();
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    for (node, slot) in values.iter_mut().enumerate() {
        grid.node_position_into(node, &mut x);
        let mut acc = 0.0;
        for p in m.positions() {
            for axis in 0..d {
                y[axis] = x[axis] - p[axis];
            }
            acc += kernel.eval(&y, norm_const);
        }
        *slot = acc * weight;
    }
    let cell: f64 = (0..d).map(|a| grid.dx(a)).product();
    let raw_total: f64 = values.iter().sum::<f64>() * cell;
    if raw_total <= 0.0 {
        return Err(MfgError::Contract(
            "density mass fell entirely outside the grid".into(),
        ));
    }
    for v in &mut values {
        *v /= raw_total;
    }
    Ok(DensityGrid {
        grid: grid.clone(),
        values,
        total: 1.0,
        undersmoothed,
    })
}

/// Kantorovich-Rubinstein distance between equal-weight clouds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct D1 {
    pub value: f64,
    /// True when clouds were deterministically subsampled before the exact
    /// assignment (N above the exact-path cap, or unequal counts).
    pub subsampled: bool,
}

fn stride_subsample(m: &ParticleMeasure, k: usize) -> Vec<&[f64]> {
    let n = m.len();
    (0..k)
        .map(|i| m.positions()[i * n / k].as_slice())
        .collect()
}

/// Exact optimal-assignment d_1 for clouds up to `n_exact` particles;
/// deterministic stride subsampling above (flagged in the result).
pub fn d1_distance(a: &ParticleMeasure, b: &ParticleMeasure, n_exact: usize) -> Result<D1> {
    if a.is_empty() || b.is_empty() {
        return Err(MfgError::Contract("d1 of an empty measure".into()));
    }
    if a.dim() != b.dim() {
        return Err(MfgError::Contract("d1 requires matching dimensions".into()));
    }
    let k = a.len().min(b.len()).min(n_exact.max(1));
    let subsampled = k < a.len() || k < b.len();
    let pa = stride_subsample(a, k);
    let pb = stride_subsample(b, k);
    let mut cost = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            cost[i * k + j] = dist(pa[i], pb[j]);
        }
    }
    let (_, total) = min_cost_assignment(&cost, k);
    Ok(D1 {
        value: total / k as f64,
        subsampled,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TimeLipschitzReport {
    /// max over consecutive snapshots of d1(m(t), m(s)) / |t - s|.
    pub max_ratio: f64,
    /// Conservative certificate Lip_x(u) * max(1, C^2) * sqrt(d) built from
    /// the value function's Lipschitz estimate and the field's C^2 bound.
    pub bound: f64,
    pub within_bound: bool,
}

/// Empirical time-Lipschitz ratio of an evolution against the certificate.
/// Snapshots must come from one evolution (matching provenance).
pub fn time_lipschitz_report(
    snapshots: &[ParticleMeasure],
    u: &ValueFunction,
    field: &BField,
    n_exact: usize,
    tolerance: f64,
) -> Result<TimeLipschitzReport> {
    if snapshots.len() < 2 {
        return Err(MfgError::Contract(
            "time-Lipschitz report needs at least two snapshots".into(),
        ));
    }
    let tag = &snapshots[0].provenance;
    if snapshots.iter().any(|m| &m.provenance != tag) {
        return Err(MfgError::Contract(
            "snapshots come from different evolutions (provenance mismatch)".into(),
        ));
    }
    let mut max_ratio: f64 = 0.0;
    for w in snapshots.windows(2) {
        let dt = (w[1].time_label - w[0].time_label).abs();
        if dt < 1e-14 {
            continue;
        }
        let d1 = d1_distance(&w[0], &w[1], n_exact)?.value;
        max_ratio = max_ratio.max(d1 / dt);
    }
    let d = field.dim() as f64;
    let bound = u.lipschitz_x * field.c2_bound.powi(2).max(1.0) * d.sqrt();
    Ok(TimeLipschitzReport {
        max_ratio,
        bound,
        within_bound: max_ratio <= bound + tolerance,
    })
}

/// Weak-form continuity-equation residual along a snapshot curve:
/// max over interior snapshots and test functions of
/// | d/dt int phi dm + int D_B phi . D_B u dm |.
pub fn continuity_weak_residual(
    snapshots: &[ParticleMeasure],
    u: &ValueFunction,
    field: &BField,
    tests: &[ExprCost],
) -> Result<f64> {
    if snapshots.len() < 3 {
        return Err(MfgError::Contract(
            "weak-form residual needs at least three snapshots".into(),
        ));
    }
    let d = field.dim();
    let mut worst = 0.0f64;
    let mut grad = vec![0.0; d];
    for phi in tests {
        let masses: Vec<f64> = snapshots
            .iter()
            .map(|m| m.integrate_against(|x| phi.value(x, 0.0)))
            .collect();
        for k in 1..snapshots.len() - 1 {
            let dt = snapshots[k + 1].time_label - snapshots[k - 1].time_label;
            let ddt = (masses[k + 1] - masses[k - 1]) / dt;
            let t = snapshots[k].time_label;
            let mut flux = 0.0;
            for p in snapshots[k].positions() {
                phi.grad_x(p, t, &mut grad);
                let dbphi = b_gradient_exact(&grad, field, p);
                let (dbu, _) = u.numeric_b_gradient(field, p, t)?;
                flux += dbphi
                    .components
                    .iter()
                    .zip(&dbu.components)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            flux /= snapshots[k].len() as f64;
            worst = worst.max((ddt + flux).abs());
        }
    }
    Ok(worst)
}
