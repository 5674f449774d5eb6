//! Scenario configuration: the serializable description of one problem
//! instance (dynamics, couplings, initial density, box, numerical
//! parameters), the built-in scenario library, and the resolved runtime
//! objects shared by the solvers.

use crate::bfield::BField;
use crate::coupling::{CoupledRunningCost, CoupledTerminalCost, CouplingSpec, MeasureCurve};
use crate::error::{MfgError, Result};
use crate::expr::Expr;
use crate::grid::{BoxDomain, SpaceGrid};
use crate::hjb::{solve_hjb, HjbProblem, HjbScheme, ValueFunction};
use crate::measure::{push_forward_path, sample_initial, M0Spec, ParticleMeasure};
use crate::control::ShootingConfig;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BFieldSpec {
    /// Lower-triangular rows: row i holds h_i1 .. h_ii.
    pub entries: Vec<Vec<Expr>>,
    #[serde(default)]
    pub c2_bound: Option<f64>,
}

impl BFieldSpec {
    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn build(&self, domain: BoxDomain) -> Result<BField> {
        BField::new(self.entries.clone(), domain, self.c2_bound)
    }
}

fn default_dt() -> f64 {
    0.0
}
fn default_particles() -> usize {
    1024
}
fn default_seed() -> u64 {
    42
}
fn default_bandwidth() -> f64 {
    0.3
}
fn default_snapshots() -> usize {
    33
}
fn default_bvp_tol() -> f64 {
    1e-9
}
fn default_n_starts() -> usize {
    9
}
fn default_shooting_steps() -> usize {
    200
}
fn default_fp_tol() -> f64 {
    1e-3
}
fn default_theta() -> f64 {
    0.5
}
fn default_max_iter() -> usize {
    50
}
fn default_lattice_points() -> usize {
    11
}
fn default_refine_passes() -> usize {
    2
}
fn default_refine_points() -> usize {
    7
}
fn default_flow_substeps() -> usize {
    2
}
fn default_d1_cap() -> usize {
    512
}
fn default_residual_cap() -> usize {
    128
}
fn default_density_bound() -> f64 {
    0.0
}
fn default_zero() -> f64 {
    0.0
}

/// Numerical parameters of a scenario run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Numerics {
    /// Time horizon T.
    pub horizon: f64,
    /// Target grid spacing (per axis).
    pub dx: f64,
    /// Explicit HJB time step; 0 selects dx / (radius * max(1, |B|)).
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Padding of the computational grid around the scenario box.
    pub padding: f64,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Kernel density bandwidth for exports and density bounds.
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    /// Snapshot count of the measure curve on [0, T] (endpoints included).
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
    #[serde(default = "default_bvp_tol")]
    pub bvp_tol: f64,
    #[serde(default = "default_n_starts")]
    pub n_starts: usize,
    #[serde(default = "default_shooting_steps")]
    pub shooting_steps: usize,
    #[serde(default = "default_fp_tol")]
    pub fp_tol: f64,
    /// Picard damping weight on the new iterate (1 = undamped).
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_lattice_points")]
    pub lattice_points: usize,
    #[serde(default = "default_refine_passes")]
    pub refine_passes: usize,
    #[serde(default = "default_refine_points")]
    pub refine_points: usize,
    /// Control-lattice radius override; 0 selects 2(Lip g + T Lip f).
    #[serde(default = "default_zero")]
    pub lattice_radius: f64,
    /// A-priori optimal-feedback speed for the padding check; 0 = estimate.
    #[serde(default = "default_zero")]
    pub max_char_speed: f64,
    /// RK4 substeps per value-function layer in the characteristic flow.
    #[serde(default = "default_flow_substeps")]
    pub flow_substeps: usize,
    /// Largest cloud solved by exact assignment in d1.
    #[serde(default = "default_d1_cap")]
    pub d1_exact_cap: usize,
    /// d1 subsample cap used for Picard residuals.
    #[serde(default = "default_residual_cap")]
    pub residual_particle_cap: usize,
    /// Expected sup bound of reconstructed densities (0 = unchecked).
    #[serde(default = "default_density_bound")]
    pub density_bound: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            horizon: 1.0,
            dx: 1.0 / 16.0,
            dt: 0.0,
            padding: 1.0,
            particles: default_particles(),
            seed: default_seed(),
            bandwidth: default_bandwidth(),
            snapshots: default_snapshots(),
            bvp_tol: default_bvp_tol(),
            n_starts: default_n_starts(),
            shooting_steps: default_shooting_steps(),
            fp_tol: default_fp_tol(),
            theta: default_theta(),
            max_iter: default_max_iter(),
            lattice_points: default_lattice_points(),
            refine_passes: default_refine_passes(),
            refine_points: default_refine_points(),
            lattice_radius: 0.0,
            max_char_speed: 0.0,
            flow_substeps: default_flow_substeps(),
            d1_exact_cap: default_d1_cap(),
            residual_particle_cap: default_residual_cap(),
            density_bound: default_density_bound(),
        }
    }
}

/// One problem instance, fully serializable as TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub bfield: BFieldSpec,
    pub coupling: CouplingSpec,
    pub m0: M0Spec,
    /// Region of interest; the computational grid pads this box.
    #[serde(rename = "box")]
    pub domain: BoxDomain,
    pub numerics: Numerics,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.domain.dim();
        if self.bfield.dim() != d {
            return Err(MfgError::Config(format!(
                "B-field dimension {} does not match box dimension {d}",
                self.bfield.dim()
            )));
        }
        if self.m0.dim() != d {
            return Err(MfgError::Config(
                "initial density dimension does not match the box".into(),
            ));
        }
        let m0_support = self.m0.support();
        if !(self.domain.contains(&m0_support.lo) && self.domain.contains(&m0_support.hi)) {
            return Err(MfgError::Config(
                "initial density support must lie inside the scenario box".into(),
            ));
        }
        self.coupling.validate(d)?;
        let n = &self.numerics;
        if !(n.horizon > 0.0) {
            return Err(MfgError::Config(format!("horizon must be > 0, got {}", n.horizon)));
        }
        if !(n.dx > 0.0) || !(n.padding > 0.0) {
            return Err(MfgError::Config("dx and padding must be > 0".into()));
        }
        if n.particles == 0 || n.snapshots < 2 {
            return Err(MfgError::Config(
                "particles must be > 0 and snapshots >= 2".into(),
            ));
        }
        if !(0.0 < n.theta && n.theta <= 1.0) {
            return Err(MfgError::Config(format!(
                "damping theta must be in (0, 1], got {}",
                n.theta
            )));
        }
        Ok(())
    }

    pub fn padded_box(&self) -> BoxDomain {
        self.domain.padded(self.numerics.padding)
    }

    pub fn grid(&self) -> Result<SpaceGrid> {
        SpaceGrid::with_spacing(self.padded_box(), self.numerics.dx)
    }

    pub fn build_field(&self) -> Result<BField> {
        self.bfield.build(self.padded_box())
    }

    pub fn hjb_scheme(&self) -> HjbScheme {
        let n = &self.numerics;
        HjbScheme {
            dt: if n.dt > 0.0 { Some(n.dt) } else { None },
            lattice_radius: if n.lattice_radius > 0.0 {
                Some(n.lattice_radius)
            } else {
                None
            },
            lattice_points: n.lattice_points,
            refine_passes: n.refine_passes,
            refine_points: n.refine_points,
        }
    }

    pub fn shooting_config(&self) -> ShootingConfig {
        ShootingConfig {
            bvp_tol: self.numerics.bvp_tol,
            n_starts: self.numerics.n_starts,
            n_steps: self.numerics.shooting_steps,
            ..ShootingConfig::default()
        }
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        let n = self.numerics.snapshots.max(2);
        (0..n)
            .map(|k| self.numerics.horizon * k as f64 / (n - 1) as f64)
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| MfgError::Config(format!("serialization failed: {e}")))
    }

    pub fn from_toml(src: &str) -> Result<ScenarioConfig> {
        let cfg: ScenarioConfig =
            toml::from_str(src).map_err(|e| MfgError::Config(format!("bad scenario: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Resolved runtime objects of a validated scenario.
pub struct ScenarioRuntime {
    pub config: ScenarioConfig,
    pub field: BField,
    pub grid: SpaceGrid,
    pub m0: ParticleMeasure,
    pub snapshot_times: Vec<f64>,
}

impl ScenarioRuntime {
    pub fn new(config: ScenarioConfig) -> Result<ScenarioRuntime> {
        config.validate()?;
        let field = config.build_field()?;
        let grid = config.grid()?;
        let mut m0 = sample_initial(&config.m0, config.numerics.particles, config.numerics.seed)?;
        m0.provenance = format!("{}(seed={})", config.name, config.numerics.seed);
        let snapshot_times = config.snapshot_times();
        Ok(ScenarioRuntime {
            config,
            field,
            grid,
            m0,
            snapshot_times,
        })
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    /// The frozen-at-m0 measure curve (the canonical first Picard iterate
    /// and the curve used by trajectory-level commands).
    pub fn frozen_curve(&self) -> Result<Arc<MeasureCurve>> {
        Ok(Arc::new(MeasureCurve::constant(
            &self.m0,
            self.snapshot_times.clone(),
        )?))
    }

    /// Running and terminal costs for a frozen curve, with the running cost
    /// pre-rendered on the grid.
    pub fn coupled_costs(
        &self,
        curve: &Arc<MeasureCurve>,
    ) -> Result<(CoupledRunningCost, CoupledTerminalCost)> {
        let mut f = CoupledRunningCost::new(&self.config.coupling, Arc::clone(curve), self.dim())?;
        f.prepare_grid_cache(&self.grid)?;
        let mut m_t = curve.terminal().clone();
        m_t.time_label = self.config.numerics.horizon;
        let g = CoupledTerminalCost::new(&self.config.coupling, m_t, self.dim())?;
        Ok((f, g))
    }

    /// Backward HJB solve against a frozen curve.
    pub fn solve_hjb_for(&self, curve: &Arc<MeasureCurve>) -> Result<ValueFunction> {
        let (f, g) = self.coupled_costs(curve)?;
        let problem = HjbProblem {
            field: &self.field,
            f: &f,
            g: &g,
            grid: self.grid.clone(),
            horizon: self.config.numerics.horizon,
            scheme: self.config.hjb_scheme(),
            scenario_box: Some(self.config.domain.clone()),
            max_char_speed: if self.config.numerics.max_char_speed > 0.0 {
                Some(self.config.numerics.max_char_speed)
            } else {
                None
            },
        };
        solve_hjb(&problem)
    }

    /// Pushes m0 through the feedback flow of `u`, recording the snapshot
    /// schedule.
    pub fn transport(&self, u: &ValueFunction) -> Result<Vec<ParticleMeasure>> {
        push_forward_path(
            &self.m0,
            u,
            &self.field,
            &self.snapshot_times,
            self.config.numerics.flow_substeps,
        )
    }
}

fn quadratic_plateau(dim: usize) -> String {
    // 0.25 |x|^2, exact on the grid box, C^2 compactly supported beyond it.
    let sum: Vec<String> = (1..=dim).map(|i| format!("x{i}^2")).collect();
    let s = sum.join("+");
    let (plateau, span) = if dim == 2 { (9.0, 16.0) } else { (12.0, 13.0) };
    format!("0.25*({s})*step5((({s})-{plateau})/{span})")
}

fn scenario_2d(name: &str, entries: Vec<Vec<&str>>, coupled: bool) -> ScenarioConfig {
    let parse_rows = |rows: Vec<Vec<&str>>| -> Vec<Vec<Expr>> {
        rows.into_iter()
            .map(|r| r.into_iter().map(|s| Expr::parse(s).unwrap()).collect())
            .collect()
    };
    let g0 = Expr::parse(&quadratic_plateau(2)).unwrap();
    ScenarioConfig {
        name: name.into(),
        bfield: BFieldSpec {
            entries: parse_rows(entries),
            c2_bound: None,
        },
        coupling: CouplingSpec {
            v: if coupled {
                Expr::parse("0.1*z").unwrap()
            } else {
                Expr::zero()
            },
            rho_width: 0.5,
            g_form: g0,
            g_rho_width: 0.5,
            c2_cert: None,
        },
        m0: M0Spec::TruncatedGaussian {
            center: vec![0.3, 0.0],
            sigma: 0.3,
            support: BoxDomain::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
        },
        domain: BoxDomain::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
        numerics: Numerics::default(),
    }
}

/// The built-in scenario library: identity (h = 1), the two Grushin
/// examples (h = sin x1 and h = x1/sqrt(1+x1^2)), and a bounded
/// Heisenberg-type d = 3 model, each in a decoupled (V = 0) and a
/// weak-coupling variant, plus a crowd-aversion scenario.
pub fn builtin_scenarios() -> Vec<ScenarioConfig> {
    let mut list = Vec::new();
    for (base, h) in [
        ("identity2d", "1"),
        ("grushin-sin", "sin(x1)"),
        ("grushin-sigmoid", "x1/sqrt(1+x1^2)"),
    ] {
        for coupled in [false, true] {
            let name = format!("{base}-{}", if coupled { "coupled" } else { "decoupled" });
            list.push(scenario_2d(&name, vec![vec!["1"], vec!["0", h]], coupled));
        }
    }
    for coupled in [false, true] {
        let name = format!(
            "heisenberg3d-{}",
            if coupled { "coupled" } else { "decoupled" }
        );
        let g0 = Expr::parse(&quadratic_plateau(3)).unwrap();
        let mut numerics = Numerics::default();
        numerics.dx = 1.0 / 8.0;
        numerics.particles = 512;
        // a full product lattice in three control dimensions is costly;
        // a leaner coarse pass with the same refinement depth keeps the
        // effective resolution
        numerics.lattice_points = 7;
        numerics.refine_points = 5;
        list.push(ScenarioConfig {
            name,
            bfield: BFieldSpec {
                entries: vec![
                    vec![Expr::parse("1").unwrap()],
                    vec![Expr::zero(), Expr::parse("1").unwrap()],
                    vec![
                        Expr::parse("-0.5*sin(x2)").unwrap(),
                        Expr::parse("0.5*sin(x1)").unwrap(),
                        Expr::zero(),
                    ],
                ],
                c2_bound: None,
            },
            coupling: CouplingSpec {
                v: if coupled {
                    Expr::parse("0.1*z").unwrap()
                } else {
                    Expr::zero()
                },
                rho_width: 0.6,
                g_form: g0,
                g_rho_width: 0.6,
                c2_cert: None,
            },
            m0: M0Spec::TruncatedGaussian {
                center: vec![0.2, 0.2, 0.0],
                sigma: 0.25,
                support: BoxDomain::new(vec![-1.0; 3], vec![1.0; 3]).unwrap(),
            },
            domain: BoxDomain::new(vec![-1.0; 3], vec![1.0; 3]).unwrap(),
            numerics,
        });
    }
    // crowd aversion: concentrated start, density-averse running cost,
    // terminal coupling reading the final density. The coupling gradients
    // are steep while the cloud is concentrated, so this scenario pads
    // generously.
    let mut crowd = scenario_2d("identity2d-crowd", vec![vec!["1"], vec!["0", "1"]], true);
    crowd.coupling.v = Expr::parse("0.5*z").unwrap();
    crowd.coupling.rho_width = 0.8;
    crowd.coupling.g_form = Expr::parse(&format!("{} + 0.1*z", quadratic_plateau(2))).unwrap();
    crowd.coupling.g_rho_width = 0.8;
    crowd.m0 = M0Spec::TruncatedGaussian {
        center: vec![0.0, 0.0],
        sigma: 0.15,
        support: BoxDomain::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
    };
    crowd.numerics.padding = 3.5;
    crowd.numerics.dx = 1.0 / 8.0;
    list.push(crowd);
    list
}

pub fn builtin(name: &str) -> Option<ScenarioConfig> {
    builtin_scenarios().into_iter().find(|s| s.name == name)
}
