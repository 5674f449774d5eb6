use thiserror::Error;

/// Error type shared by all solver modules.
#[derive(Debug, Error)]
pub enum MfgError {
    /// A point lies outside the computational domain.
    #[error("point {point:?} is outside the computational domain")]
    OutOfDomain { point: Vec<f64> },

    /// A finite-difference stencil would reach past the grid boundary.
    #[error("stencil at {point:?} reaches past the grid boundary")]
    Stencil { point: Vec<f64> },

    /// A query fell outside the space-time grid of a value function.
    #[error("query ({point:?}, t={time}) is outside the value function grid")]
    OutOfGrid { point: Vec<f64>, time: f64 },

    /// A trajectory left the padded computational box during integration.
    #[error("trajectory left the padded box at s={exit_time}{}", particle.map(|i| format!(" (particle {i})")).unwrap_or_default())]
    Excursion {
        exit_time: f64,
        particle: Option<usize>,
    },

    /// Caller violated an interface contract (mismatched windows, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Scenario or solver configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// The shooting solver failed to converge from every start.
    #[error("shooting did not converge from any of {} starts (best defect {best_defect:.3e})", defect_trace.len())]
    ShootingNonConvergence {
        /// Final defect norm per multistart initialization.
        defect_trace: Vec<f64>,
        best_defect: f64,
    },

    /// C2 certification detected divergence under refinement.
    #[error("C2 certification failed: {0}")]
    Certification(String),

    /// An expression failed to parse or evaluate.
    #[error("expression error: {0}")]
    Expr(String),

    /// Filesystem / serialization problem.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MfgError>;
