//! Solvers for first-order mean field games whose dynamics are driven by a
//! lower-triangular, possibly degenerate matrix field B(x) (Grushin and
//! Heisenberg type models).
//!
//! The crate is organized around the pipeline
//!
//! 1. [`bfield`] — the dynamics matrix, Hamiltonian and B-calculus;
//! 2. [`hjb`] — backward semi-Lagrangian solve of the Hamilton-Jacobi
//!    equation for a frozen population;
//! 3. [`control`] — Pontryagin shooting for optimal trajectories, an
//!    independent direct-search oracle, and the characteristic flow;
//! 4. [`measure`] — particle representation of the population, push-forward
//!    through the flow, densities and the Kantorovich-Rubinstein distance;
//! 5. [`coupling`] — the regularizing cost couplings F and G and the
//!    scenario ingredients;
//! 6. [`mfg`] — the damped fixed-point driver for the full system and the
//!    verification / stability harnesses.

pub mod bfield;
pub mod control;
pub mod coupling;
pub mod csvio;
pub mod error;
pub mod expr;
pub mod fields;
pub mod grid;
pub mod hjb;
pub mod linalg;
pub mod measure;
pub mod mfg;
pub mod scenario;

mod assignment;

pub use error::{MfgError, Result};
