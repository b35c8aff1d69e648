//! Becker-Doring cluster kinetics near equilibrium.
//!
//! [`coeffs`] holds the rate families, [`equilibrium`] the detailed-balance
//! states and their moments, [`spectral`] the linearised operator with its gap
//! estimates, and [`dynamics`] the nonlinear and linearised time evolution.

pub mod coeffs;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
mod linalg;
pub mod series;
pub mod spectral;
pub mod stats;

pub use coeffs::{CoefficientModel, ModelKind, ModelSpec};
pub use equilibrium::{equilibrium_profile, mass_of_z, z_of_mass, EquilibriumProfile};
pub use dynamics::{bd_rhs, integrate, Controls, StateVector, Trajectory};
pub use error::{Error, Result};
