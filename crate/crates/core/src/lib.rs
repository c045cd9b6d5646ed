//! Variational data assimilation for the 1D nonlinear shallow water equations.
//!
//! Reconstructs an unknown initial surface height or bathymetry from point observations of
//! the surface by adjoint-based steepest descent, and computes how any scalar response of the
//! reconstruction changes when the observations are perturbed, using second-order adjoints.

pub mod adjoint;
pub mod assimilate;
pub mod domain;
pub mod error;
pub mod hessian;
pub mod io;
pub mod sensitivity;
mod scheme;
pub mod solver;

pub use domain::{Control, ControlKind, Field, Grid, ObsArray, ObservationLayout, ObservationSet, StateTrajectory};
pub use error::{Error, Result};
