//! Stochastic Galerkin finite element solver for steady incompressible
//! Navier–Stokes flow with a lognormal random viscosity.

pub mod cli;
pub mod config;
pub mod error;
pub mod fem;
pub mod galerkin;
pub mod gpc;
pub mod krylov;
pub mod mesh;
pub mod nonlinear;
pub mod postproc;
pub mod precond;
pub mod random_field;
pub mod sampling;
pub mod sparse;

pub use error::{Error, Result};
