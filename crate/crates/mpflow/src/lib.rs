//! Finite-element solver for incompressible dispersed multiphase flow on
//! quadrilateral meshes. The core time integrator is a segregated
//! pressure-correction scheme with implicit diffusion, explicit convection
//! and explicit interphase drag; a monolithic integrator is included as a
//! reference for comparison runs.

pub mod assembly;
pub mod cases;
pub mod constraints;
pub mod diagnostics;
pub mod error;
pub mod mesh;
pub mod monolithic;
pub mod norms;
pub mod space;
pub mod transport;
pub mod vtk;
pub mod quadrature;
pub mod reference;
pub mod scheme;
pub mod solvers;
pub mod sparse;

pub use error::{Error, Result};
