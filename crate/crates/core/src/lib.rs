//! Simulation and stability analysis of a viscous incompressible fluid in a
//! box coupled, through its flat top face, to an elastic plate that moves
//! only in-plane.

pub mod attractor;
pub mod certify;
pub mod driver;
pub mod error;
pub mod grid;
pub mod io;
pub mod krylov;
pub mod plate;
pub mod sparse;
pub mod spectral;
pub mod state;
pub mod stepper;
pub mod stokes;

pub use error::{FpiError, Result};
pub use grid::{build_grid, Grid, GridSpec};
