//! Discretizations of kinetic Langevin dynamics written in one common form,
//! with exact Gaussian analytics, Lyapunov and stability constants, and
//! Monte-Carlo probes of drift, minorization and geometric convergence.

pub mod cli;
pub mod convergence;
pub mod error;
pub mod framework;
pub mod gaussian;
pub mod lyapunov;
pub mod potential;
pub mod rng;
pub mod schemes;
pub mod stability;

pub use error::{Error, Result};
pub use framework::{GeneralScheme, State, TrajectoryConfig};
