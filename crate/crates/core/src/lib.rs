//! Voter-model perturbations on the discrete torus: spatial evolutionary
//! games, their coalescing-walk duals, and the reaction-diffusion limits.

pub mod coalescence;
pub mod games;
pub mod lattice_kernel;
pub mod limits;
pub mod particle_sim;
pub mod rng;

pub use games::{GameMatrix, ReactionParams, UpdateRule};
pub use lattice_kernel::{Kernel, TorusGeom};
