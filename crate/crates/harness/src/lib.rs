//! Experiment runner connecting the particle systems on the torus with
//! their limit equations. Each experiment kind reads a JSON spec, runs
//! seeded replicates and produces a [`Report`] of CSV tables, a summary of
//! pass/fail checks and a manifest.

pub mod common;
pub mod experiments;
pub mod report;
pub mod spec;
pub mod tools;

use thiserror::Error;

pub use report::{Check, Manifest, Relation, Report, Summary, Table};
pub use spec::{ExperimentKind, ExperimentSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid parameters for {kind}: {detail}")]
    InvalidParameters { kind: String, detail: String },
    #[error("{exponent} is outside the regime-2 window: need 2 < exponent < d = {d}")]
    RegimeViolation { exponent: f64, d: usize },
    #[error("1/w = {inv_w} at L = {side} leaves the window L^2 < 1/w < L^d")]
    WindowViolation { inv_w: f64, side: usize },
    #[error(transparent)]
    Kernel(#[from] torus_games::lattice_kernel::KernelError),
    #[error(transparent)]
    Game(#[from] torus_games::games::GameError),
    #[error(transparent)]
    Sim(#[from] torus_games::particle_sim::SimError),
    #[error(transparent)]
    Coalescence(#[from] torus_games::coalescence::CoalescenceError),
    #[error(transparent)]
    Limit(#[from] torus_games::limits::LimitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Runs one experiment to completion.
pub fn run(spec: &ExperimentSpec) -> Result<Report, HarnessError> {
    experiments::run(spec)
}
