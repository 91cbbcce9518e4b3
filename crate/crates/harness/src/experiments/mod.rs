mod census;
mod coalescence_table;
mod contact;
mod regime2;
mod takeover;
mod tarnita;
mod walk_mixing;

use std::time::Instant;

use crate::report::{config_hash, Check, Manifest, Report, Summary, Table, SCHEMA_VERSION};
use crate::spec::{ExperimentKind, ExperimentSpec};
use crate::HarnessError;

/// What an experiment kind hands back before it is packaged as a report.
pub(crate) struct Outcome {
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
    pub values: serde_json::Value,
    pub clock: String,
    pub window: Option<String>,
}

pub(crate) fn run(spec: &ExperimentSpec) -> Result<Report, HarnessError> {
    let start = Instant::now();
    let outcome = match spec.kind {
        ExperimentKind::Regime2Convergence => regime2::run(spec)?,
        ExperimentKind::TarnitaCheck => tarnita::run(spec)?,
        ExperimentKind::Takeover2x2 => takeover::run(spec)?,
        ExperimentKind::CoalescenceTable => coalescence_table::run(spec)?,
        ExperimentKind::ContactFastVoting => contact::run(spec)?,
        ExperimentKind::CensusDecay => census::run(spec)?,
        ExperimentKind::WalkMixing => walk_mixing::run(spec)?,
    };
    let passed = outcome.checks.iter().all(|c| c.passed);
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        kind: spec.kind.to_string(),
        seed: spec.seed,
        replicates: spec.replicates,
        passed,
        checks: outcome.checks,
        values: outcome.values,
        thresholds: spec.thresholds(),
    };
    let mut hashed = spec.clone();
    hashed.output_dir = None;
    let manifest = Manifest {
        tool: "torus-games".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash(&serde_json::to_value(&hashed)?),
        kind: spec.kind.to_string(),
        seed: spec.seed,
        wall_seconds: start.elapsed().as_secs_f64(),
        clock: outcome.clock,
        window: outcome.window,
    };
    Ok(Report {
        tables: outcome.tables,
        summary,
        manifest,
    })
}

/// Rejects `1/w` outside `(L^2, L^d)`.
pub(crate) fn check_window(w: f64, side: usize, d: usize) -> Result<(), HarnessError> {
    let inv = 1.0 / w;
    let l = side as f64;
    if !(inv > l * l && inv < l.powi(d as i32)) {
        return Err(HarnessError::WindowViolation { inv_w: inv, side });
    }
    Ok(())
}
