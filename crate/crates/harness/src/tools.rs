//! The `simulate` and `coalesce` commands, usable without an experiment
//! spec.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use torus_games::coalescence::{
    estimate_bd_probs, estimate_db_probs, Advisory, CoalescenceEstimate,
};
use torus_games::particle_sim::{run_sim, SimConfig};
use torus_games::Kernel;

use crate::common::replicates;
use crate::report::{config_hash, Table, SCHEMA_VERSION};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub config_id: String,
    pub config_hash: String,
    pub replicates: u64,
    pub replicate_seeds: Vec<u64>,
    pub wall_seconds: f64,
    pub clock: String,
}

/// Runs `reps` replicates of a configuration. The table has columns
/// `time, U_1..U_n, replicate, seed`, with `time` in process time.
pub fn simulate(config: &SimConfig, reps: u64) -> Result<(Table, RunManifest), HarnessError> {
    let start = Instant::now();
    config.validate()?;
    let n = config.game.n();
    let mut header = vec!["time".to_string()];
    header.extend((1..=n).map(|k| format!("U_{k}")));
    header.extend(["replicate".to_string(), "seed".to_string()]);
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut table = Table::new("trajectories", &refs);
    let runs = replicates(reps, |r| Ok(run_sim(config, r)?))?;
    let mut seeds = Vec::with_capacity(runs.len());
    for (r, tr) in runs.iter().enumerate() {
        seeds.push(tr.seed);
        for (t, u) in tr.times.iter().zip(tr.densities()) {
            let mut row = vec![t.to_string()];
            row.extend(u.iter().map(|v| v.to_string()));
            row.extend([r.to_string(), tr.seed.to_string()]);
            table.push(row);
        }
    }
    let manifest = RunManifest {
        tool: "torus-games".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        schema_version: SCHEMA_VERSION,
        config_id: config.id.clone(),
        config_hash: config_hash(&serde_json::to_value(config)?),
        replicates: reps,
        replicate_seeds: seeds,
        wall_seconds: start.elapsed().as_secs_f64(),
        clock: "time is process time; ode_time = time * w".into(),
    };
    Ok((table, manifest))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoalesceRules {
    BirthDeath,
    DeathBirth,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalesceOutput {
    pub estimates: Vec<CoalescenceEstimate>,
    pub kappa: f64,
    pub sigma2: f64,
    pub advisories: Vec<Advisory>,
}

/// Coalescence estimates as exported by the `coalesce` command.
pub fn coalesce(
    kernel: &Kernel,
    horizon: f64,
    reps: u64,
    seed: u64,
    rules: CoalesceRules,
) -> Result<CoalesceOutput, HarnessError> {
    let mut estimates = Vec::new();
    let mut advisories = Vec::new();
    if rules != CoalesceRules::DeathBirth {
        let e = estimate_bd_probs(kernel, horizon, reps, seed)?;
        estimates.extend([e.p01, e.p1, e.p2, e.p2_identity]);
        advisories.extend(e.advisories);
    }
    if rules != CoalesceRules::BirthDeath {
        let e = estimate_db_probs(kernel, horizon, reps, seed)?;
        estimates.extend([e.p12, e.pbar1, e.pbar2, e.pbar2_identity]);
        advisories.extend(e.advisories);
    }
    Ok(CoalesceOutput {
        estimates,
        kappa: kernel.kappa(),
        sigma2: kernel.sigma2(),
        advisories,
    })
}
