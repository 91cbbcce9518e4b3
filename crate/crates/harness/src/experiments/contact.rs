//! Contact process with fast voting against the logistic limit
//! `du/dt = beta u (1 - u) - u`, with `lambda = beta / p(0|v1)`.

use serde::Deserialize;
use serde_json::json;
use torus_games::coalescence::estimate_bd_probs;
use torus_games::limits::{integrate_ode, ContactReaction, OdeSpec};
use torus_games::particle_sim::{run_contact_fast_voting, ContactConfig};
use torus_games::rng;
use torus_games::{Kernel, TorusGeom};

use super::Outcome;
use crate::common::{default_kernel, grid, mean_se, replicates, Clock, EstimateSettings};
use crate::report::{Check, Table};
use crate::spec::ExperimentSpec;
use crate::HarnessError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    d: usize,
    side: usize,
    w: f64,
    /// Two-walker non-coalescence probability; estimated when absent.
    #[serde(default)]
    p01: Option<f64>,
    #[serde(default)]
    estimate: EstimateSettings,
    #[serde(default)]
    kernel: Option<Kernel>,
    cases: Vec<Case>,
    #[serde(default = "default_burn_in")]
    burn_in_fraction: f64,
    /// Extinction horizon as a multiple of the ODE time to reach `1/N`.
    #[serde(default = "default_factor")]
    horizon_factor: f64,
    thresholds: Thresholds,
}

fn default_burn_in() -> f64 {
    0.2
}

fn default_factor() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Mode {
    QuasiStationary,
    Extinction,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Case {
    name: String,
    beta: f64,
    density0: f64,
    mode: Mode,
    /// ODE-time horizon; required for quasi-stationary cases.
    #[serde(default)]
    horizon: Option<f64>,
    #[serde(default = "default_step")]
    sample_step: f64,
    /// Replicates for this case; defaults to the spec's count.
    #[serde(default)]
    replicates: Option<u64>,
}

fn default_step() -> f64 {
    0.25
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Thresholds {
    density_tolerance: f64,
    extinction_fraction: f64,
}

/// ODE time for the occupied density to fall from `u0` to `target`.
fn hitting_time(beta: f64, u0: f64, target: f64) -> Result<f64, HarnessError> {
    let reaction = ContactReaction { beta };
    let mut t_end = 8.0;
    for _ in 0..20 {
        let step = t_end / 4000.0;
        let mut s = OdeSpec::new(&reaction, vec![u0, 1.0 - u0], t_end);
        s.sample_times = grid(t_end, step);
        let tr = integrate_ode(&s)?;
        if let Some(i) = tr.states.iter().position(|u| u[0] <= target) {
            return Ok(tr.times[i]);
        }
        t_end *= 2.0;
    }
    Err(HarnessError::InvalidParameters {
        kind: "contact_fast_voting".into(),
        detail: format!("density does not reach {target} for beta = {beta}"),
    })
}

pub(crate) fn run(spec: &ExperimentSpec) -> Result<Outcome, HarnessError> {
    let p: Params = spec.parameters()?;
    if p.cases.is_empty() {
        return Err(spec.invalid("no cases"));
    }
    if !(0.0..1.0).contains(&p.burn_in_fraction) || !(p.horizon_factor > 0.0) {
        return Err(spec.invalid("bad burn_in_fraction or horizon_factor"));
    }
    let kernel = default_kernel(p.kernel.clone(), p.d)?;
    let geometry = TorusGeom::new(p.side, p.d)?;
    let (p01, p01_source) = match p.p01 {
        Some(v) => (v, "given"),
        None => {
            let e = estimate_bd_probs(
                &kernel,
                p.estimate.horizon,
                p.estimate.replicates,
                rng::derive_seed(spec.seed, &[rng::tag("reaction")]),
            )?;
            (e.p01.value, "estimated")
        }
    };
    let clock = Clock { w: p.w };
    let sites = geometry.sites() as f64;

    let mut runs_table = Table::new(
        "runs",
        &[
            "case",
            "replicate",
            "seed",
            "window_mean_density",
            "extinction_ode_time",
            "extinct",
        ],
    );
    let mut traj_table = Table::new(
        "trajectories",
        &["case", "replicate", "ode_time", "process_time", "density"],
    );
    let mut case_table = Table::new(
        "cases",
        &[
            "case",
            "beta",
            "lambda",
            "fixed_point",
            "horizon",
            "mean_density",
            "std_error",
            "extinct_fraction",
        ],
    );
    let mut checks = Vec::new();
    let mut values = Vec::new();
    let mut windows = Vec::new();
    for (ci, c) in p.cases.iter().enumerate() {
        if !(c.beta > 0.0) || !(0.0..=1.0).contains(&c.density0) || !(c.sample_step > 0.0) {
            return Err(spec.invalid(format!(
                "case {}: bad beta, density0 or sample_step",
                c.name
            )));
        }
        let lambda = c.beta / p01;
        let rho = ContactReaction { beta: c.beta }.fixed_point();
        let horizon = match (c.mode, c.horizon) {
            (_, Some(h)) if h > 0.0 => h,
            (Mode::Extinction, None) => {
                p.horizon_factor * hitting_time(c.beta, c.density0, 1.0 / sites)?
            }
            _ => return Err(spec.invalid(format!("case {}: horizon required", c.name))),
        };
        let times = grid(horizon, c.sample_step);
        let burn = p.burn_in_fraction * horizon;
        let window: Vec<usize> = (0..times.len()).filter(|&i| times[i] >= burn).collect();
        let config = ContactConfig {
            geometry,
            kernel: kernel.clone(),
            lambda,
            w: p.w,
            density: c.density0,
            t_end: clock.process(horizon),
            record_times: clock.process_all(&times),
            seed: rng::derive_seed(spec.seed, &[rng::tag("contact-case"), ci as u64]),
        };
        let reps = c.replicates.unwrap_or(spec.replicates);
        if reps == 0 {
            return Err(spec.invalid(format!("case {}: no replicates", c.name)));
        }
        let runs = replicates(reps, |r| Ok(run_contact_fast_voting(&config, r)?))?;
        let mut means = Vec::new();
        let mut extinct = 0u64;
        for (r, tr) in runs.iter().enumerate() {
            let dens = tr.density();
            let m = window.iter().map(|&i| dens[i]).sum::<f64>() / window.len() as f64;
            means.push(m);
            let ext = tr.extinction_time.map(|t| t * p.w);
            extinct += u64::from(ext.is_some());
            runs_table.push([
                c.name.clone(),
                r.to_string(),
                tr.seed.to_string(),
                m.to_string(),
                ext.map_or(String::new(), |t| t.to_string()),
                ext.is_some().to_string(),
            ]);
            for (t, d) in times.iter().zip(&dens) {
                traj_table.push([
                    c.name.clone(),
                    r.to_string(),
                    t.to_string(),
                    clock.process(*t).to_string(),
                    d.to_string(),
                ]);
            }
        }
        let (mean, se) = mean_se(&means);
        let frac = extinct as f64 / reps as f64;
        case_table.push([
            c.name.clone(),
            c.beta.to_string(),
            lambda.to_string(),
            rho.to_string(),
            horizon.to_string(),
            mean.to_string(),
            se.to_string(),
            frac.to_string(),
        ]);
        match c.mode {
            Mode::QuasiStationary => {
                windows.push(format!(
                    "{}: discard ode_time < {burn} ({}% of {horizon}), average the rest",
                    c.name,
                    p.burn_in_fraction * 100.0
                ));
                checks.push(Check::at_most(
                    &format!("{}_density_error", c.name),
                    (mean - rho).abs(),
                    p.thresholds.density_tolerance,
                    format!("|{mean:.4} - rho {rho:.4}| over {reps} runs"),
                ));
            }
            Mode::Extinction => checks.push(Check::at_least(
                &format!("{}_extinction_fraction", c.name),
                frac,
                p.thresholds.extinction_fraction,
                format!("{extinct} of {reps} runs extinct by ode_time {horizon:.3}"),
            )),
        }
        values.push(json!({
            "case": c.name, "beta": c.beta, "lambda": lambda, "fixed_point": rho,
            "horizon": horizon, "mean_density": mean, "std_error": se, "extinct_fraction": frac,
        }));
    }
    Ok(Outcome {
        tables: vec![case_table, runs_table, traj_table],
        checks,
        values: json!({ "p01": p01, "p01_source": p01_source, "cases": values }),
        clock: Clock::LABEL.into(),
        window: (!windows.is_empty()).then(|| windows.join("; ")),
    })
}
