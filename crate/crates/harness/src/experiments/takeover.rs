//! Two-strategy outcomes by cubic class: takeover in S3/S4 and the basin
//! of attraction in S2.

use serde::Deserialize;
use serde_json::json;
use torus_games::games::{classify_2x2, CubicCase};
use torus_games::limits::{integrate_ode, GameReaction, OdeSpec};
use torus_games::particle_sim::{run_sim, InitialCondition, SimConfig};
use torus_games::rng;
use torus_games::{GameMatrix, Kernel, TorusGeom, UpdateRule};

use super::Outcome;
use crate::common::{
    default_kernel, replicates, resolve_params, Clock, EstimateSettings, Probabilities,
};
use crate::report::{Check, Table};
use crate::spec::ExperimentSpec;
use crate::HarnessError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    d: usize,
    side: usize,
    w: f64,
    rule: UpdateRule,
    cases: Vec<Case>,
    #[serde(default)]
    kernel: Option<Kernel>,
    #[serde(default)]
    reaction: Option<Probabilities>,
    #[serde(default)]
    estimate: EstimateSettings,
    thresholds: Thresholds,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Case {
    name: String,
    game: GameMatrix,
    /// Expected cubic class of the game under the reaction parameters.
    expect: CubicCase,
    /// Initial density of strategy 1.
    u0: f64,
    /// ODE-time horizon.
    horizon: f64,
    outcome: OutcomeRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum OutcomeRule {
    /// The predicted strategy occupies every site at the horizon.
    Fixation,
    /// The predicted strategy holds more than half the sites at the horizon.
    Majority,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Thresholds {
    success_fraction: f64,
}

pub(crate) fn run(spec: &ExperimentSpec) -> Result<Outcome, HarnessError> {
    let p: Params = spec.parameters()?;
    if p.cases.is_empty() || spec.replicates == 0 {
        return Err(spec.invalid("need at least one case and one replicate"));
    }
    let kernel = default_kernel(p.kernel.clone(), p.d)?;
    let geometry = TorusGeom::new(p.side, p.d)?;
    let clock = Clock { w: p.w };
    let (params, source) = resolve_params(
        p.rule,
        &kernel,
        p.reaction.as_ref(),
        p.estimate,
        rng::derive_seed(spec.seed, &[rng::tag("reaction")]),
    )?;
    let mut classes = Vec::new();
    for c in &p.cases {
        if c.game.n() != 2 {
            return Err(spec.invalid(format!("case {} is not a 2x2 game", c.name)));
        }
        if !(0.0..=1.0).contains(&c.u0) || !(c.horizon > 0.0) {
            return Err(spec.invalid(format!("case {}: bad u0 or horizon", c.name)));
        }
        let class = classify_2x2(&c.game, &params)?;
        if class.case != c.expect {
            return Err(spec.invalid(format!(
                "case {} classifies as {:?}, spec expects {:?}",
                c.name, class.case, c.expect
            )));
        }
        classes.push(class);
    }

    let mut runs_table = Table::new(
        "runs",
        &[
            "case",
            "replicate",
            "seed",
            "final_ode_time",
            "final_U_1",
            "predicted_winner",
            "success",
        ],
    );
    let mut case_table = Table::new(
        "cases",
        &[
            "case",
            "class",
            "ubar",
            "u0",
            "ode_final_u_1",
            "predicted_winner",
            "successes",
            "replicates",
            "fraction",
        ],
    );
    let mut checks = Vec::new();
    let mut values = Vec::new();
    for (ci, (c, class)) in p.cases.iter().zip(&classes).enumerate() {
        let reaction = GameReaction::new(c.game.clone(), params);
        let ode = integrate_ode(&OdeSpec::new(&reaction, vec![c.u0, 1.0 - c.u0], c.horizon))?;
        let u_end = ode.last()[0];
        let winner: u8 = match class.case {
            CubicCase::S4 => 0,
            CubicCase::S3 => 1,
            _ if u_end > 0.5 => 0,
            _ => 1,
        };
        let config = SimConfig {
            id: format!("takeover-{}", c.name),
            geometry,
            kernel: kernel.clone(),
            game: c.game.clone(),
            rule: p.rule,
            w: p.w,
            mu: 0.0,
            t_end: clock.process(c.horizon),
            record_times: vec![clock.process(c.horizon)],
            seed: rng::derive_seed(spec.seed, &[rng::tag("takeover"), ci as u64]),
            initial: InitialCondition::Product {
                densities: vec![c.u0, 1.0 - c.u0],
            },
        };
        config.validate()?;
        let runs = replicates(spec.replicates, |r| Ok(run_sim(&config, r)?))?;
        let mut successes = 0u64;
        for (r, tr) in runs.iter().enumerate() {
            let counts = tr.counts.last().expect("one record");
            let held = counts[usize::from(winner)];
            let ok = match c.outcome {
                OutcomeRule::Fixation => held == tr.sites,
                OutcomeRule::Majority => 2 * held > tr.sites,
            };
            successes += u64::from(ok);
            runs_table.push([
                c.name.clone(),
                r.to_string(),
                tr.seed.to_string(),
                c.horizon.to_string(),
                (counts[0] as f64 / tr.sites as f64).to_string(),
                (winner + 1).to_string(),
                ok.to_string(),
            ]);
        }
        let fraction = successes as f64 / spec.replicates as f64;
        case_table.push([
            c.name.clone(),
            format!("{:?}", class.case),
            class.ubar.map_or(String::new(), |u| u.to_string()),
            c.u0.to_string(),
            u_end.to_string(),
            (winner + 1).to_string(),
            successes.to_string(),
            spec.replicates.to_string(),
            fraction.to_string(),
        ]);
        let what = match c.outcome {
            OutcomeRule::Fixation => "fixation",
            OutcomeRule::Majority => "majority",
        };
        checks.push(Check::at_least(
            &format!("{}_{what}_fraction", c.name),
            fraction,
            p.thresholds.success_fraction,
            format!(
                "strategy {} {what} in {successes} of {} runs, class {:?}",
                winner + 1,
                spec.replicates,
                class.case
            ),
        ));
        values.push(json!({
            "case": c.name, "class": class, "ode_final_u1": u_end,
            "predicted_winner": winner + 1, "fraction": fraction,
        }));
    }
    Ok(Outcome {
        tables: vec![case_table, runs_table],
        checks,
        values: json!({ "reaction_params": params, "reaction_source": source, "cases": values }),
        clock: Clock::LABEL.into(),
        window: None,
    })
}
