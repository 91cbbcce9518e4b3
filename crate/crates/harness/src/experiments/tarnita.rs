//! Strategy favouring under weak selection with mutation: long-run
//! time-averaged frequencies against the first-order shift
//! `(w/mu) phi_k(1/n, ..., 1/n)`.

use serde::Deserialize;
use serde_json::json;
use torus_games::limits::{equilibrium_shift, GameReaction};
use torus_games::particle_sim::{run_sim, InitialCondition, SimConfig};
use torus_games::rng;
use torus_games::{GameMatrix, Kernel, TorusGeom, UpdateRule};

use super::{check_window, Outcome};
use crate::common::{
    default_kernel, grid, mean_se, replicates, resolve_params, Clock, EstimateSettings,
    Probabilities,
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
    /// Swept values of `mu/w`.
    mu_over_w: Vec<f64>,
    game: GameMatrix,
    rules: Vec<UpdateRule>,
    /// ODE-time horizon of each repetition.
    horizon: f64,
    /// ODE-time spacing of the density samples.
    sample_step: f64,
    #[serde(default = "default_burn_in")]
    burn_in_fraction: f64,
    #[serde(default)]
    kernel: Option<Kernel>,
    #[serde(default)]
    reaction: Option<Probabilities>,
    #[serde(default)]
    estimate: EstimateSettings,
    thresholds: Thresholds,
}

fn default_burn_in() -> f64 {
    0.2
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Thresholds {
    min_mu_over_w: f64,
    sign_fraction: f64,
    ratio_min: f64,
    ratio_max: f64,
    /// For games with no predicted shift: `|mean shift| <= noise_sigmas * se`.
    #[serde(default)]
    noise_sigmas: Option<f64>,
}

const ZERO_PREDICTION: f64 = 1e-12;

pub(crate) fn run(spec: &ExperimentSpec) -> Result<Outcome, HarnessError> {
    let p: Params = spec.parameters()?;
    let n = p.game.n();
    if n < 3 {
        return Err(spec.invalid("tarnita_check needs at least 3 strategies"));
    }
    if p.rules.is_empty() || p.mu_over_w.is_empty() {
        return Err(spec.invalid("rules and mu_over_w must be nonempty"));
    }
    if let Some(m) = p
        .mu_over_w
        .iter()
        .find(|m| !(**m >= p.thresholds.min_mu_over_w))
    {
        return Err(spec.invalid(format!(
            "mu/w = {m} is below the minimum {}",
            p.thresholds.min_mu_over_w
        )));
    }
    if !(0.0..1.0).contains(&p.burn_in_fraction) {
        return Err(spec.invalid("burn_in_fraction must lie in [0, 1)"));
    }
    if !(p.horizon > 0.0 && p.sample_step > 0.0) || spec.replicates == 0 {
        return Err(spec.invalid("horizon, sample_step and replicates must be positive"));
    }
    check_window(p.w, p.side, p.d)?;
    let kernel = default_kernel(p.kernel.clone(), p.d)?;
    let geometry = TorusGeom::new(p.side, p.d)?;
    let clock = Clock { w: p.w };
    let times = grid(p.horizon, p.sample_step);
    let burn = p.burn_in_fraction * p.horizon;
    let window: Vec<usize> = (0..times.len()).filter(|&i| times[i] >= burn).collect();
    let inv_n = 1.0 / n as f64;

    let mut rep_table = Table::new(
        "repetitions",
        &[
            "rule",
            "mu_over_w",
            "replicate",
            "seed",
            "strategy",
            "mean_density",
            "shift",
            "predicted_shift",
            "sign_agrees",
        ],
    );
    let mut prediction_table = Table::new(
        "predictions",
        &[
            "rule",
            "mu_over_w",
            "strategy",
            "phi_uniform",
            "first_order_shift",
            "exact_shift",
            "c2",
            "mean_shift",
            "std_error",
            "ratio",
        ],
    );
    let mut checks = Vec::new();
    let mut values = Vec::new();

    for &rule in &p.rules {
        let (params, source) = resolve_params(
            rule,
            &kernel,
            p.reaction.as_ref(),
            p.estimate,
            rng::derive_seed(spec.seed, &[rng::tag("reaction"), rule as u64]),
        )?;
        let reaction = GameReaction::new(p.game.clone(), params);
        for &m in &p.mu_over_w {
            let shift = equilibrium_shift(&reaction, m)?;
            let predicted: Vec<f64> = shift.first_order.iter().map(|u| u - inv_n).collect();
            let config = SimConfig {
                id: format!("tarnita-{}-{m}", rule.name()),
                geometry,
                kernel: kernel.clone(),
                game: p.game.clone(),
                rule,
                w: p.w,
                mu: m * p.w,
                t_end: clock.process(p.horizon),
                record_times: clock.process_all(&times),
                seed: rng::derive_seed(spec.seed, &[rng::tag("tarnita"), rule as u64, m.to_bits()]),
                initial: InitialCondition::Product {
                    densities: vec![inv_n; n],
                },
            };
            config.validate()?;
            let runs = replicates(spec.replicates, |r| Ok(run_sim(&config, r)?))?;
            let mut shifts = vec![Vec::new(); n];
            let mut agreeing = 0usize;
            for (r, tr) in runs.iter().enumerate() {
                let dens = tr.densities();
                let mut agree = true;
                for k in 0..n {
                    let mean =
                        window.iter().map(|&i| dens[i][k]).sum::<f64>() / window.len() as f64;
                    let s = mean - inv_n;
                    shifts[k].push(s);
                    let ok = predicted[k].abs() <= ZERO_PREDICTION
                        || s.signum() == predicted[k].signum();
                    agree &= ok;
                    rep_table.push([
                        rule.name().to_string(),
                        m.to_string(),
                        r.to_string(),
                        tr.seed.to_string(),
                        (k + 1).to_string(),
                        mean.to_string(),
                        s.to_string(),
                        predicted[k].to_string(),
                        ok.to_string(),
                    ]);
                }
                agreeing += usize::from(agree);
            }
            let fraction = agreeing as f64 / spec.replicates as f64;
            let mut ratios = Vec::new();
            let mut strat = Vec::new();
            for k in 0..n {
                let (ms, se) = mean_se(&shifts[k]);
                let ratio = if predicted[k].abs() > ZERO_PREDICTION {
                    let q = ms / predicted[k];
                    ratios.push(q);
                    Some(q)
                } else {
                    None
                };
                prediction_table.push([
                    rule.name().to_string(),
                    m.to_string(),
                    (k + 1).to_string(),
                    (predicted[k] * m).to_string(),
                    predicted[k].to_string(),
                    (shift.u[k] - inv_n).to_string(),
                    shift.c2.to_string(),
                    ms.to_string(),
                    se.to_string(),
                    ratio.map_or(String::new(), |q| q.to_string()),
                ]);
                strat.push(json!({
                    "strategy": k + 1, "predicted_shift": predicted[k], "mean_shift": ms,
                    "std_error": se, "ratio": ratio,
                    "sign_within_noise": predicted[k].abs() > ZERO_PREDICTION && ms.abs() < 2.0 * se,
                }));
            }
            let label = format!("{}_mu_over_w_{m}", rule.name());
            if ratios.is_empty() {
                let sigmas = p.thresholds.noise_sigmas.ok_or_else(|| {
                    spec.invalid("game has no predicted shift; thresholds.noise_sigmas is required")
                })?;
                let worst = (0..n)
                    .map(|k| {
                        let (ms, se) = mean_se(&shifts[k]);
                        ms.abs() / se.max(f64::MIN_POSITIVE)
                    })
                    .fold(0.0, f64::max);
                checks.push(Check::at_most(
                    &format!("{label}_shift_within_noise"),
                    worst,
                    sigmas,
                    "largest |mean shift| in standard errors".into(),
                ));
            } else {
                let ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
                checks.push(Check::at_least(
                    &format!("{label}_sign_agreement_fraction"),
                    fraction,
                    p.thresholds.sign_fraction,
                    format!(
                        "{agreeing} of {} repetitions agree for every strategy",
                        spec.replicates
                    ),
                ));
                checks.push(Check::at_least(
                    &format!("{label}_magnitude_ratio_lower"),
                    ratio,
                    p.thresholds.ratio_min,
                    format!(
                        "mean over {} strategies with nonzero prediction",
                        ratios.len()
                    ),
                ));
                checks.push(Check::at_most(
                    &format!("{label}_magnitude_ratio_upper"),
                    ratio,
                    p.thresholds.ratio_max,
                    format!(
                        "mean over {} strategies with nonzero prediction",
                        ratios.len()
                    ),
                ));
            }
            values.push(json!({
                "rule": rule, "mu_over_w": m, "reaction_params": params,
                "reaction_source": source, "sign_agreement_fraction": fraction,
                "strategies": strat, "equilibrium": shift,
            }));
        }
    }
    Ok(Outcome {
        tables: vec![prediction_table, rep_table],
        checks,
        values: json!({ "runs": values }),
        clock: Clock::LABEL.into(),
        window: Some(format!(
            "discard ode_time < {burn} ({}% of horizon {}), average {} samples on [{burn}, {}]",
            p.burn_in_fraction * 100.0,
            p.horizon,
            window.len(),
            p.horizon
        )),
    })
}
