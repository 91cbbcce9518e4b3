//! Regime-2 convergence: empirical densities on the sped-up clock against
//! the solution of the reaction ODE, for a sequence of torus sizes with
//! `1/w = L^e`, `2 < e < d`.

use serde::Deserialize;
use serde_json::json;
use torus_games::limits::{integrate_ode, GameReaction, NoReaction, OdeSpec, OdeTrajectory};
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
    sides: Vec<usize>,
    /// `1/w = L^w_exponent`.
    w_exponent: f64,
    game: GameMatrix,
    rule: UpdateRule,
    u0: Vec<f64>,
    /// ODE-time horizon.
    horizon: f64,
    /// ODE-time spacing of the comparison grid.
    record_step: f64,
    #[serde(default)]
    kernel: Option<Kernel>,
    #[serde(default)]
    reaction: Option<Probabilities>,
    #[serde(default)]
    estimate: EstimateSettings,
    /// Also run the `w = 0` voter model on the same process-time grid.
    #[serde(default)]
    control: bool,
    thresholds: Thresholds,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Thresholds {
    max_deviation_at_largest: f64,
    require_monotone: bool,
    /// Control passes if its mean deviation is at most this multiple of the
    /// voter fluctuation scale `sqrt(T / (w N))`.
    #[serde(default)]
    control_band_factor: Option<f64>,
}

fn sup_deviation(times: &[f64], densities: &[Vec<f64>], ode: &OdeTrajectory) -> f64 {
    let mut sup: f64 = 0.0;
    for (t, u) in times.iter().zip(densities) {
        for (k, v) in u.iter().enumerate() {
            sup = sup.max((v - ode.component_at(k, *t)).abs());
        }
    }
    sup
}

pub(crate) fn run(spec: &ExperimentSpec) -> Result<Outcome, HarnessError> {
    let p: Params = spec.parameters()?;
    if !(p.w_exponent > 2.0 && p.w_exponent < p.d as f64) {
        return Err(HarnessError::RegimeViolation {
            exponent: p.w_exponent,
            d: p.d,
        });
    }
    if p.sides.is_empty() || p.sides.windows(2).any(|s| s[1] <= s[0]) {
        return Err(spec.invalid("sides must be a nonempty increasing list"));
    }
    if p.u0.len() != p.game.n() {
        return Err(spec.invalid("u0 length differs from the number of strategies"));
    }
    if !(p.horizon > 0.0 && p.record_step > 0.0) {
        return Err(spec.invalid("horizon and record_step must be positive"));
    }
    if spec.replicates == 0 {
        return Err(spec.invalid("replicates must be positive"));
    }
    let kernel = default_kernel(p.kernel.clone(), p.d)?;
    for &l in &p.sides {
        check_window((l as f64).powf(-p.w_exponent), l, p.d)?;
    }
    let (params, source) = resolve_params(
        p.rule,
        &kernel,
        p.reaction.as_ref(),
        p.estimate,
        rng::derive_seed(spec.seed, &[rng::tag("reaction")]),
    )?;
    let reaction = GameReaction::new(p.game.clone(), params);
    let ode_times = grid(p.horizon, p.record_step);
    let mut ode_spec = OdeSpec::new(&reaction, p.u0.clone(), p.horizon);
    ode_spec.sample_times = ode_times.clone();
    let ode = integrate_ode(&ode_spec)?;
    let flat = NoReaction(p.game.n());
    let mut flat_spec = OdeSpec::new(&flat, p.u0.clone(), p.horizon);
    flat_spec.sample_times = ode_times.clone();
    let flat_ode = integrate_ode(&flat_spec)?;

    let n = p.game.n();
    let mut dev_table = Table::new(
        "deviation",
        &[
            "L",
            "w",
            "replicate",
            "seed",
            "sup_deviation",
            "control_deviation",
        ],
    );
    let mut side_table = Table::new(
        "by_side",
        &[
            "L",
            "N",
            "inv_w",
            "mean_sup_deviation",
            "std_error",
            "mean_control_deviation",
            "fluctuation_band",
        ],
    );
    let mut header = vec![
        "L".to_string(),
        "replicate".into(),
        "ode_time".into(),
        "process_time".into(),
    ];
    header.extend((1..=n).map(|k| format!("U_{k}")));
    header.extend((1..=n).map(|k| format!("u_{k}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut traj_table = Table::new("trajectories", &header_refs);

    let mut means = Vec::new();
    let mut per_side = Vec::new();
    let mut control_ok = true;
    for &l in &p.sides {
        let w = (l as f64).powf(-p.w_exponent);
        let clock = Clock { w };
        let geometry = TorusGeom::new(l, p.d)?;
        let config = SimConfig {
            id: format!("regime2-L{l}"),
            geometry,
            kernel: kernel.clone(),
            game: p.game.clone(),
            rule: p.rule,
            w,
            mu: 0.0,
            t_end: clock.process(p.horizon),
            record_times: clock.process_all(&ode_times),
            seed: rng::derive_seed(spec.seed, &[rng::tag("regime2"), l as u64]),
            initial: InitialCondition::Product {
                densities: p.u0.clone(),
            },
        };
        config.validate()?;
        let mut control_config = config.clone();
        control_config.w = 0.0;
        control_config.id = format!("regime2-control-L{l}");
        let runs = replicates(spec.replicates, |r| {
            let tr = run_sim(&config, r)?;
            let ctl = if p.control {
                let c = run_sim(&control_config, r)?;
                Some(sup_deviation(&ode_times, &c.densities(), &flat_ode))
            } else {
                None
            };
            Ok((tr, ctl))
        })?;
        let mut devs = Vec::new();
        let mut ctls = Vec::new();
        for (r, (tr, ctl)) in runs.iter().enumerate() {
            let dens = tr.densities();
            let dev = sup_deviation(&ode_times, &dens, &ode);
            devs.push(dev);
            if let Some(c) = ctl {
                ctls.push(*c);
            }
            dev_table.push([
                l.to_string(),
                w.to_string(),
                r.to_string(),
                tr.seed.to_string(),
                dev.to_string(),
                ctl.map_or(String::new(), |c| c.to_string()),
            ]);
            for ((t, u), ut) in ode_times.iter().zip(&dens).zip(&ode.states) {
                let mut row = vec![
                    l.to_string(),
                    r.to_string(),
                    t.to_string(),
                    clock.process(*t).to_string(),
                ];
                row.extend(u.iter().map(|v| v.to_string()));
                row.extend(ut.iter().map(|v| v.to_string()));
                traj_table.push(row);
            }
        }
        let (m, se) = mean_se(&devs);
        let band = (p.horizon / (w * geometry.sites() as f64)).sqrt();
        let (cm, _) = if ctls.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_se(&ctls)
        };
        if let Some(f) = p.thresholds.control_band_factor {
            if p.control && !(cm <= f * band) {
                control_ok = false;
            }
        }
        side_table.push([
            l.to_string(),
            geometry.sites().to_string(),
            (1.0 / w).to_string(),
            m.to_string(),
            se.to_string(),
            if ctls.is_empty() {
                String::new()
            } else {
                cm.to_string()
            },
            band.to_string(),
        ]);
        means.push(m);
        per_side.push(json!({
            "L": l, "w": w, "mean_sup_deviation": m, "std_error": se,
            "mean_control_deviation": if ctls.is_empty() { None } else { Some(cm) },
        }));
    }

    let monotone = means.windows(2).all(|m| m[1] < m[0]);
    let last = *means.last().expect("nonempty sides");
    let largest = *p.sides.last().expect("nonempty sides");
    let mut checks = Vec::new();
    if p.thresholds.require_monotone {
        let listing: Vec<String> = p
            .sides
            .iter()
            .zip(&means)
            .map(|(l, m)| format!("L={l}: {m:.4}"))
            .collect();
        checks.push(Check::holds(
            "mean_sup_deviation_decreasing",
            monotone,
            listing.join(", "),
        ));
    }
    checks.push(Check::at_most(
        "mean_sup_deviation_at_largest_L",
        last,
        p.thresholds.max_deviation_at_largest,
        format!("L = {largest}, {} replicates", spec.replicates),
    ));
    if let (true, Some(f)) = (p.control, p.thresholds.control_band_factor) {
        checks.push(Check::holds(
            "control_within_fluctuation_band",
            control_ok,
            format!("w = 0 deviation at most {f} sqrt(T/(wN)) for every L"),
        ));
    }
    Ok(Outcome {
        tables: vec![side_table, dev_table, traj_table],
        checks,
        values: json!({
            "reaction_params": params,
            "reaction_source": source,
            "ode_final": ode.last(),
            "by_side": per_side,
        }),
        clock: Clock::LABEL.into(),
        window: None,
    })
}
