//! Acceptance run: every criterion prints one PASS/FAIL line. Set
//! `ACCEPTANCE_ONLY=2,5` to run a subset.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use torus_games::games::{
    modified_game, reaction_rhs, replicator_rhs, skew_correction, tarnita_statistic,
};
use torus_games::limits::{
    integrate_ode, integrate_pde, GameReaction, NoReaction, OdeSpec, PdeSpec,
};
use torus_games::particle_sim::{InitialCondition, SimConfig, Simulator};
use torus_games::{rng, GameMatrix, Kernel, ReactionParams, TorusGeom, UpdateRule};
use torus_harness::{ExperimentSpec, Report};
use torus_oracles::{brute_force_generator, BruteState, GreenOracle};

struct Verdict {
    passed: bool,
    detail: String,
}

type Criterion = fn(&mut Shared) -> Result<Verdict, String>;

/// The coalescence table feeds two criteria; it is computed once.
#[derive(Default)]
struct Shared {
    table: Option<Report>,
}

fn spec_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("specs")
        .join(format!("{name}.json"))
}

fn run_spec(name: &str) -> Result<Report, String> {
    let spec = ExperimentSpec::load(&spec_path(name)).map_err(|e| e.to_string())?;
    torus_harness::run(&spec).map_err(|e| e.to_string())
}

fn from_report(report: &Report, names: Option<&[&str]>) -> Verdict {
    let checks: Vec<_> = report
        .summary
        .checks
        .iter()
        .filter(|c| names.is_none_or(|n| n.contains(&c.criterion.as_str())))
        .collect();
    Verdict {
        passed: !checks.is_empty() && checks.iter().all(|c| c.passed),
        detail: checks
            .iter()
            .map(|c| c.line())
            .collect::<Vec<_>>()
            .join("\n      "),
    }
}

fn nn3() -> Kernel {
    Kernel::nearest_neighbor(3).expect("nn kernel")
}

fn random_game(n: usize, g: &mut impl Rng) -> GameMatrix {
    GameMatrix::from_rows(
        (0..n)
            .map(|_| (0..n).map(|_| g.random_range(-3.0..3.0)).collect())
            .collect(),
    )
    .expect("finite game")
}

fn random_params(rule: UpdateRule, g: &mut impl Rng) -> ReactionParams {
    match rule {
        UpdateRule::BirthDeath => {
            ReactionParams::birth_death(g.random_range(0.2..0.6), g.random_range(0.0..0.2))
        }
        UpdateRule::DeathBirth => ReactionParams::death_birth(
            g.random_range(0.2..0.6),
            g.random_range(0.0..0.2),
            g.random_range(0.3..0.8),
            g.random_range(2.0..30.0),
        ),
    }
}

fn random_simplex(n: usize, g: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| g.random_range(0.01..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn c1_constants(_: &mut Shared) -> Result<Verdict, String> {
    let k = nn3();
    let kappa = k.kappa();
    // Any probabilities satisfying the Death-Birth identity give sigma_DB.
    let p12 = 0.6594594;
    let pbar1 = 0.35;
    let pbar2 = ((1.0 + 1.0 / kappa) * p12 - pbar1) / 2.0;
    let db = ReactionParams::death_birth(pbar1, pbar2, p12, kappa)
        .alphas()
        .sigma();
    let bd = ReactionParams::birth_death(0.3, 0.18).alphas().sigma();
    let kappa_ok = (kappa - 6.0).abs() < 1e-12;
    let sigma_ok = (db - 1.4).abs() < 1e-12 && (db - (kappa + 1.0) / (kappa - 1.0)).abs() < 1e-12;
    Ok(Verdict {
        passed: kappa_ok && sigma_ok && bd == 1.0,
        detail: format!("kappa = {kappa}, sigma_DB = {db}, sigma_BD = {bd}"),
    })
}

fn table(shared: &mut Shared) -> Result<&Report, String> {
    if shared.table.is_none() {
        shared.table = Some(run_spec("coalescence_table")?);
    }
    Ok(shared.table.as_ref().expect("just set"))
}

fn c2_identities(shared: &mut Shared) -> Result<Verdict, String> {
    let r = table(shared)?;
    Ok(from_report(
        r,
        Some(&["bd_identity_sigmas", "db_identity_sigmas"]),
    ))
}

fn c3_two_walker(shared: &mut Shared) -> Result<Verdict, String> {
    let oracle = GreenOracle::new(&nn3(), 12, 24);
    let reference = oracle.non_coalescence(&[1, 0, 0]);
    let r = table(shared)?;
    let p01 = &r.summary.values["birth_death"]["p01"];
    let value = p01["value"].as_f64().ok_or("missing p01")?;
    let tail = p01["tail_bound"].as_f64().ok_or("missing tail bound")?;
    let corrected = value - tail;
    let err = (corrected - reference).abs();
    Ok(Verdict {
        passed: err <= 0.005,
        detail: format!(
            "tail-corrected p(0|v1) = {corrected:.5} (raw {value:.5}, tail {tail:.5}) vs oracle {reference:.5}: |diff| {err:.5} <= 0.005"
        ),
    })
}

fn c4_generator(_: &mut Shared) -> Result<Verdict, String> {
    let kernel = nn3();
    let geometry = TorusGeom::new(3, 3).map_err(|e| e.to_string())?;
    let game = GameMatrix::two_by_two(1.0, 3.0, 0.0, 2.0).map_err(|e| e.to_string())?;
    let (w, mu) = (0.1, 0.1);
    let mut g = rng::stream(404, &[]);
    let assignment: Vec<u8> = (0..27).map(|_| u8::from(g.random::<bool>())).collect();
    let samples = 200_000u64;
    let mut lines = Vec::new();
    let mut passed = true;
    for rule in [UpdateRule::BirthDeath, UpdateRule::DeathBirth] {
        let config = SimConfig {
            id: "generator".into(),
            geometry,
            kernel: kernel.clone(),
            game: game.clone(),
            rule,
            w,
            mu,
            t_end: 1.0,
            record_times: vec![],
            seed: 0,
            initial: InitialCondition::Explicit {
                assignment: assignment.clone(),
            },
        };
        let state = BruteState {
            side: 3,
            dim: 3,
            assignment: &assignment,
        };
        let rates = brute_force_generator(&state, &kernel, &game, rule, w, mu);
        let total: f64 = rates.iter().map(|r| r.2).sum();
        let probe = Simulator::with_state(config.clone(), assignment.clone(), rng::stream(1, &[]))
            .map_err(|e| e.to_string())?;
        let rate_gap = rates
            .iter()
            .map(|(x, j, r)| (probe.flip_rate(*x, *j) - r).abs())
            .fold(0.0, f64::max);
        let mut counts: HashMap<(usize, u8), u64> = HashMap::new();
        let mut wait = 0.0;
        for m in 0..samples {
            let stream = rng::stream(9, &[rule as u64, m]);
            let mut sim = Simulator::with_state(config.clone(), assignment.clone(), stream)
                .map_err(|e| e.to_string())?;
            let e = sim
                .next_flip()
                .ok_or("no flip from a state with mutation")?;
            *counts.entry((e.site, e.to)).or_default() += 1;
            wait += e.time;
        }
        let mut worst: f64 = 0.0;
        let mut unexpected = 0;
        for (key, c) in &counts {
            let rate = rates
                .iter()
                .find(|r| (r.0, r.1) == *key)
                .map_or(0.0, |r| r.2);
            if rate == 0.0 {
                unexpected += 1;
                continue;
            }
            let p = rate / total;
            let se = (p * (1.0 - p) / samples as f64).sqrt();
            worst = worst.max((*c as f64 / samples as f64 - p).abs() / se);
        }
        let mean_wait = wait / samples as f64;
        let wait_z = (mean_wait * total - 1.0) * (samples as f64).sqrt();
        let ok = rate_gap <= 1e-12 && unexpected == 0 && worst <= 3.0 && wait_z.abs() <= 3.0;
        passed &= ok;
        lines.push(format!(
            "{}: rate gap {rate_gap:.1e}, {} transitions observed, worst |freq - rate/total| = {worst:.2} se, holding time z = {wait_z:.2}",
            rule.name(),
            counts.len()
        ));
    }
    Ok(Verdict {
        passed,
        detail: lines.join("; "),
    })
}

fn experiment(name: &'static str) -> impl Fn(&mut Shared) -> Result<Verdict, String> {
    move |_| Ok(from_report(&run_spec(name)?, None))
}

fn c5(s: &mut Shared) -> Result<Verdict, String> {
    experiment("regime2_convergence")(s)
}
fn c6(s: &mut Shared) -> Result<Verdict, String> {
    experiment("tarnita_check")(s)
}
fn c7(s: &mut Shared) -> Result<Verdict, String> {
    experiment("takeover_2x2")(s)
}
fn c8(s: &mut Shared) -> Result<Verdict, String> {
    experiment("contact_fast_voting")(s)
}
fn c9(s: &mut Shared) -> Result<Verdict, String> {
    experiment("census_decay")(s)
}
fn c10(s: &mut Shared) -> Result<Verdict, String> {
    experiment("walk_mixing")(s)
}

fn c11_solvers(_: &mut Shared) -> Result<Verdict, String> {
    let mut worst_closed: f64 = 0.0;
    let flat = NoReaction(3);
    let u0 = vec![0.6, 0.3, 0.1];
    for c in [0.5, 2.0, 8.0] {
        let mut s = OdeSpec::new(&flat, u0.clone(), 4.0);
        s.mu_over_w = c;
        s.sample_times = (1..40).map(|i| i as f64 * 0.1).collect();
        let tr = integrate_ode(&s).map_err(|e| e.to_string())?;
        for (t, u) in tr.times.iter().zip(&tr.states) {
            for k in 0..3 {
                let exact = 1.0 / 3.0 + (u0[k] - 1.0 / 3.0) * (-c * t).exp();
                worst_closed = worst_closed.max((u[k] - exact).abs());
            }
        }
    }

    let game = GameMatrix::from_rows(vec![
        vec![0.0, 2.0, -1.0],
        vec![-1.0, 0.0, 2.0],
        vec![1.5, -1.0, 0.0],
    ])
    .map_err(|e| e.to_string())?;
    let reaction = GameReaction::new(game, ReactionParams::death_birth(0.36, 0.21, 0.66, 6.0));
    let u = [0.2, 0.5, 0.3];
    let dx = 0.5;
    let pde = integrate_pde(&PdeSpec {
        reaction: &reaction,
        sigma2: 1.0 / 3.0,
        dims: vec![6, 6],
        dx,
        dt: 1e-5,
        t_end: 1.0,
        u0: u.repeat(36),
        sample_times: vec![0.5],
    })
    .map_err(|e| e.to_string())?;
    let mut o = OdeSpec::new(&reaction, u.to_vec(), 1.0);
    o.tolerance = 1e-12;
    let ode = integrate_ode(&o).map_err(|e| e.to_string())?;
    let end = pde.fields.last().ok_or("no fields")?;
    let mut worst_pde: f64 = 0.0;
    for p in 0..end.points() {
        for k in 0..3 {
            worst_pde = worst_pde.max((end.at(p)[k] - ode.last()[k]).abs());
        }
    }

    let mut g = rng::stream(11, &[]);
    let mut field = Vec::new();
    for _ in 0..(8 * 8) {
        field.extend(random_simplex(3, &mut g));
    }
    let rough = integrate_pde(&PdeSpec {
        reaction: &reaction,
        sigma2: 1.0 / 3.0,
        dims: vec![8, 8],
        dx: 0.5,
        dt: 0.9 * 0.25 / (2.0 * 2.0 / 3.0),
        t_end: 3.0,
        u0: field,
        sample_times: vec![0.5, 1.0, 2.0],
    })
    .map_err(|e| e.to_string())?;
    let mut drift: f64 = 0.0;
    for f in &rough.fields {
        for p in 0..f.points() {
            drift = drift.max((f.at(p).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let long = integrate_ode(&OdeSpec::new(&reaction, vec![0.7, 0.2, 0.1], 50.0))
        .map_err(|e| e.to_string())?;
    for s in &long.states {
        drift = drift.max((s.iter().sum::<f64>() - 1.0).abs());
    }
    Ok(Verdict {
        passed: worst_closed <= 1e-8 && worst_pde <= 1e-6 && drift <= 1e-12,
        detail: format!(
            "mutation-only error {worst_closed:.2e} <= 1e-8; constant PDE vs ODE {worst_pde:.2e} <= 1e-6; simplex drift {drift:.2e} <= 1e-12"
        ),
    })
}

fn c12_structure(_: &mut Shared) -> Result<Verdict, String> {
    let mut g = rng::stream(12, &[]);
    let mut modified: f64 = 0.0;
    let mut skew: f64 = 0.0;
    let mut reduction: f64 = 0.0;
    let mut proportional: f64 = 0.0;
    for trial in 0..400 {
        let rule = if trial % 2 == 0 {
            UpdateRule::BirthDeath
        } else {
            UpdateRule::DeathBirth
        };
        let n = 2 + trial % 4;
        let game = random_game(n, &mut g);
        let params = random_params(rule, &mut g);
        let u = random_simplex(n, &mut g);
        let lhs = reaction_rhs(&game, &params, &u).map_err(|e| e.to_string())?;
        let m = modified_game(&game, &params).map_err(|e| e.to_string())?;
        let rhs = replicator_rhs(&m, &u).map_err(|e| e.to_string())?;
        for k in 0..n {
            modified = modified.max((lhs[k] - params.leading() * rhs[k]).abs());
        }
        let a = skew_correction(&game, &params).map_err(|e| e.to_string())?;
        for i in 0..n {
            for j in 0..n {
                skew = skew.max((a.get(i, j) + a.get(j, i)).abs());
            }
        }
        let alphas = params.alphas();
        let uniform = vec![1.0 / n as f64; n];
        let phi = reaction_rhs(&game, &params, &uniform).map_err(|e| e.to_string())?;
        for k in 0..n {
            let s = tarnita_statistic(&game, k, &alphas).map_err(|e| e.to_string())?;
            proportional = proportional.max((phi[k] - s / n as f64).abs());
        }
        if n == 2 {
            let (aa, b, c, d) = (
                game.get(0, 0),
                game.get(0, 1),
                game.get(1, 0),
                game.get(1, 1),
            );
            let s = tarnita_statistic(&game, 0, &alphas).map_err(|e| e.to_string())?;
            let sigma_form =
                (alphas.a1 + 2.0 * alphas.a3) / 4.0 * (alphas.sigma() * (aa - d) + b - c);
            reduction = reduction.max((s - sigma_form).abs());
        }
    }
    Ok(Verdict {
        passed: modified <= 1e-10 && skew <= 1e-12 && reduction <= 1e-12 && proportional <= 1e-12,
        detail: format!(
            "reaction vs p1 * replicator(G + A) {modified:.1e}; A + A^T {skew:.1e}; n = 2 sigma form {reduction:.1e}; phi(1/n) - statistic/n {proportional:.1e}"
        ),
    })
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(&str, Criterion); 12] = [
        ("kappa and sigma constants", c1_constants),
        ("coalescence identities", c2_identities),
        ("two-walker constant", c3_two_walker),
        ("small-instance generator equivalence", c4_generator),
        ("regime-2 ODE convergence", c5),
        ("Tarnita sign test", c6),
        ("2x2 outcomes", c7),
        ("contact with fast voting", c8),
        ("census decay", c9),
        ("walk mixing", c10),
        ("limit-solver correctness", c11_solvers),
        ("structural identities", c12_structure),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let number = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&number)) {
            continue;
        }
        let start = Instant::now();
        let verdict = f(&mut shared).unwrap_or_else(|e| Verdict {
            passed: false,
            detail: format!("error: {e}"),
        });
        failed += usize::from(!verdict.passed);
        println!(
            "criterion {number:>2} {} {name} [{:.1}s]\n      {}",
            if verdict.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            verdict.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
