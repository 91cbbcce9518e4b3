//! The table of coalescence constants for a kernel, with the identities
//! linking them and the derived Tarnita coefficients for both rules.

use serde::Deserialize;
use serde_json::json;
use torus_games::coalescence::{
    estimate_bd_probs, estimate_db_probs, tarnita_alphas, CoalescenceEstimate, RuleEstimates,
};
use torus_games::rng;
use torus_games::{Kernel, UpdateRule};

use super::Outcome;
use crate::common::default_kernel;
use crate::report::{Check, Table};
use crate::spec::ExperimentSpec;
use crate::HarnessError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    d: usize,
    #[serde(default)]
    kernel: Option<Kernel>,
    horizon: f64,
    thresholds: Thresholds,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Thresholds {
    identity_sigmas: f64,
    sigma_db_sigmas: f64,
    /// Optional external value of `p(0|v1)` to compare the tail-corrected
    /// estimate against.
    #[serde(default)]
    p01_reference: Option<f64>,
    #[serde(default)]
    p01_tolerance: Option<f64>,
}

fn row(t: &mut Table, e: &CoalescenceEstimate) {
    t.push([
        e.quantity.clone(),
        e.value.to_string(),
        e.std_error.to_string(),
        e.tail_bound.to_string(),
        e.tail_corrected().to_string(),
        e.replicates.to_string(),
        e.horizon.to_string(),
        e.seed.to_string(),
    ]);
}

pub(crate) fn run(spec: &ExperimentSpec) -> Result<Outcome, HarnessError> {
    let p: Params = spec.parameters()?;
    let kernel = default_kernel(p.kernel.clone(), p.d)?;
    let bd = estimate_bd_probs(
        &kernel,
        p.horizon,
        spec.replicates,
        rng::derive_seed(spec.seed, &[rng::tag("table-bd")]),
    )?;
    let db = estimate_db_probs(
        &kernel,
        p.horizon,
        spec.replicates,
        rng::derive_seed(spec.seed, &[rng::tag("table-db")]),
    )?;
    let kappa = kernel.kappa();
    let kappa_direct = 1.0 / kernel.iter().map(|(_, w)| w * w).sum::<f64>();
    let bd_alpha = tarnita_alphas(
        UpdateRule::BirthDeath,
        RuleEstimates::BirthDeath(&bd),
        &kernel,
    )?;
    let db_alpha = tarnita_alphas(
        UpdateRule::DeathBirth,
        RuleEstimates::DeathBirth(&db),
        &kernel,
    )?;
    let sigma_db = db_alpha.sigma();
    let sigma_db_theory = (kappa + 1.0) / (kappa - 1.0);
    // sigma_DB as a function of the identity residual r, linearized at r = 0.
    let c = 1.0 + 1.0 / kappa;
    let slope = (2.0 / kappa) / ((c - 2.0 / kappa).powi(2) * db.p12.value);
    let sigma_db_se = slope * db.identity.combined_std_error;

    let mut table = Table::new(
        "probabilities",
        &[
            "quantity",
            "value",
            "std_error",
            "tail_bound",
            "tail_corrected",
            "replicates",
            "horizon",
            "seed",
        ],
    );
    for e in [
        &bd.p01,
        &bd.p1,
        &bd.p2,
        &bd.p2_identity,
        &db.p12,
        &db.pbar1,
        &db.pbar2,
        &db.pbar2_identity,
    ] {
        row(&mut table, e);
    }
    let mut constants = Table::new("constants", &["name", "value"]);
    for (name, v) in [
        ("kappa", kappa),
        ("sigma2", kernel.sigma2()),
        ("sigma_bd", bd_alpha.sigma()),
        ("sigma_db", sigma_db),
        ("sigma_db_theory", sigma_db_theory),
        ("bd_identity_residual", bd.identity.residual),
        ("db_identity_residual", db.identity.residual),
    ] {
        constants.push([name.to_string(), v.to_string()]);
    }
    let mut alphas = Table::new("alphas", &["rule", "alpha1", "alpha2", "alpha3", "sigma"]);
    for (rule, a) in [
        (UpdateRule::BirthDeath, bd_alpha),
        (UpdateRule::DeathBirth, db_alpha),
    ] {
        alphas.push([
            rule.name().to_string(),
            a.a1.to_string(),
            a.a2.to_string(),
            a.a3.to_string(),
            a.sigma().to_string(),
        ]);
    }

    let t = &p.thresholds;
    let sigmas = |ic: &torus_games::coalescence::IdentityCheck| {
        ic.residual.abs() / ic.combined_std_error.max(f64::MIN_POSITIVE)
    };
    let mut checks = vec![
        Check::at_most(
            "bd_identity_sigmas",
            sigmas(&bd.identity),
            t.identity_sigmas,
            format!(
                "p2 direct {:.5} vs identity {:.5}, residual {:.2e}, se {:.2e}",
                bd.p2.value, bd.p2_identity.value, bd.identity.residual, bd.identity.combined_std_error
            ),
        ),
        Check::at_most(
            "db_identity_sigmas",
            sigmas(&db.identity),
            t.identity_sigmas,
            format!(
                "pbar2 direct {:.5} vs identity {:.5}, residual {:.2e}, se {:.2e}",
                db.pbar2.value, db.pbar2_identity.value, db.identity.residual, db.identity.combined_std_error
            ),
        ),
        Check::holds(
            "kappa_matches_analytic",
            (kappa - kappa_direct).abs() <= 1e-12 * kappa,
            format!("kappa() = {kappa}, 1/sum p^2 = {kappa_direct}"),
        ),
        Check::at_most(
            "sigma_db_sigmas",
            (sigma_db - sigma_db_theory).abs() / sigma_db_se.max(f64::MIN_POSITIVE),
            t.sigma_db_sigmas,
            format!("estimated {sigma_db:.5} vs (kappa+1)/(kappa-1) = {sigma_db_theory:.5}, se {sigma_db_se:.2e}"),
        ),
    ];
    if let (Some(r), Some(tol)) = (t.p01_reference, t.p01_tolerance) {
        checks.push(Check::at_most(
            "p01_vs_reference",
            (bd.p01.tail_corrected() - r).abs(),
            tol,
            format!(
                "tail-corrected {:.5} (raw {:.5}) vs reference {r:.5}",
                bd.p01.tail_corrected(),
                bd.p01.value
            ),
        ));
    }
    let advisories: Vec<_> = bd.advisories.iter().chain(&db.advisories).collect();
    Ok(Outcome {
        tables: vec![table, constants, alphas],
        checks,
        values: json!({
            "kernel_id": kernel.id(), "kappa": kappa, "sigma2": kernel.sigma2(),
            "birth_death": bd, "death_birth": db,
            "alphas": { "birth-death": bd_alpha, "death-birth": db_alpha },
            "sigma_bd": bd_alpha.sigma(), "sigma_db": sigma_db,
            "sigma_db_theory": sigma_db_theory, "sigma_db_std_error": sigma_db_se,
            "advisories": advisories,
        }),
        clock: "coalescing walks run at rate 1 per walker; horizon is walk time".into(),
        window: None,
    })
}
