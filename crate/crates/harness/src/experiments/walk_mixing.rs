//! Total-variation distance of the torus walk from uniform.

use serde::Deserialize;
use serde_json::json;
use torus_games::coalescence::torus_walk_tv;
use torus_games::rng;
use torus_games::{Kernel, TorusGeom};

use super::Outcome;
use crate::common::default_kernel;
use crate::report::{Check, Table};
use crate::spec::ExperimentSpec;
use crate::HarnessError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    d: usize,
    side: usize,
    #[serde(default)]
    kernel: Option<Kernel>,
    /// Defaults to `L^2 ln L`.
    #[serde(default)]
    t: Option<f64>,
    /// Walk times, in units of `L^2`, at which the trend is also reported.
    #[serde(default)]
    trend: Vec<f64>,
    thresholds: Thresholds,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Thresholds {
    tv_max: f64,
}

pub(crate) fn run(spec: &ExperimentSpec) -> Result<Outcome, HarnessError> {
    let p: Params = spec.parameters()?;
    let kernel = default_kernel(p.kernel.clone(), p.d)?;
    let geometry = TorusGeom::new(p.side, p.d)?;
    let l = p.side as f64;
    let t = p.t.unwrap_or(l * l * l.ln());
    if spec.replicates == 0 {
        return Err(spec.invalid("replicates must be positive"));
    }
    let seed = rng::derive_seed(spec.seed, &[rng::tag("walk-mixing")]);
    let main = torus_walk_tv(&kernel, &geometry, t, spec.replicates, seed)?;
    let mut table = Table::new(
        "tv",
        &[
            "t",
            "t_over_L2",
            "replicates",
            "raw_tv",
            "bias",
            "adjusted_tv",
        ],
    );
    let mut trend = Vec::new();
    for s in p.trend.iter().copied().chain(std::iter::once(t / (l * l))) {
        let e = if s * l * l == t {
            main
        } else {
            torus_walk_tv(&kernel, &geometry, s * l * l, spec.replicates, seed)?
        };
        table.push([
            e.t.to_string(),
            s.to_string(),
            e.replicates.to_string(),
            e.raw.to_string(),
            e.bias.to_string(),
            e.adjusted().to_string(),
        ]);
        trend.push(json!({"t": e.t, "raw": e.raw, "adjusted": e.adjusted()}));
    }
    let checks = vec![Check::at_most(
        "tv_bias_adjusted",
        main.adjusted(),
        p.thresholds.tv_max,
        format!(
            "t = {t:.2}, raw {:.4}, bias {:.4}, {} walks",
            main.raw, main.bias, main.replicates
        ),
    )];
    Ok(Outcome {
        tables: vec![table],
        checks,
        values: json!({ "main": main, "adjusted": main.adjusted(), "trend": trend }),
        clock: "walk time at jump rate 1".into(),
        window: None,
    })
}
