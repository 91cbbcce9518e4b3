//! Census of the full-occupancy coalescing walk: decay of `N-bar(t)` like
//! `1/t` and negative correlation of occupancies.

use serde::Deserialize;
use serde_json::json;
use torus_games::coalescence::{census_pair_correlation, torus_census};
use torus_games::lattice_kernel::random_site;
use torus_games::rng;
use torus_games::{Kernel, TorusGeom};

use super::Outcome;
use crate::common::{default_kernel, log_grid, replicates};
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
    t_min: f64,
    /// Defaults to `L^2`.
    #[serde(default)]
    t_max: Option<f64>,
    samples: usize,
    arratia: Arratia,
    thresholds: Thresholds,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Arratia {
    t: f64,
    pairs: usize,
    /// Offsets are drawn uniformly from `[-max_offset, max_offset]^d \ {0}`.
    max_offset: i32,
    replicates: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Thresholds {
    max_ratio: f64,
    /// A pair fails if its covariance exceeds this many standard errors.
    covariance_sigmas: f64,
}

pub(crate) fn run(spec: &ExperimentSpec) -> Result<Outcome, HarnessError> {
    let p: Params = spec.parameters()?;
    let kernel = default_kernel(p.kernel.clone(), p.d)?;
    let geometry = TorusGeom::new(p.side, p.d)?;
    let t_max = p.t_max.unwrap_or((p.side * p.side) as f64);
    if !(p.t_min > 0.0 && t_max > p.t_min) || p.samples < 2 || spec.replicates == 0 {
        return Err(spec.invalid("need 0 < t_min < t_max, two samples and one replicate"));
    }
    if p.arratia.pairs == 0 || p.arratia.max_offset < 1 || p.arratia.replicates == 0 {
        return Err(spec.invalid("arratia block needs pairs, max_offset and replicates"));
    }
    let times = log_grid(p.t_min, t_max, p.samples);
    let seed = spec.seed;
    let series = replicates(spec.replicates, |r| {
        let mut g = rng::stream(seed, &[rng::tag("census"), r]);
        Ok(torus_census(&kernel, &geometry, t_max, &times, &mut g)?)
    })?;
    let sites = geometry.sites() as f64;
    let reps = spec.replicates as f64;
    let mean: Vec<f64> = (0..times.len())
        .map(|i| series.iter().map(|s| s.counts[i] as f64).sum::<f64>() / reps)
        .collect();
    let scaled: Vec<f64> = times
        .iter()
        .zip(&mean)
        .map(|(t, m)| t * m / sites)
        .collect();
    let hi = scaled.iter().copied().fold(f64::MIN, f64::max);
    let lo = scaled.iter().copied().fold(f64::MAX, f64::min);
    let ratio = hi / lo;
    let mean_monotone = mean.windows(2).all(|m| m[1] <= m[0]);
    let paths_monotone = series.iter().all(|s| s.is_nonincreasing());

    let mut census_table = Table::new("census", &["t", "mean_count", "t_mean_count_over_N"]);
    for ((t, m), s) in times.iter().zip(&mean).zip(&scaled) {
        census_table.push([t.to_string(), m.to_string(), s.to_string()]);
    }

    let mut g = rng::stream(seed, &[rng::tag("arratia-pairs")]);
    let m = p.arratia.max_offset;
    let width = (2 * m + 1) as usize;
    let mut pairs = Vec::with_capacity(p.arratia.pairs);
    while pairs.len() < p.arratia.pairs {
        let x = random_site(&geometry, &mut g);
        let offset: Vec<i32> = (0..p.d)
            .map(|_| rng::index(&mut g, width) as i32 - m)
            .collect();
        if offset.iter().all(|c| *c == 0) {
            continue;
        }
        pairs.push((x, geometry.translate(x, &offset)));
    }
    let corr = census_pair_correlation(
        &kernel,
        &geometry,
        p.arratia.t,
        &pairs,
        p.arratia.replicates,
        rng::derive_seed(seed, &[rng::tag("arratia")]),
    )?;
    let mut pair_table = Table::new(
        "pair_correlation",
        &[
            "x",
            "y",
            "p_x",
            "p_y",
            "p_xy",
            "covariance",
            "std_error",
            "passes",
        ],
    );
    let mut failing = 0usize;
    let mut worst: f64 = f64::MIN;
    for c in &corr {
        let ok = c.negatively_correlated(p.thresholds.covariance_sigmas);
        failing += usize::from(!ok);
        worst = worst.max(c.covariance() / c.std_error.max(f64::MIN_POSITIVE));
        pair_table.push([
            c.x.to_string(),
            c.y.to_string(),
            c.p_x.to_string(),
            c.p_y.to_string(),
            c.p_xy.to_string(),
            c.covariance().to_string(),
            c.std_error.to_string(),
            ok.to_string(),
        ]);
    }

    let checks = vec![
        Check::at_most(
            "scaled_census_ratio",
            ratio,
            p.thresholds.max_ratio,
            format!("max/min of t N(t)/N over t in [{}, {t_max}], range [{lo:.4}, {hi:.4}]", p.t_min),
        ),
        Check::holds(
            "mean_census_nonincreasing",
            mean_monotone && paths_monotone,
            format!(
                "mean over {} runs nonincreasing: {mean_monotone}; every path nonincreasing: {paths_monotone}",
                spec.replicates
            ),
        ),
        Check::holds(
            "arratia_negative_correlation",
            failing == 0,
            format!(
                "{failing} of {} pairs exceed {} standard errors at t = {}; largest covariance/se {worst:.3}",
                corr.len(),
                p.thresholds.covariance_sigmas,
                p.arratia.t
            ),
        ),
    ];
    Ok(Outcome {
        tables: vec![census_table, pair_table],
        checks,
        values: json!({
            "ratio": ratio, "scaled_min": lo, "scaled_max": hi,
            "mean_nonincreasing": mean_monotone, "paths_nonincreasing": paths_monotone,
            "arratia_failing_pairs": failing,
        }),
        clock: "coalescing walks run at rate 1; times are walk time".into(),
        window: None,
    })
}
