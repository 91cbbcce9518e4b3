//! Pieces shared by the experiment kinds: reaction parameters, the
//! sped-up clock, time grids, replicate scheduling and summary statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use torus_games::coalescence::{estimate_bd_probs, estimate_db_probs};
use torus_games::{Kernel, ReactionParams, UpdateRule};

use crate::HarnessError;

/// Coalescence probabilities supplied directly in a spec. Any that a rule
/// needs but that are missing are estimated instead.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probabilities {
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub pbar1: Option<f64>,
    pub pbar2: Option<f64>,
    pub p12: Option<f64>,
}

/// Monte Carlo settings used when probabilities must be estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSettings {
    pub horizon: f64,
    pub replicates: u64,
}

impl Default for EstimateSettings {
    fn default() -> Self {
        EstimateSettings {
            horizon: 2000.0,
            replicates: 20_000,
        }
    }
}

/// Reaction parameters for `rule`, and whether they were given or
/// estimated.
pub fn resolve_params(
    rule: UpdateRule,
    kernel: &Kernel,
    given: Option<&Probabilities>,
    estimate: EstimateSettings,
    seed: u64,
) -> Result<(ReactionParams, &'static str), HarnessError> {
    let given = given.cloned().unwrap_or_default();
    let params = match rule {
        UpdateRule::BirthDeath => match (given.p1, given.p2) {
            (Some(p1), Some(p2)) => return Ok((ReactionParams::birth_death(p1, p2), "given")),
            _ => estimate_bd_probs(kernel, estimate.horizon, estimate.replicates, seed)?.params(),
        },
        UpdateRule::DeathBirth => match (given.pbar1, given.pbar2, given.p12) {
            (Some(a), Some(b), Some(c)) => {
                return Ok((
                    ReactionParams::death_birth(a, b, c, kernel.kappa()),
                    "given",
                ))
            }
            _ => estimate_db_probs(kernel, estimate.horizon, estimate.replicates, seed)?.params(),
        },
    };
    Ok((params, "estimated"))
}

/// Conversion between the time of the limit equations and process time.
/// This is the only place the factor `1/w` enters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clock {
    pub w: f64,
}

impl Clock {
    pub const LABEL: &'static str = "process_time = ode_time / w";

    pub fn process(&self, ode_time: f64) -> f64 {
        ode_time / self.w
    }

    pub fn process_all(&self, ode_times: &[f64]) -> Vec<f64> {
        ode_times.iter().map(|t| self.process(*t)).collect()
    }
}

/// `0, step, 2 step, ..., t_end`, always ending exactly at `t_end`.
pub fn grid(t_end: f64, step: f64) -> Vec<f64> {
    let k = (t_end / step).round().max(1.0) as usize;
    let mut g: Vec<f64> = (0..k).map(|i| i as f64 * t_end / k as f64).collect();
    g.push(t_end);
    g
}

/// Geometric grid of `count` points from `a` to `b`.
pub fn log_grid(a: f64, b: f64, count: usize) -> Vec<f64> {
    if count < 2 {
        return vec![b];
    }
    let r = (b / a).ln() / (count - 1) as f64;
    (0..count)
        .map(|i| {
            if i + 1 == count {
                b
            } else {
                a * (r * i as f64).exp()
            }
        })
        .collect()
}

/// Runs `job(r)` for every replicate, concurrently, returning results in
/// replicate order.
pub fn replicates<T, F>(count: u64, job: F) -> Result<Vec<T>, HarnessError>
where
    T: Send,
    F: Fn(u64) -> Result<T, HarnessError> + Sync + Send,
{
    (0..count).into_par_iter().map(job).collect()
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

pub fn default_kernel(kernel: Option<Kernel>, d: usize) -> Result<Kernel, HarnessError> {
    let k = match kernel {
        Some(k) => k,
        None => Kernel::nearest_neighbor(d)?,
    };
    if k.dim() != d {
        return Err(HarnessError::InvalidParameters {
            kind: "kernel".into(),
            detail: format!("kernel dimension {} but d = {d}", k.dim()),
        });
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_end_exactly() {
        let g = grid(1.0, 0.3);
        assert_eq!(g.first(), Some(&0.0));
        assert_eq!(g.last(), Some(&1.0));
        assert_eq!(g.len(), 4);
        let l = log_grid(1.0, 400.0, 5);
        assert_eq!(l[0], 1.0);
        assert_eq!(l[4], 400.0);
        assert!(l.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn clock_scales_once() {
        let c = Clock { w: 0.01 };
        assert_eq!(c.process(2.0), 200.0);
    }

    #[test]
    fn given_params_skip_estimation() {
        let k = Kernel::nearest_neighbor(3).unwrap();
        let p = Probabilities {
            pbar1: Some(0.36),
            pbar2: Some(0.21),
            p12: Some(0.67),
            ..Default::default()
        };
        let (r, src) = resolve_params(
            UpdateRule::DeathBirth,
            &k,
            Some(&p),
            EstimateSettings::default(),
            1,
        )
        .unwrap();
        assert_eq!(src, "given");
        assert!((r.kappa - 6.0).abs() < 1e-12);
    }

    #[test]
    fn replicate_order_is_stable() {
        let v = replicates(50, |r| Ok(r * r)).unwrap();
        assert_eq!(v, (0..50).map(|r| r * r).collect::<Vec<_>>());
        let (m, se) = mean_se(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
