//! Coalescing random walks on `Z^d` and on the torus.
//!
//! The estimators here produce the non-coalescence probabilities that
//! parameterize the limiting reaction terms: `p(0|v1)`, `p(0|v1|v1+v2)`,
//! `p(0|v1,v1+v2)` for Birth-Death and their barred counterparts for
//! Death-Birth. "Never coalesce" is truncated at a finite horizon `T`, so
//! every estimate overstates non-coalescence slightly. The size of that bias
//! is estimated from the fraction of replicates whose outcome changed during
//! `(T/2, T]`, extrapolated with the `t^{1-d/2}` tail of pair meetings.
//!
//! Replicate `r` of every estimator draws from its own stream derived from
//! the master seed, so results do not depend on how replicates are
//! scheduled.

use rand::RngCore;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::games::{TarnitaAlphas, UpdateRule};
use crate::lattice_kernel::{Kernel, NeighborTable, TorusGeom};
use crate::rng::{self, SimRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoalescenceError {
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("at least one replicate is required")]
    NoReplicates,
    #[error("walker start has dimension {got}, kernel has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dimension {0} is too large for packed walker positions")]
    DimensionTooLarge(usize),
    #[error("horizon {0} could overflow packed walker coordinates")]
    HorizonTooLarge(f64),
    #[error("sample times must be nonnegative, increasing and at most t_max = {t_max}")]
    BadSampleTimes { t_max: f64 },
    #[error("census horizon {t} exceeds the configured bound {bound}")]
    CensusTooLong { t: f64, bound: f64 },
    #[error("estimates for {supplied} were supplied where {requested} was requested")]
    RuleMismatch {
        requested: &'static str,
        supplied: &'static str,
    },
    #[error("site {site} is outside a torus of {sites} sites")]
    SiteOutOfRange { site: usize, sites: usize },
}

/// Monte Carlo estimate of a coalescence probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalescenceEstimate {
    pub quantity: String,
    pub value: f64,
    pub std_error: f64,
    pub replicates: u64,
    pub horizon: f64,
    /// Estimated probability mass of coalescences after the horizon that
    /// the value does not account for.
    pub tail_bound: f64,
    pub kernel_id: String,
    pub seed: u64,
}

impl CoalescenceEstimate {
    fn bernoulli(
        quantity: &str,
        hits: u64,
        changed: u64,
        reps: u64,
        horizon: f64,
        kernel: &Kernel,
        seed: u64,
    ) -> Self {
        let value = hits as f64 / reps as f64;
        CoalescenceEstimate {
            quantity: quantity.to_string(),
            value,
            std_error: (value * (1.0 - value) / reps as f64).sqrt(),
            replicates: reps,
            horizon,
            tail_bound: changed as f64 / reps as f64 / tail_factor(kernel.dim()),
            kernel_id: kernel.id().to_string(),
            seed,
        }
    }

    /// Value with the estimated post-horizon coalescence removed.
    pub fn tail_corrected(&self) -> f64 {
        (self.value - self.tail_bound).max(0.0)
    }

    pub fn horizon_too_small(&self) -> bool {
        self.tail_bound > 3.0 * self.std_error
    }

    fn advisory(&self) -> Option<Advisory> {
        self.horizon_too_small().then(|| Advisory::HorizonTooSmall {
            quantity: self.quantity.clone(),
            tail_bound: self.tail_bound,
            std_error: self.std_error,
        })
    }
}

/// Ratio between the meeting mass in `(T, inf)` and in `(T/2, T]` under a
/// `t^{1-d/2}` tail.
fn tail_factor(dim: usize) -> f64 {
    2f64.powf(dim as f64 / 2.0 - 1.0) - 1.0
}

/// Non-fatal findings attached to an estimate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Advisory {
    /// The estimated post-horizon coalescence exceeds three standard
    /// errors, so the horizon bias is not negligible.
    HorizonTooSmall {
        quantity: String,
        tail_bound: f64,
        std_error: f64,
    },
}

/// Partition of walker indices into coalescence classes. Each walker is
/// labelled by the smallest index in its class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<usize>,
}

impl Partition {
    pub fn singletons(m: usize) -> Self {
        Partition {
            labels: (0..m).collect(),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn together(&self, i: usize, j: usize) -> bool {
        self.labels[i] == self.labels[j]
    }

    pub fn class_count(&self) -> usize {
        self.labels
            .iter()
            .enumerate()
            .filter(|(i, l)| i == *l)
            .count()
    }

    pub fn classes(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l == i {
                out.push(vec![i]);
            } else if let Some(c) = out.iter_mut().find(|c| c[0] == l) {
                c.push(i);
            }
        }
        out
    }
}

/// Points of `Z^d` packed into one `i128` as `sum_i x_i B^i` with
/// `|x_i| < B/2`; addition and equality act coordinatewise.
#[derive(Debug, Clone)]
struct Packing {
    base_bits: u32,
    steps: Vec<i128>,
}

impl Packing {
    fn new(kernel: &Kernel) -> Result<Self, CoalescenceError> {
        let d = kernel.dim();
        let base_bits = 126 / d as u32;
        if base_bits < 12 {
            return Err(CoalescenceError::DimensionTooLarge(d));
        }
        let mut p = Packing {
            base_bits,
            steps: Vec::new(),
        };
        p.steps = (0..kernel.support_size())
            .map(|k| p.pack(kernel.offset(k)))
            .collect();
        Ok(p)
    }

    fn pack(&self, x: &[i32]) -> i128 {
        x.iter()
            .rev()
            .fold(0i128, |acc, &c| (acc << self.base_bits) + i128::from(c))
    }

    /// Largest coordinate magnitude representable without aliasing.
    fn capacity(&self) -> f64 {
        (1u128 << (self.base_bits - 1)) as f64 - 1.0
    }
}

fn add(a: &[i32], b: &[i32]) -> Vec<i32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sub(a: &[i32], b: &[i32]) -> Vec<i32> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn poisson<R: RngCore + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean)
        .expect("positive finite mean")
        .sample(rng) as u64
}

/// Coalescing walkers on `Z^d`, each jumping at rate 1.
///
/// Uniformization: the superposed clocks ring at rate `m`, each ring picks a
/// walker uniformly and only class representatives move, so every class
/// jumps at rate 1.
struct Walkers<'a> {
    kernel: &'a Kernel,
    packing: &'a Packing,
    pos: Vec<i128>,
    labels: Vec<usize>,
    classes: usize,
}

impl<'a> Walkers<'a> {
    fn new(kernel: &'a Kernel, packing: &'a Packing, starts: &[Vec<i32>]) -> Self {
        let mut w = Walkers {
            kernel,
            packing,
            pos: starts.iter().map(|s| packing.pack(s)).collect(),
            labels: (0..starts.len()).collect(),
            classes: starts.len(),
        };
        for i in 1..starts.len() {
            w.settle(i);
        }
        w
    }

    /// Merges walker `i` (a representative) with any class sharing its site.
    fn settle(&mut self, i: usize) {
        let m = self.pos.len();
        for j in 0..m {
            if j != i && self.labels[j] == j && self.labels[i] == i && self.pos[j] == self.pos[i] {
                let (keep, drop) = if i < j { (i, j) } else { (j, i) };
                for l in self.labels.iter_mut() {
                    if *l == drop {
                        *l = keep;
                    }
                }
                self.pos[keep] = self.pos[i];
                self.classes -= 1;
            }
        }
    }

    fn run<R: RngCore + ?Sized>(&mut self, rings: u64, rng: &mut R) {
        let m = self.pos.len();
        for _ in 0..rings {
            if self.classes == 1 {
                return;
            }
            let i = rng::index(rng, m);
            if self.labels[i] != i {
                continue;
            }
            self.pos[i] += self.packing.steps[self.kernel.sample_index(rng)];
            self.settle(i);
        }
    }

    fn partition(&self) -> Partition {
        Partition {
            labels: self.labels.clone(),
        }
    }
}

fn check_horizon(
    horizon: f64,
    packing: &Packing,
    kernel: &Kernel,
    start_extent: i64,
    walkers: usize,
) -> Result<(), CoalescenceError> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(CoalescenceError::BadHorizon(horizon));
    }
    // Jumps per walker exceed rate * horizon + 40 sd with negligible probability.
    let mean = horizon * walkers as f64;
    let jumps = mean + 40.0 * mean.sqrt() + 40.0;
    if start_extent as f64 + jumps * f64::from(kernel.range()) >= packing.capacity() {
        return Err(CoalescenceError::HorizonTooLarge(horizon));
    }
    Ok(())
}

fn extent(starts: &[Vec<i32>]) -> i64 {
    starts
        .iter()
        .flat_map(|s| s.iter())
        .map(|c| i64::from(c.unsigned_abs()))
        .max()
        .unwrap_or(0)
}

/// Runs coalescing walks from the given starting points up to `horizon`
/// and returns the partition into coalescence classes at that time.
pub fn run_coalescing_walks<R: RngCore + ?Sized>(
    kernel: &Kernel,
    initial_offsets: &[Vec<i32>],
    horizon: f64,
    rng: &mut R,
) -> Result<Partition, CoalescenceError> {
    Ok(run_with_midpoint(kernel, initial_offsets, horizon, rng)?.1)
}

/// Partitions at `horizon / 2` and at `horizon`.
fn run_with_midpoint<R: RngCore + ?Sized>(
    kernel: &Kernel,
    starts: &[Vec<i32>],
    horizon: f64,
    rng: &mut R,
) -> Result<(Partition, Partition), CoalescenceError> {
    for s in starts {
        if s.len() != kernel.dim() {
            return Err(CoalescenceError::DimensionMismatch {
                expected: kernel.dim(),
                got: s.len(),
            });
        }
    }
    let packing = Packing::new(kernel)?;
    check_horizon(horizon, &packing, kernel, extent(starts), starts.len())?;
    Ok(run_packed(kernel, &packing, starts, horizon, rng))
}

fn run_packed<R: RngCore + ?Sized>(
    kernel: &Kernel,
    packing: &Packing,
    starts: &[Vec<i32>],
    horizon: f64,
    rng: &mut R,
) -> (Partition, Partition) {
    let m = starts.len();
    let mut w = Walkers::new(kernel, packing, starts);
    if m < 2 {
        let p = w.partition();
        return (p.clone(), p);
    }
    let half = m as f64 * horizon / 2.0;
    let first = poisson(half, rng);
    w.run(first, rng);
    let mid = w.partition();
    if w.classes > 1 {
        let second = poisson(half, rng);
        w.run(second, rng);
    }
    (mid, w.partition())
}

/// Whether a rate-2 difference walk started at `start` avoids the origin
/// up to `horizon / 2` and up to `horizon`.
fn pair_avoids<R: RngCore + ?Sized>(
    kernel: &Kernel,
    packing: &Packing,
    start: &[i32],
    horizon: f64,
    rng: &mut R,
) -> (bool, bool) {
    let mut d = packing.pack(start);
    if d == 0 {
        return (false, false);
    }
    let half = horizon;
    for phase in 0..2 {
        let n = poisson(half, rng);
        for _ in 0..n {
            d += packing.steps[kernel.sample_index(rng)];
            if d == 0 {
                return (phase == 1, false);
            }
        }
    }
    (true, true)
}

/// Tally for an indicator observed at `T/2` and `T`.
#[derive(Default, Clone, Copy)]
struct Tally {
    hits: u64,
    changed: u64,
}

impl Tally {
    fn add(&mut self, mid: bool, end: bool) {
        self.hits += u64::from(end);
        self.changed += u64::from(mid != end);
    }
}

/// Residual of a coalescence identity with its combined standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub residual: f64,
    pub combined_std_error: f64,
}

impl IdentityCheck {
    pub fn within(&self, sigmas: f64) -> bool {
        self.residual.abs() <= sigmas * self.combined_std_error
    }
}

/// Birth-Death coalescence probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdEstimates {
    /// `p(0|v1|v1+v2)`: three walkers at `0, v1, v1+v2` stay distinct.
    pub p1: CoalescenceEstimate,
    /// `p(0|v1,v1+v2)`, estimated directly.
    pub p2: CoalescenceEstimate,
    /// `p(0|v1,v1+v2)` from `2 p2 = p(0|v1) - p1`.
    pub p2_identity: CoalescenceEstimate,
    /// `p(0|v1)` from an independent two-walker run.
    pub p01: CoalescenceEstimate,
    /// `2 p2 - (p01 - p1)`.
    pub identity: IdentityCheck,
    pub advisories: Vec<Advisory>,
}

/// Death-Birth coalescence probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbEstimates {
    /// `p(v1|v2|v2+v3)`.
    pub pbar1: CoalescenceEstimate,
    /// `p(v1|v2,v2+v3)`, estimated directly.
    pub pbar2: CoalescenceEstimate,
    /// `p(v1|v2,v2+v3)` from `2 pbar2 = (1 + 1/kappa) p12 - pbar1`.
    pub pbar2_identity: CoalescenceEstimate,
    /// `p(v1|v2)` from an independent two-walker run.
    pub p12: CoalescenceEstimate,
    /// `2 pbar2 - ((1 + 1/kappa) p12 - pbar1)`.
    pub identity: IdentityCheck,
    pub kappa: f64,
    pub advisories: Vec<Advisory>,
}

impl BdEstimates {
    pub fn params(&self) -> crate::games::ReactionParams {
        crate::games::ReactionParams::birth_death(self.p1.value, self.p2.value)
    }
}

impl DbEstimates {
    pub fn params(&self) -> crate::games::ReactionParams {
        crate::games::ReactionParams::death_birth(
            self.pbar1.value,
            self.pbar2.value,
            self.p12.value,
            self.kappa,
        )
    }
}

/// Triple-walker tallies for the all-distinct event and the event that
/// walkers 1 and 2 merge while walker 0 stays apart, plus the per-replicate
/// score `2 * 1{pair} + 1{distinct}` used for the identity residual.
struct TripleStats {
    distinct: Tally,
    pair: Tally,
    score_sum: f64,
    score_sq: f64,
}

fn triple_run<F>(
    kernel: &Kernel,
    horizon: f64,
    reps: u64,
    seed: u64,
    key: &str,
    mut starts: F,
) -> Result<TripleStats, CoalescenceError>
where
    F: FnMut(&mut SimRng) -> [Vec<i32>; 3],
{
    let packing = Packing::new(kernel)?;
    let reach = 3 * i64::from(kernel.range());
    check_horizon(horizon, &packing, kernel, reach, 3)?;
    let mut s = TripleStats {
        distinct: Tally::default(),
        pair: Tally::default(),
        score_sum: 0.0,
        score_sq: 0.0,
    };
    let tag = rng::tag(key);
    for r in 0..reps {
        let mut g = rng::stream(seed, &[tag, r]);
        let st = starts(&mut g);
        let (mid, end) = run_packed(kernel, &packing, &st, horizon, &mut g);
        let distinct = |p: &Partition| p.class_count() == 3;
        let pair = |p: &Partition| p.together(1, 2) && !p.together(0, 1);
        s.distinct.add(distinct(&mid), distinct(&end));
        s.pair.add(pair(&mid), pair(&end));
        let score = 2.0 * f64::from(u8::from(pair(&end))) + f64::from(u8::from(distinct(&end)));
        s.score_sum += score;
        s.score_sq += score * score;
    }
    Ok(s)
}

fn pair_run<F>(
    kernel: &Kernel,
    horizon: f64,
    reps: u64,
    seed: u64,
    key: &str,
    mut start: F,
) -> Result<Tally, CoalescenceError>
where
    F: FnMut(&mut SimRng) -> Vec<i32>,
{
    let packing = Packing::new(kernel)?;
    check_horizon(horizon, &packing, kernel, 2 * i64::from(kernel.range()), 2)?;
    let tag = rng::tag(key);
    let mut t = Tally::default();
    for r in 0..reps {
        let mut g = rng::stream(seed, &[tag, r]);
        let d = start(&mut g);
        let (mid, end) = pair_avoids(kernel, &packing, &d, horizon, &mut g);
        t.add(mid, end);
    }
    Ok(t)
}

fn score_variance(s: &TripleStats, reps: u64) -> f64 {
    let n = reps as f64;
    let mean = s.score_sum / n;
    (s.score_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0)
}

fn derived(
    quantity: &str,
    value: f64,
    std_error: f64,
    tail_bound: f64,
    from: &CoalescenceEstimate,
) -> CoalescenceEstimate {
    CoalescenceEstimate {
        quantity: quantity.to_string(),
        value,
        std_error,
        tail_bound,
        ..from.clone()
    }
}

fn validate(horizon: f64, reps: u64) -> Result<(), CoalescenceError> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(CoalescenceError::BadHorizon(horizon));
    }
    if reps == 0 {
        return Err(CoalescenceError::NoReplicates);
    }
    Ok(())
}

/// Estimates `p1 = p(0|v1|v1+v2)`, `p2 = p(0|v1,v1+v2)` and `p(0|v1)` with
/// `v1, v2` independent kernel draws.
pub fn estimate_bd_probs(
    kernel: &Kernel,
    horizon: f64,
    replicates: u64,
    seed: u64,
) -> Result<BdEstimates, CoalescenceError> {
    validate(horizon, replicates)?;
    let d = kernel.dim();
    let tri = triple_run(kernel, horizon, replicates, seed, "bd-triple", |g| {
        let v1 = kernel.sample_step(g).to_vec();
        let v2 = kernel.sample_step(g);
        let w = add(&v1, v2);
        [vec![0; d], v1, w]
    })?;
    let pair = pair_run(kernel, horizon, replicates, seed, "bd-pair", |g| {
        kernel.sample_step(g).to_vec()
    })?;
    let mk = |q: &str, t: Tally| {
        CoalescenceEstimate::bernoulli(q, t.hits, t.changed, replicates, horizon, kernel, seed)
    };
    let p1 = mk("p(0|v1|v1+v2)", tri.distinct);
    let p2 = mk("p(0|v1,v1+v2)", tri.pair);
    let p01 = mk("p(0|v1)", pair);
    let n = replicates as f64;
    let p2_identity = derived(
        "p(0|v1,v1+v2) via identity",
        (p01.value - p1.value) / 2.0,
        (p01.std_error.powi(2) + p1.std_error.powi(2)).sqrt() / 2.0,
        (p01.tail_bound + p1.tail_bound) / 2.0,
        &p1,
    );
    let identity = IdentityCheck {
        residual: 2.0 * p2.value - (p01.value - p1.value),
        combined_std_error: (score_variance(&tri, replicates) / n + p01.std_error.powi(2)).sqrt(),
    };
    let advisories = [&p1, &p2, &p01]
        .iter()
        .filter_map(|e| e.advisory())
        .collect();
    Ok(BdEstimates {
        p1,
        p2,
        p2_identity,
        p01,
        identity,
        advisories,
    })
}

/// Estimates `pbar1 = p(v1|v2|v2+v3)`, `pbar2 = p(v1|v2,v2+v3)` and
/// `p12 = p(v1|v2)` with `v1, v2, v3` independent kernel draws.
pub fn estimate_db_probs(
    kernel: &Kernel,
    horizon: f64,
    replicates: u64,
    seed: u64,
) -> Result<DbEstimates, CoalescenceError> {
    validate(horizon, replicates)?;
    let kappa = kernel.kappa();
    let tri = triple_run(kernel, horizon, replicates, seed, "db-triple", |g| {
        let v1 = kernel.sample_step(g).to_vec();
        let v2 = kernel.sample_step(g).to_vec();
        let v3 = kernel.sample_step(g);
        let w = add(&v2, v3);
        [v1, v2, w]
    })?;
    let pair = pair_run(kernel, horizon, replicates, seed, "db-pair", |g| {
        let v1 = kernel.sample_step(g).to_vec();
        sub(kernel.sample_step(g), &v1)
    })?;
    let mk = |q: &str, t: Tally| {
        CoalescenceEstimate::bernoulli(q, t.hits, t.changed, replicates, horizon, kernel, seed)
    };
    let pbar1 = mk("p(v1|v2|v2+v3)", tri.distinct);
    let pbar2 = mk("p(v1|v2,v2+v3)", tri.pair);
    let p12 = mk("p(v1|v2)", pair);
    let c = 1.0 + 1.0 / kappa;
    let n = replicates as f64;
    let pbar2_identity = derived(
        "p(v1|v2,v2+v3) via identity",
        (c * p12.value - pbar1.value) / 2.0,
        ((c * p12.std_error).powi(2) + pbar1.std_error.powi(2)).sqrt() / 2.0,
        (c * p12.tail_bound + pbar1.tail_bound) / 2.0,
        &pbar1,
    );
    let identity = IdentityCheck {
        residual: 2.0 * pbar2.value - (c * p12.value - pbar1.value),
        combined_std_error: (score_variance(&tri, replicates) / n + (c * p12.std_error).powi(2))
            .sqrt(),
    };
    let advisories = [&pbar1, &pbar2, &p12]
        .iter()
        .filter_map(|e| e.advisory())
        .collect();
    Ok(DbEstimates {
        pbar1,
        pbar2,
        pbar2_identity,
        p12,
        identity,
        kappa,
        advisories,
    })
}

/// Estimates supplied to [`tarnita_alphas`].
#[derive(Debug, Clone, Copy)]
pub enum RuleEstimates<'a> {
    BirthDeath(&'a BdEstimates),
    DeathBirth(&'a DbEstimates),
}

impl RuleEstimates<'_> {
    fn rule(&self) -> UpdateRule {
        match self {
            RuleEstimates::BirthDeath(_) => UpdateRule::BirthDeath,
            RuleEstimates::DeathBirth(_) => UpdateRule::DeathBirth,
        }
    }
}

/// Coefficients of the favouring statistic: `(p1, p2, p2)` for Birth-Death
/// and `(pbar1, pbar2, pbar2 - p12/kappa)` for Death-Birth, with `kappa`
/// taken from the kernel.
pub fn tarnita_alphas(
    rule: UpdateRule,
    estimates: RuleEstimates<'_>,
    kernel: &Kernel,
) -> Result<TarnitaAlphas, CoalescenceError> {
    match (rule, estimates) {
        (UpdateRule::BirthDeath, RuleEstimates::BirthDeath(e)) => Ok(TarnitaAlphas {
            a1: e.p1.value,
            a2: e.p2.value,
            a3: e.p2.value,
        }),
        (UpdateRule::DeathBirth, RuleEstimates::DeathBirth(e)) => Ok(TarnitaAlphas {
            a1: e.pbar1.value,
            a2: e.pbar2.value,
            a3: e.pbar2.value - e.p12.value / kernel.kappa(),
        }),
        (rule, est) => Err(CoalescenceError::RuleMismatch {
            requested: rule.name(),
            supplied: est.rule().name(),
        }),
    }
}

/// Particle counts of a full-occupancy coalescing walk on the torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusSeries {
    pub times: Vec<f64>,
    pub counts: Vec<u64>,
    pub geometry: TorusGeom,
}

impl CensusSeries {
    /// `counts(t) (1 + t) / N` at each sample time.
    pub fn scaled(&self) -> Vec<f64> {
        let n = self.geometry.sites() as f64;
        self.times
            .iter()
            .zip(&self.counts)
            .map(|(t, c)| *c as f64 * (1.0 + t) / n)
            .collect()
    }

    pub fn is_nonincreasing(&self) -> bool {
        self.counts.windows(2).all(|w| w[1] <= w[0])
    }
}

const EMPTY: u32 = u32::MAX;

/// Coalescing random walk on the torus started with one particle per site.
///
/// Live particles are kept in a dense list; the next jump happens after an
/// exponential time of rate `alive` and moves a uniformly chosen particle,
/// which has the same law as independent rate-1 clocks per particle. When a
/// particle lands on an occupied site the lower particle id survives.
pub struct TorusCoalescence<'a> {
    kernel: &'a Kernel,
    table: NeighborTable,
    occupant: Vec<u32>,
    site_of: Vec<u32>,
    alive: Vec<u32>,
    slot: Vec<u32>,
    time: f64,
    next: f64,
}

impl<'a> TorusCoalescence<'a> {
    pub fn new<R: RngCore + ?Sized>(kernel: &'a Kernel, geom: &TorusGeom, rng: &mut R) -> Self {
        let n = geom.sites() as u32;
        let mut s = TorusCoalescence {
            kernel,
            table: kernel.neighbor_table(geom),
            occupant: (0..n).collect(),
            site_of: (0..n).collect(),
            alive: (0..n).collect(),
            slot: (0..n).collect(),
            time: 0.0,
            next: 0.0,
        };
        s.next = s.draw_wait(rng);
        s
    }

    fn draw_wait<R: RngCore + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.alive.len() <= 1 {
            f64::INFINITY
        } else {
            self.time + rng::exp1(rng) / self.alive.len() as f64
        }
    }

    pub fn alive(&self) -> usize {
        self.alive.len()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn occupied(&self, site: usize) -> bool {
        self.occupant[site] != EMPTY
    }

    /// Runs all jumps up to and including time `t`.
    pub fn advance_to<R: RngCore + ?Sized>(&mut self, t: f64, rng: &mut R) {
        while self.next <= t {
            self.time = self.next;
            self.jump(rng);
            self.next = self.draw_wait(rng);
        }
        self.time = t.max(self.time);
    }

    fn jump<R: RngCore + ?Sized>(&mut self, rng: &mut R) {
        let id = self.alive[rng::index(rng, self.alive.len())];
        let from = self.site_of[id as usize] as usize;
        let to = self.table.get(from, self.kernel.sample_index(rng));
        self.occupant[from] = EMPTY;
        let other = self.occupant[to];
        if other == EMPTY {
            self.occupant[to] = id;
            self.site_of[id as usize] = to as u32;
            return;
        }
        let (keep, drop) = if id < other { (id, other) } else { (other, id) };
        self.occupant[to] = keep;
        self.site_of[keep as usize] = to as u32;
        let k = self.slot[drop as usize] as usize;
        self.alive.swap_remove(k);
        if k < self.alive.len() {
            self.slot[self.alive[k] as usize] = k as u32;
        }
    }
}

/// Upper bound on census horizons, in units of `L^2`.
pub const CENSUS_MAX_SCALE: f64 = 64.0;

/// Runs a full-occupancy coalescing walk on the torus up to `t_max` and
/// records the particle count at each sample time. `t_max` is limited to
/// [`CENSUS_MAX_SCALE`]` * L^2`.
pub fn torus_census<R: RngCore + ?Sized>(
    kernel: &Kernel,
    geom: &TorusGeom,
    t_max: f64,
    sample_times: &[f64],
    rng: &mut R,
) -> Result<CensusSeries, CoalescenceError> {
    let bound = CENSUS_MAX_SCALE * (geom.side() * geom.side()) as f64;
    if !(t_max >= 0.0) || t_max > bound {
        return Err(CoalescenceError::CensusTooLong { t: t_max, bound });
    }
    let ok = sample_times.first().is_none_or(|t| *t >= 0.0)
        && sample_times.windows(2).all(|w| w[1] > w[0])
        && sample_times.last().is_none_or(|t| *t <= t_max);
    if !ok {
        return Err(CoalescenceError::BadSampleTimes { t_max });
    }
    let mut c = TorusCoalescence::new(kernel, geom, rng);
    let mut counts = Vec::with_capacity(sample_times.len());
    for &t in sample_times {
        c.advance_to(t, rng);
        counts.push(c.alive() as u64);
    }
    Ok(CensusSeries {
        times: sample_times.to_vec(),
        counts,
        geometry: *geom,
    })
}

/// Occupancy correlation of two sites in the census at a fixed time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub x: usize,
    pub y: usize,
    pub p_x: f64,
    pub p_y: f64,
    pub p_xy: f64,
    /// Standard error of `p_xy - p_x p_y`.
    pub std_error: f64,
}

impl PairCorrelation {
    pub fn covariance(&self) -> f64 {
        self.p_xy - self.p_x * self.p_y
    }

    /// `p_xy <= p_x p_y + sigmas * std_error`.
    pub fn negatively_correlated(&self, sigmas: f64) -> bool {
        self.covariance() <= sigmas * self.std_error
    }
}

/// Estimates `P(x occupied)`, `P(y occupied)` and `P(both occupied)` at time
/// `t` for each pair, from independent full-occupancy censuses.
pub fn census_pair_correlation(
    kernel: &Kernel,
    geom: &TorusGeom,
    t: f64,
    pairs: &[(usize, usize)],
    replicates: u64,
    seed: u64,
) -> Result<Vec<PairCorrelation>, CoalescenceError> {
    if replicates == 0 {
        return Err(CoalescenceError::NoReplicates);
    }
    let sites = geom.sites();
    if let Some(&(x, y)) = pairs.iter().find(|(x, y)| *x >= sites || *y >= sites) {
        return Err(CoalescenceError::SiteOutOfRange {
            site: x.max(y),
            sites,
        });
    }
    let mut ax = vec![0u64; pairs.len()];
    let mut ay = vec![0u64; pairs.len()];
    let mut axy = vec![0u64; pairs.len()];
    let tag = rng::tag("census-pairs");
    for r in 0..replicates {
        let mut g = rng::stream(seed, &[tag, r]);
        let mut c = TorusCoalescence::new(kernel, geom, &mut g);
        c.advance_to(t, &mut g);
        for (k, &(x, y)) in pairs.iter().enumerate() {
            let (a, b) = (c.occupied(x), c.occupied(y));
            ax[k] += u64::from(a);
            ay[k] += u64::from(b);
            axy[k] += u64::from(a && b);
        }
    }
    let n = replicates as f64;
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(k, &(x, y))| {
            let (px, py, pxy) = (ax[k] as f64 / n, ay[k] as f64 / n, axy[k] as f64 / n);
            // Influence function of p_xy - p_x p_y, averaged over the four
            // outcomes of (1{x}, 1{y}).
            let psi = |a: f64, b: f64| a * b - py * a - px * b;
            let cells = [
                (1.0, 1.0, pxy),
                (1.0, 0.0, px - pxy),
                (0.0, 1.0, py - pxy),
                (0.0, 0.0, 1.0 - px - py + pxy),
            ];
            let mean: f64 = cells.iter().map(|(a, b, w)| w * psi(*a, *b)).sum();
            let var: f64 = cells
                .iter()
                .map(|(a, b, w)| w * (psi(*a, *b) - mean).powi(2))
                .sum();
            PairCorrelation {
                x,
                y,
                p_x: px,
                p_y: py,
                p_xy: pxy,
                std_error: (var.max(0.0) / n).sqrt(),
            }
        })
        .collect())
}

/// Total-variation distance to uniform of a torus walk, estimated from
/// independent replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvEstimate {
    pub t: f64,
    pub replicates: u64,
    /// Plug-in distance between the empirical and the uniform law.
    pub raw: f64,
    /// Expected plug-in distance when the true law is uniform.
    pub bias: f64,
}

impl TvEstimate {
    pub fn adjusted(&self) -> f64 {
        (self.raw - self.bias).max(0.0)
    }
}

/// Plug-in total variation of a walk on the torus started at site 0 and
/// run for time `t`. The bias term uses the normal approximation to
/// multinomial cell counts under the uniform law.
pub fn torus_walk_tv(
    kernel: &Kernel,
    geom: &TorusGeom,
    t: f64,
    replicates: u64,
    seed: u64,
) -> Result<TvEstimate, CoalescenceError> {
    if replicates == 0 {
        return Err(CoalescenceError::NoReplicates);
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(CoalescenceError::BadHorizon(t));
    }
    let table = kernel.neighbor_table(geom);
    let n = geom.sites();
    let mut counts = vec![0u64; n];
    let tag = rng::tag("torus-walk");
    for r in 0..replicates {
        let mut g = rng::stream(seed, &[tag, r]);
        let mut site = 0usize;
        for _ in 0..poisson(t, &mut g) {
            site = table.get(site, kernel.sample_index(&mut g));
        }
        counts[site] += 1;
    }
    let reps = replicates as f64;
    let u = 1.0 / n as f64;
    let raw = 0.5
        * counts
            .iter()
            .map(|c| (*c as f64 / reps - u).abs())
            .sum::<f64>();
    let bias = 0.5 * (2.0 * (n as f64 - 1.0) / (std::f64::consts::PI * reps)).sqrt();
    Ok(TvEstimate {
        t,
        replicates,
        raw,
        bias: bias.min(1.0 - u),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nn() -> Kernel {
        Kernel::nearest_neighbor(3).unwrap()
    }

    fn line() -> Kernel {
        Kernel::without_symmetry_check(3, [(vec![1, 0, 0], 0.5), (vec![-1, 0, 0], 0.5)]).unwrap()
    }

    #[test]
    fn same_site_start_merges_immediately() {
        let mut g = rng::stream(1, &[]);
        let p = run_coalescing_walks(&nn(), &[vec![0, 0, 0], vec![0, 0, 0]], 10.0, &mut g).unwrap();
        assert_eq!(p.class_count(), 1);
        assert_eq!(p.classes(), vec![vec![0, 1]]);
    }

    #[test]
    fn single_walker_is_singleton() {
        let mut g = rng::stream(1, &[]);
        let p = run_coalescing_walks(&nn(), &[vec![3, 0, 0]], 10.0, &mut g).unwrap();
        assert_eq!(p, Partition::singletons(1));
    }

    #[test]
    fn bad_inputs() {
        let mut g = rng::stream(1, &[]);
        assert!(matches!(
            run_coalescing_walks(&nn(), &[vec![0, 0], vec![1, 0]], 10.0, &mut g),
            Err(CoalescenceError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            run_coalescing_walks(&nn(), &[vec![0, 0, 0]], 0.0, &mut g),
            Err(CoalescenceError::BadHorizon(_))
        ));
        assert!(matches!(
            estimate_bd_probs(&nn(), 10.0, 0, 1),
            Err(CoalescenceError::NoReplicates)
        ));
        assert!(matches!(
            run_coalescing_walks(&nn(), &[vec![0, 0, 0], vec![1, 0, 0]], 1e18, &mut g),
            Err(CoalescenceError::HorizonTooLarge(_))
        ));
    }

    #[test]
    fn packing_is_additive_in_each_coordinate() {
        let k = Kernel::nearest_neighbor(5).unwrap();
        let p = Packing::new(&k).unwrap();
        let a = [3, -7, 0, 12, -1];
        let b = [-3, 7, 0, -12, 1];
        assert_eq!(p.pack(&a) + p.pack(&b), 0);
        assert_ne!(p.pack(&[1, 0, 0, 0, 0]), p.pack(&[0, 1, 0, 0, 0]));
        assert_eq!(
            p.pack(&add(&a, &[1, 1, 1, 1, 1])),
            p.pack(&a) + p.pack(&[1, 1, 1, 1, 1])
        );
    }

    #[test]
    fn pair_meeting_matches_polya_constant() {
        // Short horizon: about 0.005 of the meeting mass lies beyond it.
        let mut merged = 0u64;
        let reps = 20_000u64;
        for r in 0..reps {
            let mut g = rng::stream(9, &[r]);
            let p = run_coalescing_walks(&nn(), &[vec![0, 0, 0], vec![1, 0, 0]], 500.0, &mut g)
                .unwrap();
            merged += u64::from(p.class_count() == 1);
        }
        let f = merged as f64 / reps as f64;
        assert!((f - 0.3405).abs() < 0.02, "merged fraction {f}");
    }

    #[test]
    fn bd_identity_holds_on_small_run() {
        let e = estimate_bd_probs(&nn(), 200.0, 20_000, 3).unwrap();
        assert!(e.identity.within(3.0), "{:?}", e.identity);
        assert!(e.p1.value < e.p01.value);
        assert!((e.p01.value - 0.6595).abs() < 0.03);
        let se = e.p1.std_error;
        let v = e.p1.value;
        assert!((se - (v * (1.0 - v) / 20_000.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn db_estimates_are_ordered() {
        let e = estimate_db_probs(&nn(), 200.0, 20_000, 4).unwrap();
        assert!(e.identity.within(3.0), "{:?}", e.identity);
        assert!(e.pbar1.value < e.p12.value);
        assert!(e.p12.value <= 1.0 - 1.0 / 6.0 + 3.0 * e.p12.std_error);
        assert_eq!(e.kappa, nn().kappa());
    }

    #[test]
    fn estimates_are_reproducible() {
        let a = estimate_bd_probs(&nn(), 50.0, 500, 11).unwrap();
        let b = estimate_bd_probs(&nn(), 50.0, 500, 11).unwrap();
        assert_eq!(a, b);
        let c = estimate_bd_probs(&nn(), 50.0, 500, 12).unwrap();
        assert_ne!(a.p1.value, c.p1.value);
    }

    #[test]
    fn line_kernel_raises_horizon_advisory() {
        let e = estimate_bd_probs(&line(), 400.0, 4_000, 5).unwrap();
        assert!(!e.advisories.is_empty());
        assert!(e
            .advisories
            .iter()
            .any(|a| matches!(a, Advisory::HorizonTooSmall { .. })));
        assert!(e.p01.tail_bound > 3.0 * e.p01.std_error);
    }

    #[test]
    fn alphas_by_rule() {
        let bd = estimate_bd_probs(&nn(), 20.0, 200, 1).unwrap();
        let db = estimate_db_probs(&nn(), 20.0, 200, 1).unwrap();
        let a = tarnita_alphas(
            UpdateRule::BirthDeath,
            RuleEstimates::BirthDeath(&bd),
            &nn(),
        )
        .unwrap();
        assert_eq!(a.a2, a.a3);
        assert_eq!(a.a1, bd.p1.value);
        let a = tarnita_alphas(
            UpdateRule::DeathBirth,
            RuleEstimates::DeathBirth(&db),
            &nn(),
        )
        .unwrap();
        assert!((a.a2 - a.a3 - db.p12.value / 6.0).abs() < 1e-12);
        assert!(matches!(
            tarnita_alphas(
                UpdateRule::BirthDeath,
                RuleEstimates::DeathBirth(&db),
                &nn()
            ),
            Err(CoalescenceError::RuleMismatch { .. })
        ));
        let mut zero = db.clone();
        for e in [&mut zero.pbar1, &mut zero.pbar2, &mut zero.p12] {
            e.value = 0.0;
        }
        let a = tarnita_alphas(
            UpdateRule::DeathBirth,
            RuleEstimates::DeathBirth(&zero),
            &nn(),
        )
        .unwrap();
        assert_eq!((a.a1, a.a2, a.a3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn estimate_json_fields() {
        let e = estimate_bd_probs(&nn(), 20.0, 100, 1).unwrap();
        let v: serde_json::Value = serde_json::to_value(&e.p01).unwrap();
        for f in [
            "quantity",
            "value",
            "std_error",
            "replicates",
            "horizon",
            "tail_bound",
            "kernel_id",
            "seed",
        ] {
            assert!(v.get(f).is_some(), "missing {f}");
        }
        assert_eq!(v["kernel_id"], "nn");
    }

    #[test]
    fn census_starts_full_and_decreases() {
        let geom = TorusGeom::new(8, 3).unwrap();
        let mut g = rng::stream(2, &[]);
        let times: Vec<f64> = (0..=20).map(|i| i as f64 * 3.0).collect();
        let s = torus_census(&nn(), &geom, 60.0, &times, &mut g).unwrap();
        assert_eq!(s.counts[0], 512);
        assert!(s.is_nonincreasing());
        assert!(*s.counts.last().unwrap() < 100);
        assert!(torus_census(&nn(), &geom, 60.0, &[2.0, 1.0], &mut g).is_err());
        assert!(torus_census(&nn(), &geom, 1e9, &[1.0], &mut g).is_err());
    }

    #[test]
    fn census_reaches_single_particle() {
        let geom = TorusGeom::new(3, 3).unwrap();
        let mut g = rng::stream(2, &[]);
        let k = nn();
        let mut c = TorusCoalescence::new(&k, &geom, &mut g);
        c.advance_to(500.0, &mut g);
        assert_eq!(c.alive(), 1);
        assert_eq!((0..27).filter(|s| c.occupied(*s)).count(), 1);
    }

    #[test]
    fn census_pairs_negatively_correlated() {
        let geom = TorusGeom::new(6, 3).unwrap();
        let pairs = [(0, 1), (0, 7), (3, 100)];
        let r = census_pair_correlation(&nn(), &geom, 2.0, &pairs, 1500, 8).unwrap();
        for p in &r {
            assert!(p.negatively_correlated(3.0), "{p:?}");
            assert!(p.p_x > 0.0 && p.p_x < 1.0);
        }
    }

    #[test]
    fn tv_at_zero_is_point_mass() {
        let geom = TorusGeom::new(4, 3).unwrap();
        let e = torus_walk_tv(&nn(), &geom, 0.0, 100, 1).unwrap();
        assert!((e.raw - (1.0 - 1.0 / 64.0)).abs() < 1e-12);
    }

    #[test]
    fn tv_decreases_in_time() {
        let geom = TorusGeom::new(6, 3).unwrap();
        let early = torus_walk_tv(&nn(), &geom, 9.0, 20_000, 1).unwrap();
        let late = torus_walk_tv(&nn(), &geom, 144.0, 20_000, 2).unwrap();
        assert!(late.raw < early.raw);
        assert!(late.adjusted() < 0.02, "{late:?}");
    }

    fn arb_starts() -> impl Strategy<Value = Vec<Vec<i32>>> {
        prop::collection::vec(prop::collection::vec(-3i32..=3, 3), 1..6)
    }

    proptest! {
        #[test]
        fn partition_labels_are_class_minima(starts in arb_starts(), seed in 0u64..1000) {
            let mut g = rng::stream(seed, &[]);
            let p = run_coalescing_walks(&nn(), &starts, 30.0, &mut g).unwrap();
            for (i, &l) in p.labels().iter().enumerate() {
                prop_assert!(l <= i);
                prop_assert_eq!(p.labels()[l], l);
            }
            let total: usize = p.classes().iter().map(Vec::len).sum();
            prop_assert_eq!(total, starts.len());
        }

        #[test]
        fn coincident_starts_share_a_class(starts in arb_starts(), seed in 0u64..1000) {
            let mut g = rng::stream(seed, &[]);
            let p = run_coalescing_walks(&nn(), &starts, 5.0, &mut g).unwrap();
            for i in 0..starts.len() {
                for j in 0..starts.len() {
                    if starts[i] == starts[j] {
                        prop_assert!(p.together(i, j));
                    }
                }
            }
        }
    }
}
