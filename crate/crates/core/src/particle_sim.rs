//! Event-driven simulation of spatial games on the torus.
//!
//! Sites are updated by uniformization: candidate events arrive at total
//! rate `N * R`, each at a uniformly chosen site, and are thinned so that
//! every transition happens at exactly its model rate.
//!
//! * Birth-Death: the candidate picks `y ~ p(. - x)` and `z ~ p(. - y)` and
//!   copies `xi(y)` into `x` with probability
//!   `(1 + w G[xi(y)][xi(z)]) / (1 + w g+)`, where `g+ = max(0, max G)`.
//!   Summing over `(y, z)` gives the rate
//!   `f_j(x) + w sum_k f2_jk(x) G_jk` of a flip to `j`.
//! * Death-Birth: the site dies at rate 1 and the replacing neighbour is
//!   drawn by repeating the same `(y, z)` trial until acceptance. The
//!   accepted `y` has law proportional to `p(y - x) psi(y)` with
//!   `psi(y) = sum_z p(z - y)(1 + w G[xi(y)][xi(z)])`, which is the exact
//!   normalized rate rather than its expansion in `w`.
//! * Mutation: at rate `mu` a site is reset to a uniformly random strategy.
//!
//! Time is process time: voter-scale events happen at rate 1 per site, and
//! selection enters at rate `w`.

use rand::RngCore;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::games::{GameMatrix, UpdateRule};
use crate::lattice_kernel::{Kernel, NeighborTable, TorusGeom};
use crate::rng::{self, SimRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("selection strength must be finite and nonnegative, got {0}")]
    BadSelection(f64),
    #[error("mutation rate must be finite and nonnegative, got {0}")]
    BadMutation(f64),
    #[error("w = {w} admits negative rates: it must stay below 1/(n max|G| + 1) = {bound}")]
    NegativeRate { w: f64, bound: f64 },
    #[error("kernel dimension {kernel} does not match torus dimension {torus}")]
    DimensionMismatch { kernel: usize, torus: usize },
    #[error("invalid initial condition: {0}")]
    BadInitial(String),
    #[error("record times must be nonnegative, increasing and at most t_end")]
    BadRecordTimes,
    #[error("t_end must be finite and nonnegative, got {0}")]
    BadHorizon(f64),
    #[error("birth factor lambda must be positive, got {0}")]
    BadLambda(f64),
    #[error("{0}")]
    Unsupported(String),
}

/// Initial strategy assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InitialCondition {
    /// Independent sites with the given strategy densities.
    Product { densities: Vec<f64> },
    /// Explicit strategy per site, in site-index order.
    Explicit { assignment: Vec<u8> },
    /// Every site plays one strategy (0-based).
    AllOne { strategy: u8 },
}

fn default_id() -> String {
    "run".to_string()
}

/// Everything needed to reproduce one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default = "default_id")]
    pub id: String,
    pub geometry: TorusGeom,
    pub kernel: Kernel,
    pub game: GameMatrix,
    pub rule: UpdateRule,
    pub w: f64,
    #[serde(default)]
    pub mu: f64,
    pub t_end: f64,
    pub record_times: Vec<f64>,
    pub seed: u64,
    pub initial: InitialCondition,
}

impl SimConfig {
    /// Largest admissible selection strength for a game, `1/(n max|G| + 1)`
    /// (exclusive).
    pub fn w_bound(game: &GameMatrix) -> f64 {
        1.0 / (game.n() as f64 * game.max_abs() + 1.0)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(SimError::BadSelection(self.w));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(SimError::BadMutation(self.mu));
        }
        let bound = Self::w_bound(&self.game);
        if self.w > 0.0 && self.w >= bound {
            return Err(SimError::NegativeRate { w: self.w, bound });
        }
        if self.kernel.dim() != self.geometry.dim() {
            return Err(SimError::DimensionMismatch {
                kernel: self.kernel.dim(),
                torus: self.geometry.dim(),
            });
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(SimError::BadHorizon(self.t_end));
        }
        check_times(&self.record_times, self.t_end)?;
        check_initial(&self.initial, self.game.n(), self.geometry.sites())
    }

    /// Stable identifier derived from the serialized configuration.
    pub fn config_hash(&self) -> u64 {
        rng::tag(&serde_json::to_string(self).expect("config serializes"))
    }
}

fn check_times(times: &[f64], t_end: f64) -> Result<(), SimError> {
    let ok = times.first().is_none_or(|t| *t >= 0.0)
        && times.windows(2).all(|w| w[1] > w[0])
        && times.last().is_none_or(|t| *t <= t_end);
    if ok {
        Ok(())
    } else {
        Err(SimError::BadRecordTimes)
    }
}

fn check_initial(init: &InitialCondition, n: usize, sites: usize) -> Result<(), SimError> {
    match init {
        InitialCondition::Product { densities } => {
            if densities.len() != n {
                return Err(SimError::BadInitial(format!(
                    "{} densities for {n} strategies",
                    densities.len()
                )));
            }
            if densities.iter().any(|d| !(*d >= 0.0)) {
                return Err(SimError::BadInitial("negative density".into()));
            }
            let s: f64 = densities.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(SimError::BadInitial(format!("densities sum to {s}")));
            }
        }
        InitialCondition::Explicit { assignment } => {
            if assignment.len() != sites {
                return Err(SimError::BadInitial(format!(
                    "assignment has {} sites, torus has {sites}",
                    assignment.len()
                )));
            }
            if let Some(s) = assignment.iter().find(|s| usize::from(**s) >= n) {
                return Err(SimError::BadInitial(format!("strategy {s} out of range")));
            }
        }
        InitialCondition::AllOne { strategy } => {
            if usize::from(*strategy) >= n {
                return Err(SimError::BadInitial(format!(
                    "strategy {strategy} out of range"
                )));
            }
        }
    }
    Ok(())
}

fn draw_initial<R: RngCore + ?Sized>(
    init: &InitialCondition,
    sites: usize,
    rng: &mut R,
) -> Vec<u8> {
    match init {
        InitialCondition::Product { densities } => {
            let last = densities.iter().rposition(|d| *d > 0.0).unwrap_or(0) as u8;
            (0..sites)
                .map(|_| {
                    let u = rng::unit(rng);
                    let mut acc = 0.0;
                    for (k, d) in densities.iter().enumerate() {
                        acc += d;
                        if u < acc {
                            return k as u8;
                        }
                    }
                    last
                })
                .collect()
        }
        InitialCondition::Explicit { assignment } => assignment.clone(),
        InitialCondition::AllOne { strategy } => vec![*strategy; sites],
    }
}

/// Strategy assignment with per-strategy counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeState {
    pub assignment: Vec<u8>,
    pub counts: Vec<u64>,
    pub time: f64,
}

impl LatticeState {
    pub fn new(assignment: Vec<u8>, n: usize) -> Self {
        let mut counts = vec![0; n];
        for &s in &assignment {
            counts[usize::from(s)] += 1;
        }
        LatticeState {
            assignment,
            counts,
            time: 0.0,
        }
    }

    #[inline]
    fn set(&mut self, x: usize, s: u8) {
        let old = self.assignment[x];
        self.counts[usize::from(old)] -= 1;
        self.counts[usize::from(s)] += 1;
        self.assignment[x] = s;
    }

    /// Whether the counts agree with a full recount of the assignment.
    pub fn counts_consistent(&self) -> bool {
        let mut c = vec![0u64; self.counts.len()];
        for &s in &self.assignment {
            c[usize::from(s)] += 1;
        }
        c == self.counts
    }

    pub fn densities(&self) -> Vec<f64> {
        let n = self.assignment.len() as f64;
        self.counts.iter().map(|c| *c as f64 / n).collect()
    }
}

/// Strategy frequencies recorded at fixed times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityTrajectory {
    pub times: Vec<f64>,
    /// Per-strategy counts at each time; densities are `counts / sites`.
    pub counts: Vec<Vec<u64>>,
    pub sites: u64,
    pub config_id: String,
    pub seed: u64,
}

impl DensityTrajectory {
    pub fn density(&self, k: usize) -> Vec<f64> {
        self.counts
            .iter()
            .map(|c| c[k] as f64 / self.sites as f64)
            .collect()
    }

    pub fn densities(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|c| c.iter().map(|v| *v as f64 / self.sites as f64).collect())
            .collect()
    }
}

/// One state change produced by [`Simulator::next_flip`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipEvent {
    pub time: f64,
    pub site: usize,
    pub from: u8,
    pub to: u8,
}

/// Candidate-event statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub candidates: u64,
    pub flips: u64,
}

impl SimStats {
    pub fn rejected_fraction(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            1.0 - self.flips as f64 / self.candidates as f64
        }
    }
}

/// A running simulation.
pub struct Simulator {
    config: SimConfig,
    table: NeighborTable,
    payoff: Vec<f64>,
    n: usize,
    state: LatticeState,
    rng: SimRng,
    /// Total candidate rate per site.
    rate: f64,
    /// Selection budget `1 + w g+` per update.
    budget: f64,
    stats: SimStats,
}

impl Simulator {
    /// Builds a simulator for `config`, drawing the initial state from the
    /// stream `(seed, replicate)`.
    pub fn new(config: SimConfig, replicate: u64) -> Result<Self, SimError> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, &[rng::tag("sim"), replicate]);
        let assignment = draw_initial(&config.initial, config.geometry.sites(), &mut rng);
        Ok(Self::from_parts(config, assignment, rng))
    }

    /// Builds a simulator started from an explicit assignment.
    pub fn with_state(
        config: SimConfig,
        assignment: Vec<u8>,
        rng: SimRng,
    ) -> Result<Self, SimError> {
        config.validate()?;
        check_initial(
            &InitialCondition::Explicit {
                assignment: assignment.clone(),
            },
            config.game.n(),
            config.geometry.sites(),
        )?;
        Ok(Self::from_parts(config, assignment, rng))
    }

    fn from_parts(config: SimConfig, assignment: Vec<u8>, rng: SimRng) -> Self {
        let n = config.game.n();
        let table = config.kernel.neighbor_table(&config.geometry);
        let payoff: Vec<f64> = (0..n * n)
            .map(|k| 1.0 + config.w * config.game.get(k / n, k % n))
            .collect();
        let gplus = config.game.max_entry().max(0.0);
        let budget = 1.0 + config.w * gplus;
        let rate = match config.rule {
            UpdateRule::BirthDeath => budget + config.mu,
            UpdateRule::DeathBirth => 1.0 + config.mu,
        };
        Simulator {
            state: LatticeState::new(assignment, n),
            config,
            table,
            payoff,
            n,
            rng,
            rate,
            budget,
            stats: SimStats::default(),
        }
    }

    pub fn state(&self) -> &LatticeState {
        &self.state
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn stats(&self) -> SimStats {
        self.stats
    }

    /// Candidate rate per site.
    pub fn candidate_rate(&self) -> f64 {
        self.rate
    }

    #[inline]
    fn neighbour(&mut self, x: usize) -> usize {
        let k = self.config.kernel.sample_index(&mut self.rng);
        self.table.get(x, k)
    }

    /// One `(y, z)` selection trial from `x`: returns `y` and whether the
    /// trial is accepted.
    #[inline]
    fn trial(&mut self, x: usize) -> (usize, bool) {
        let y = self.neighbour(x);
        let z = self.neighbour(y);
        let a = &self.state.assignment;
        let g = self.payoff[usize::from(a[y]) * self.n + usize::from(a[z])];
        (y, rng::unit(&mut self.rng) * self.budget < g)
    }

    /// Processes one candidate event at a uniform site and returns the
    /// change it made, if any.
    fn candidate(&mut self) -> Option<(usize, u8, u8)> {
        self.stats.candidates += 1;
        let x = rng::index(&mut self.rng, self.state.assignment.len());
        let from = self.state.assignment[x];
        let u = rng::unit(&mut self.rng) * self.rate;
        let to = if u < self.config.mu {
            rng::index(&mut self.rng, self.n) as u8
        } else {
            match self.config.rule {
                UpdateRule::BirthDeath => {
                    let (y, accept) = self.trial(x);
                    if !accept {
                        return None;
                    }
                    self.state.assignment[y]
                }
                UpdateRule::DeathBirth => loop {
                    let (y, accept) = self.trial(x);
                    if accept {
                        break self.state.assignment[y];
                    }
                },
            }
        };
        if to == from {
            return None;
        }
        self.state.set(x, to);
        self.stats.flips += 1;
        Some((x, from, to))
    }

    /// Advances to the next actual state change.
    pub fn next_flip(&mut self) -> Option<FlipEvent> {
        let total = self.rate * self.state.assignment.len() as f64;
        if self.config.mu == 0.0
            && self
                .state
                .counts
                .iter()
                .any(|c| *c as usize == self.state.assignment.len())
        {
            return None;
        }
        loop {
            self.state.time += rng::exp1(&mut self.rng) / total;
            if let Some((site, from, to)) = self.candidate() {
                return Some(FlipEvent {
                    time: self.state.time,
                    site,
                    from,
                    to,
                });
            }
        }
    }

    /// Runs all candidate events in `(time, t]` and sets the clock to `t`.
    pub fn advance_to(&mut self, t: f64) {
        if t <= self.state.time {
            return;
        }
        let n = self.state.assignment.len();
        let mean = self.rate * n as f64 * (t - self.state.time);
        let events = Poisson::new(mean).map_or(0, |p| p.sample(&mut self.rng) as u64);
        for _ in 0..events {
            if self.config.mu == 0.0 && self.is_absorbed() {
                break;
            }
            self.candidate();
        }
        self.state.time = t;
    }

    fn is_absorbed(&self) -> bool {
        let n = self.state.assignment.len() as u64;
        self.state.counts.contains(&n)
    }

    /// Runs to `t_end`, recording counts at the configured record times.
    pub fn run(&mut self, replicate_seed: u64) -> DensityTrajectory {
        let times = self.config.record_times.clone();
        let mut counts = Vec::with_capacity(times.len());
        for &t in &times {
            self.advance_to(t);
            debug_assert!(self.state.counts_consistent());
            counts.push(self.state.counts.clone());
        }
        self.advance_to(self.config.t_end);
        DensityTrajectory {
            times,
            counts,
            sites: self.state.assignment.len() as u64,
            config_id: self.config.id.clone(),
            seed: replicate_seed,
        }
    }

    /// Exact flip rate of site `x` to strategy `j` in the current state.
    pub fn flip_rate(&self, x: usize, j: u8) -> f64 {
        flip_rate(&self.state, x, j, &self.config)
    }
}

/// Runs replicate `replicate` of `config`.
pub fn run_sim(config: &SimConfig, replicate: u64) -> Result<DensityTrajectory, SimError> {
    let mut sim = Simulator::new(config.clone(), replicate)?;
    let seed = rng::derive_seed(config.seed, &[rng::tag("sim"), replicate]);
    Ok(sim.run(seed))
}

/// `psi(y) = sum_z p(z - y) (1 + w G[xi(y)][xi(z)])`.
fn psi(state: &LatticeState, y: usize, config: &SimConfig, table: &NeighborTable) -> f64 {
    let a = &state.assignment;
    let sy = usize::from(a[y]);
    config
        .kernel
        .iter()
        .enumerate()
        .map(|(k, (_, p))| {
            let z = table.get(y, k);
            p * (1.0 + config.w * config.game.get(sy, usize::from(a[z])))
        })
        .sum()
}

/// Flip rate of site `x` to strategy `j != xi(x)`, evaluated from the model
/// formulas by direct summation. Birth-Death:
/// `f_j + w sum_k f2_jk G_jk`; Death-Birth: the same quantity divided by
/// its sum over all strategies. Mutation adds `mu / n`.
pub fn flip_rate(state: &LatticeState, x: usize, j: u8, config: &SimConfig) -> f64 {
    let table = config.kernel.neighbor_table(&config.geometry);
    let a = &state.assignment;
    let mut toward = 0.0;
    let mut total = 0.0;
    for (k, (_, p)) in config.kernel.iter().enumerate() {
        let y = table.get(x, k);
        let r = p * psi(state, y, config, &table);
        total += r;
        if a[y] == j {
            toward += r;
        }
    }
    let selection = match config.rule {
        UpdateRule::BirthDeath => toward,
        UpdateRule::DeathBirth => toward / total,
    };
    selection + config.mu / config.game.n() as f64
}

/// First-order expansion in `w` of the Death-Birth rate, used to check that
/// the exact quotient differs from it at order `w^2`.
pub fn death_birth_rate_expansion(
    state: &LatticeState,
    x: usize,
    j: u8,
    config: &SimConfig,
) -> f64 {
    let table = config.kernel.neighbor_table(&config.geometry);
    let a = &state.assignment;
    let mut f_j = 0.0;
    let mut sel_j = 0.0;
    let mut sel = 0.0;
    for (k, (_, p)) in config.kernel.iter().enumerate() {
        let y = table.get(x, k);
        let dev = (psi(state, y, config, &table) - 1.0) / config.w.max(f64::MIN_POSITIVE);
        sel += p * dev;
        if a[y] == j {
            f_j += p;
            sel_j += p * dev;
        }
    }
    f_j + config.w * (sel_j - f_j * sel) + config.mu / config.game.n() as f64
}

/// Frequency of `xi(x) = 1, xi(x + offset) = 0` averaged over sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStatistic {
    pub offset: Vec<i32>,
    pub disagreement: f64,
    pub std_error: f64,
}

/// Runs the two-strategy voter model (`w = 0`, `mu = 0`) to time `t` and
/// measures, for each offset, the fraction of sites `x` with strategy 0 at
/// `x` and strategy 1 at `x + offset`, averaged over replicates.
pub fn voter_pair_statistic(
    config: &SimConfig,
    offsets: &[Vec<i32>],
    t: f64,
    replicates: u64,
) -> Result<Vec<PairStatistic>, SimError> {
    if config.w != 0.0 || config.mu != 0.0 || config.game.n() != 2 {
        return Err(SimError::Unsupported(
            "pair statistics need a two-strategy voter model (w = 0, mu = 0)".into(),
        ));
    }
    if !matches!(config.initial, InitialCondition::Product { .. }) {
        return Err(SimError::Unsupported(
            "pair statistics need a product-measure start".into(),
        ));
    }
    if let Some(o) = offsets.iter().find(|o| o.len() != config.geometry.dim()) {
        return Err(SimError::BadInitial(format!(
            "offset {o:?} has wrong dimension"
        )));
    }
    let geom = &config.geometry;
    let mut cfg = config.clone();
    cfg.record_times.clear();
    cfg.t_end = t;
    let mut sums = vec![0.0; offsets.len()];
    let mut squares = vec![0.0; offsets.len()];
    for r in 0..replicates {
        let mut sim = Simulator::new(cfg.clone(), r)?;
        sim.advance_to(t);
        let a = &sim.state().assignment;
        for (k, o) in offsets.iter().enumerate() {
            let hits = (0..geom.sites())
                .filter(|&x| a[x] == 0 && a[geom.translate(x, o)] == 1)
                .count();
            let f = hits as f64 / geom.sites() as f64;
            sums[k] += f;
            squares[k] += f * f;
        }
    }
    let n = replicates as f64;
    Ok(offsets
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let mean = sums[k] / n;
            let var = (squares[k] / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
            PairStatistic {
                offset: o.clone(),
                disagreement: mean,
                std_error: (var / n).sqrt(),
            }
        })
        .collect())
}

/// Contact process with fast voting: two states, voter copies at rate 1,
/// deaths `1 -> 0` at rate `w`, births `0 -> 1` at rate `w lambda f_1(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactConfig {
    pub geometry: TorusGeom,
    pub kernel: Kernel,
    pub lambda: f64,
    pub w: f64,
    /// Initial density of occupied sites (product measure).
    pub density: f64,
    pub t_end: f64,
    pub record_times: Vec<f64>,
    pub seed: u64,
}

/// Trajectory of the occupied density, with the absorption time if the
/// process died out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactTrajectory {
    pub times: Vec<f64>,
    pub occupied: Vec<u64>,
    pub sites: u64,
    pub extinction_time: Option<f64>,
    pub seed: u64,
}

impl ContactTrajectory {
    pub fn density(&self) -> Vec<f64> {
        self.occupied
            .iter()
            .map(|c| *c as f64 / self.sites as f64)
            .collect()
    }
}

/// Runs replicate `replicate` of the contact process with fast voting.
pub fn run_contact_fast_voting(
    config: &ContactConfig,
    replicate: u64,
) -> Result<ContactTrajectory, SimError> {
    if !(config.lambda > 0.0 && config.lambda.is_finite()) {
        return Err(SimError::BadLambda(config.lambda));
    }
    if !(config.w >= 0.0 && config.w.is_finite()) {
        return Err(SimError::BadSelection(config.w));
    }
    if !(0.0..=1.0).contains(&config.density) {
        return Err(SimError::BadInitial(format!("density {}", config.density)));
    }
    if config.kernel.dim() != config.geometry.dim() {
        return Err(SimError::DimensionMismatch {
            kernel: config.kernel.dim(),
            torus: config.geometry.dim(),
        });
    }
    if !(config.t_end >= 0.0 && config.t_end.is_finite()) {
        return Err(SimError::BadHorizon(config.t_end));
    }
    check_times(&config.record_times, config.t_end)?;

    let key = [rng::tag("contact"), replicate];
    let mut rng = rng::stream(config.seed, &key);
    let n = config.geometry.sites();
    let table = config.kernel.neighbor_table(&config.geometry);
    let mut xi: Vec<bool> = (0..n)
        .map(|_| rng::unit(&mut rng) < config.density)
        .collect();
    let mut occupied = xi.iter().filter(|b| **b).count() as u64;
    let death = config.w;
    let birth = config.w * config.lambda;
    let rate = 1.0 + death.max(birth);
    let mut time = 0.0;
    let mut extinction = (occupied == 0).then_some(0.0);
    let mut out = Vec::with_capacity(config.record_times.len());
    let mut targets = config.record_times.clone();
    targets.push(config.t_end);
    let total = rate * n as f64;
    for (idx, &target) in targets.iter().enumerate() {
        while extinction.is_none() {
            let next = time + rng::exp1(&mut rng) / total;
            if next > target {
                break;
            }
            time = next;
            let x = rng::index(&mut rng, n);
            let u = rng::unit(&mut rng) * rate;
            let before = xi[x];
            if u < 1.0 {
                let y = table.get(x, config.kernel.sample_index(&mut rng));
                xi[x] = xi[y];
            } else if before {
                if u - 1.0 < death {
                    xi[x] = false;
                }
            } else if u - 1.0 < birth {
                let y = table.get(x, config.kernel.sample_index(&mut rng));
                xi[x] = xi[y];
            }
            if xi[x] != before {
                if xi[x] {
                    occupied += 1;
                } else {
                    occupied -= 1;
                    if occupied == 0 {
                        extinction = Some(time);
                    }
                }
            }
        }
        if extinction.is_none() {
            time = target;
        }
        if idx < config.record_times.len() {
            out.push(occupied);
        }
    }
    Ok(ContactTrajectory {
        times: config.record_times.clone(),
        occupied: out,
        sites: n as u64,
        extinction_time: extinction,
        seed: rng::derive_seed(config.seed, &key),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(side: usize, game: GameMatrix, rule: UpdateRule, w: f64) -> SimConfig {
        let n = game.n();
        SimConfig {
            id: "test".into(),
            geometry: TorusGeom::new(side, 3).unwrap(),
            kernel: Kernel::nearest_neighbor(3).unwrap(),
            game,
            rule,
            w,
            mu: 0.0,
            t_end: 10.0,
            record_times: vec![0.0, 5.0, 10.0],
            seed: 17,
            initial: InitialCondition::Product {
                densities: vec![1.0 / n as f64; n],
            },
        }
    }

    fn pd() -> GameMatrix {
        GameMatrix::two_by_two(1.0, -0.5, 1.5, 0.0).unwrap()
    }

    #[test]
    fn validation() {
        let mut c = config(4, pd(), UpdateRule::BirthDeath, 0.1);
        assert!(c.validate().is_ok());
        c.w = 0.5;
        assert!(matches!(c.validate(), Err(SimError::NegativeRate { .. })));
        c.w = -1.0;
        assert!(matches!(c.validate(), Err(SimError::BadSelection(_))));
        let mut c = config(4, pd(), UpdateRule::BirthDeath, 0.1);
        c.record_times = vec![1.0, 0.5];
        assert_eq!(c.validate(), Err(SimError::BadRecordTimes));
        c.record_times = vec![];
        c.initial = InitialCondition::Product {
            densities: vec![0.5, 0.6],
        };
        assert!(matches!(c.validate(), Err(SimError::BadInitial(_))));
        c.initial = InitialCondition::AllOne { strategy: 2 };
        assert!(matches!(c.validate(), Err(SimError::BadInitial(_))));
    }

    #[test]
    fn voter_rate_is_neighbour_frequency() {
        let c = config(5, pd(), UpdateRule::BirthDeath, 0.0);
        let sim = Simulator::new(c.clone(), 0).unwrap();
        let st = sim.state();
        let table = c.kernel.neighbor_table(&c.geometry);
        for x in 0..c.geometry.sites() {
            let j = 1 - st.assignment[x];
            let f = (0..6)
                .filter(|k| st.assignment[table.get(x, *k)] == j)
                .count() as f64
                / 6.0;
            assert!((sim.flip_rate(x, j) - f).abs() < 1e-15);
            let mut db = c.clone();
            db.rule = UpdateRule::DeathBirth;
            assert!((flip_rate(st, x, j, &db) - f).abs() < 1e-15);
        }
    }

    #[test]
    fn single_strategy_is_absorbing() {
        let mut c = config(4, pd(), UpdateRule::BirthDeath, 0.1);
        c.initial = InitialCondition::AllOne { strategy: 0 };
        let mut sim = Simulator::new(c.clone(), 0).unwrap();
        for x in 0..64 {
            assert_eq!(sim.flip_rate(x, 1), 0.0);
        }
        assert!(sim.next_flip().is_none());
        let tr = run_sim(&c, 0).unwrap();
        assert!(tr.density(0).iter().all(|u| *u == 1.0));
    }

    #[test]
    fn mutation_leaves_absorbing_state() {
        let mut c = config(4, pd(), UpdateRule::DeathBirth, 0.1);
        c.initial = InitialCondition::AllOne { strategy: 0 };
        c.mu = 0.01;
        let mut sim = Simulator::new(c, 0).unwrap();
        assert!((sim.flip_rate(0, 1) - 0.005).abs() < 1e-15);
        let e = sim.next_flip().unwrap();
        assert_eq!((e.from, e.to), (0, 1));
    }

    #[test]
    fn death_birth_quotient_is_first_order_close() {
        let g = GameMatrix::from_rows(vec![
            vec![0.3, -1.0, 0.7],
            vec![1.2, 0.0, -0.4],
            vec![-0.8, 0.5, 0.9],
        ])
        .unwrap();
        let mut errs = Vec::new();
        for w in [0.04, 0.02, 0.01] {
            let c = config(4, g.clone(), UpdateRule::DeathBirth, w);
            let sim = Simulator::new(c.clone(), 3).unwrap();
            let st = sim.state();
            let mut worst: f64 = 0.0;
            for x in 0..64 {
                for j in 0..3u8 {
                    if j != st.assignment[x] {
                        let d = flip_rate(st, x, j, &c) - death_birth_rate_expansion(st, x, j, &c);
                        worst = worst.max(d.abs());
                    }
                }
            }
            errs.push(worst);
        }
        assert!(errs[0] > 0.0);
        for k in 0..2 {
            let ratio = errs[k] / errs[k + 1];
            assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let c = config(5, pd(), UpdateRule::BirthDeath, 0.1);
        assert_eq!(run_sim(&c, 3).unwrap(), run_sim(&c, 3).unwrap());
        assert_ne!(
            run_sim(&c, 3).unwrap().counts,
            run_sim(&c, 4).unwrap().counts
        );
    }

    #[test]
    fn counts_stay_consistent() {
        for rule in [UpdateRule::BirthDeath, UpdateRule::DeathBirth] {
            let mut c = config(5, pd(), rule, 0.2);
            c.mu = 0.05;
            let mut sim = Simulator::new(c, 1).unwrap();
            for _ in 0..2000 {
                sim.next_flip();
            }
            assert!(sim.state().counts_consistent());
            assert_eq!(sim.state().counts.iter().sum::<u64>(), 125);
            let s = sim.stats();
            assert!(s.flips <= s.candidates);
        }
    }

    #[test]
    fn voter_density_is_a_martingale() {
        let mut c = config(6, pd(), UpdateRule::BirthDeath, 0.0);
        c.initial = InitialCondition::Product {
            densities: vec![0.3, 0.7],
        };
        c.record_times = vec![0.0, 20.0];
        c.t_end = 20.0;
        let reps = 200;
        let mut diffs = Vec::new();
        for r in 0..reps {
            let tr = run_sim(&c, r).unwrap();
            let u = tr.density(0);
            diffs.push(u[1] - u[0]);
        }
        let mean = diffs.iter().sum::<f64>() / reps as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!(
            mean.abs() < 3.0 * (var / reps as f64).sqrt(),
            "drift {mean}"
        );
    }

    #[test]
    fn contact_all_empty_stays_empty() {
        let c = ContactConfig {
            geometry: TorusGeom::new(4, 3).unwrap(),
            kernel: Kernel::nearest_neighbor(3).unwrap(),
            lambda: 3.0,
            w: 0.1,
            density: 0.0,
            t_end: 10.0,
            record_times: vec![1.0, 10.0],
            seed: 1,
        };
        let tr = run_contact_fast_voting(&c, 0).unwrap();
        assert_eq!(tr.occupied, vec![0, 0]);
        assert_eq!(tr.extinction_time, Some(0.0));
    }

    #[test]
    fn contact_without_births_dies() {
        let c = ContactConfig {
            geometry: TorusGeom::new(4, 3).unwrap(),
            kernel: Kernel::nearest_neighbor(3).unwrap(),
            lambda: 1e-9,
            w: 0.5,
            density: 1.0,
            t_end: 100.0,
            record_times: vec![0.0, 100.0],
            seed: 1,
        };
        let tr = run_contact_fast_voting(&c, 0).unwrap();
        assert_eq!(tr.occupied[1], 0);
        assert!(tr.extinction_time.unwrap() < 100.0);
    }

    #[test]
    fn config_json_roundtrip() {
        let c = config(4, pd(), UpdateRule::DeathBirth, 0.1);
        let s = serde_json::to_string(&c).unwrap();
        let back: SimConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
    }
}
