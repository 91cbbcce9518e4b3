//! Payoff matrices, replicator and limiting reaction terms, the 2x2
//! classification of cubic reactions, and the linear favouring statistic.
//!
//! A game `G` acts through `1 + wG`; every quantity here is expressed in
//! terms of `G` alone. Reaction terms are parameterized by coalescence
//! probabilities of random walks ([`ReactionParams`]) and come in two
//! flavours, one per update rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the simplex constraint for frequency vectors.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Boundary derivatives below this magnitude are treated as zero.
pub const DEGENERACY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("a game needs at least 2 strategies, got {0}")]
    TooFewStrategies(usize),
    #[error("at most 255 strategies are supported, got {0}")]
    TooManyStrategies(usize),
    #[error("row {row} has {got} entries, expected {expected}")]
    RaggedRow {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("entry ({0}, {1}) is not finite")]
    NonFinite(usize, usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("frequency vector is not on the simplex: {0}")]
    NonSimplexInput(String),
    #[error("the all-distinct coalescence probability is zero, the modified game is undefined")]
    DegenerateP1,
    #[error("boundary derivative {which} = {value:e} is zero; the cubic is degenerate")]
    Degenerate { which: &'static str, value: f64 },
    #[error("classification needs a 2x2 game, got n = {0}")]
    NotTwoByTwo(usize),
    #[error("strategy index {k} out of range for n = {n}")]
    StrategyOutOfRange { k: usize, n: usize },
    #[error("reaction at the uniform point ({reaction:e}) disagrees with statistic/n ({statistic:e}) for strategy {k}")]
    SignDisagreement {
        k: usize,
        reaction: f64,
        statistic: f64,
    },
    #[error("invalid reaction parameters: {0}")]
    InvalidParams(String),
}

/// Update rule of the spatial game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateRule {
    /// A site reproduces at rate equal to its payoff; the offspring
    /// replaces a random neighbour.
    BirthDeath,
    /// A site dies at rate 1 and is replaced by a neighbour chosen with
    /// probability proportional to kernel weight times payoff.
    DeathBirth,
}

impl UpdateRule {
    pub fn name(self) -> &'static str {
        match self {
            UpdateRule::BirthDeath => "birth-death",
            UpdateRule::DeathBirth => "death-birth",
        }
    }
}

/// An `n x n` payoff matrix; entry `(i, j)` is the payoff to strategy `i`
/// against strategy `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GameSpec", into = "GameSpec")]
pub struct GameMatrix {
    n: usize,
    entries: Vec<f64>,
}

/// JSON shape of a game: `{ "n": 2, "rows": [[a, b], [c, d]] }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub n: usize,
    pub rows: Vec<Vec<f64>>,
}

impl TryFrom<GameSpec> for GameMatrix {
    type Error = GameError;
    fn try_from(spec: GameSpec) -> Result<Self, GameError> {
        if spec.rows.len() != spec.n {
            return Err(GameError::DimensionMismatch {
                expected: spec.n,
                got: spec.rows.len(),
            });
        }
        GameMatrix::from_rows(spec.rows)
    }
}

impl From<GameMatrix> for GameSpec {
    fn from(g: GameMatrix) -> Self {
        GameSpec {
            n: g.n,
            rows: g.entries.chunks(g.n).map(<[f64]>::to_vec).collect(),
        }
    }
}

impl GameMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, GameError> {
        let n = rows.len();
        if n < 2 {
            return Err(GameError::TooFewStrategies(n));
        }
        if n > 255 {
            return Err(GameError::TooManyStrategies(n));
        }
        let mut entries = Vec::with_capacity(n * n);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(GameError::RaggedRow {
                    row: i,
                    got: row.len(),
                    expected: n,
                });
            }
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(GameError::NonFinite(i, j));
                }
            }
            entries.extend(row);
        }
        Ok(GameMatrix { n, entries })
    }

    /// The two-strategy game `[[alpha, beta], [gamma, delta]]`.
    pub fn two_by_two(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Result<Self, GameError> {
        GameMatrix::from_rows(vec![vec![alpha, beta], vec![gamma, delta]])
    }

    pub fn constant(n: usize, value: f64) -> Result<Self, GameError> {
        GameMatrix::from_rows(vec![vec![value; n]; n])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_entry(&self) -> f64 {
        self.entries
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.entries.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Row mean `(1/n) sum_i G[k][i]`.
    pub fn row_mean(&self, k: usize) -> f64 {
        (0..self.n).map(|i| self.get(k, i)).sum::<f64>() / self.n as f64
    }

    /// Column mean `(1/n) sum_i G[i][k]`.
    pub fn col_mean(&self, k: usize) -> f64 {
        (0..self.n).map(|i| self.get(i, k)).sum::<f64>() / self.n as f64
    }

    /// Diagonal mean `(1/n) sum_i G[i][i]`.
    pub fn diag_mean(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum::<f64>() / self.n as f64
    }

    /// Grand mean over all entries.
    pub fn grand_mean(&self) -> f64 {
        self.entries.iter().sum::<f64>() / (self.n * self.n) as f64
    }

    /// `a * self + b * other`, entrywise.
    pub fn combine(&self, a: f64, other: &GameMatrix, b: f64) -> Result<GameMatrix, GameError> {
        if other.n != self.n {
            return Err(GameError::DimensionMismatch {
                expected: self.n,
                got: other.n,
            });
        }
        Ok(GameMatrix {
            n: self.n,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    /// Adds `c` to every entry.
    pub fn shifted(&self, c: f64) -> GameMatrix {
        GameMatrix {
            n: self.n,
            entries: self.entries.iter().map(|v| v + c).collect(),
        }
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.n).map(<[f64]>::to_vec).collect()
    }
}

/// Coalescence probabilities that parameterize the limiting reaction.
///
/// For Birth-Death only `p1`, `p2` are used. For Death-Birth the barred
/// probabilities `pbar1`, `pbar2`, the pair probability `p12` and `kappa`
/// are used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactionParams {
    pub rule: UpdateRule,
    pub p1: f64,
    pub p2: f64,
    pub pbar1: f64,
    pub pbar2: f64,
    pub p12: f64,
    pub kappa: f64,
}

impl ReactionParams {
    /// Birth-Death parameters.
    pub fn birth_death(p1: f64, p2: f64) -> Self {
        ReactionParams {
            rule: UpdateRule::BirthDeath,
            p1,
            p2,
            pbar1: 0.0,
            pbar2: 0.0,
            p12: 0.0,
            kappa: 1.0,
        }
    }

    /// Death-Birth parameters.
    pub fn death_birth(pbar1: f64, pbar2: f64, p12: f64, kappa: f64) -> Self {
        ReactionParams {
            rule: UpdateRule::DeathBirth,
            p1: 0.0,
            p2: 0.0,
            pbar1,
            pbar2,
            p12,
            kappa,
        }
    }

    /// Plain replicator dynamics (no coalescence).
    pub fn replicator() -> Self {
        ReactionParams::birth_death(1.0, 0.0)
    }

    pub fn validate(&self) -> Result<(), GameError> {
        let probs = [self.p1, self.p2, self.pbar1, self.pbar2, self.p12];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(GameError::InvalidParams(format!(
                "probabilities must lie in [0, 1]: {probs:?}"
            )));
        }
        if !(self.kappa >= 1.0) {
            return Err(GameError::InvalidParams(format!(
                "kappa must be at least 1, got {}",
                self.kappa
            )));
        }
        Ok(())
    }

    /// Coefficient of the replicator term (`p1` or `pbar1`).
    pub fn leading(&self) -> f64 {
        match self.rule {
            UpdateRule::BirthDeath => self.p1,
            UpdateRule::DeathBirth => self.pbar1,
        }
    }

    /// Coefficient of the symmetric pair term (`p2` or `pbar2`).
    pub fn pair(&self) -> f64 {
        match self.rule {
            UpdateRule::BirthDeath => self.p2,
            UpdateRule::DeathBirth => self.pbar2,
        }
    }

    /// Coefficient of the antisymmetric term, `p12 / kappa` (Death-Birth
    /// only).
    pub fn skew(&self) -> f64 {
        match self.rule {
            UpdateRule::BirthDeath => 0.0,
            UpdateRule::DeathBirth => self.p12 / self.kappa,
        }
    }

    /// Coefficients of the favouring statistic implied by these parameters.
    pub fn alphas(&self) -> TarnitaAlphas {
        TarnitaAlphas {
            a1: self.leading(),
            a2: self.pair(),
            a3: self.pair() - self.skew(),
        }
    }
}

/// Coefficients `(alpha_1, alpha_2, alpha_3)` of the linear favouring
/// statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TarnitaAlphas {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl TarnitaAlphas {
    /// The two-strategy ratio `sigma` for which the statistic of strategy
    /// 1 has the sign of `sigma (alpha - delta) + beta - gamma`.
    pub fn sigma(&self) -> f64 {
        (self.a1 + 2.0 * self.a2) / (self.a1 + 2.0 * self.a3)
    }
}

/// Classes of the two-strategy cubic `u(1-u)(b + Gamma u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CubicCase {
    /// Interior fixed point, attracting.
    S1,
    /// Interior fixed point, repelling.
    S2,
    /// Negative on (0, 1): strategy 2 takes over.
    S3,
    /// Positive on (0, 1): strategy 1 takes over.
    S4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicClass {
    pub case: CubicCase,
    /// Interior root, present for S1 and S2.
    pub ubar: Option<f64>,
    /// Effective `beta - delta`.
    pub b: f64,
    /// Effective `Gamma = alpha - beta - gamma + delta`.
    pub gamma: f64,
}

fn check_frequencies(n: usize, u: &[f64]) -> Result<(), GameError> {
    if u.len() != n {
        return Err(GameError::DimensionMismatch {
            expected: n,
            got: u.len(),
        });
    }
    if let Some(v) = u.iter().find(|v| !(**v >= 0.0)) {
        return Err(GameError::NonSimplexInput(format!("negative entry {v}")));
    }
    let s: f64 = u.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(GameError::NonSimplexInput(format!("entries sum to {s}")));
    }
    Ok(())
}

/// Replicator right-hand side without input checks; writes into `out`.
pub fn replicator_into(g: &GameMatrix, u: &[f64], out: &mut [f64]) {
    let n = g.n;
    let mut mean = 0.0;
    for i in 0..n {
        let fi: f64 = (0..n).map(|k| g.get(i, k) * u[k]).sum();
        out[i] = fi;
        mean += u[i] * fi;
    }
    for i in 0..n {
        out[i] = u[i] * (out[i] - mean);
    }
}

/// `u_i ((G u)_i - u^T G u)`.
pub fn replicator_rhs(g: &GameMatrix, u: &[f64]) -> Result<Vec<f64>, GameError> {
    check_frequencies(g.n, u)?;
    let mut out = vec![0.0; g.n];
    replicator_into(g, u, &mut out);
    Ok(out)
}

/// Limiting reaction term without input checks; writes into `out`.
pub fn reaction_into(g: &GameMatrix, params: &ReactionParams, u: &[f64], out: &mut [f64]) {
    let n = g.n;
    replicator_into(g, u, out);
    let (lead, pair, skew) = (params.leading(), params.pair(), params.skew());
    for i in 0..n {
        let mut sym = 0.0;
        let mut anti = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let uij = u[i] * u[j];
            sym += uij * (g.get(i, i) - g.get(j, i) + g.get(i, j) - g.get(j, j));
            anti += uij * (g.get(i, j) - g.get(j, i));
        }
        out[i] = lead * out[i] + pair * sym - skew * anti;
    }
}

/// Limiting reaction term for the rule in `params`.
pub fn reaction_rhs(
    g: &GameMatrix,
    params: &ReactionParams,
    u: &[f64],
) -> Result<Vec<f64>, GameError> {
    check_frequencies(g.n, u)?;
    let mut out = vec![0.0; g.n];
    reaction_into(g, params, u, &mut out);
    Ok(out)
}

/// The skew-symmetric correction `A` (or `A-bar`) alone.
pub fn skew_correction(g: &GameMatrix, params: &ReactionParams) -> Result<GameMatrix, GameError> {
    let lead = params.leading();
    if lead.abs() <= DEGENERACY_TOL {
        return Err(GameError::DegenerateP1);
    }
    let n = g.n;
    let (pair, skew) = (params.pair() / lead, params.skew() / lead);
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            entries[i * n + j] = pair * (g.get(i, i) + g.get(i, j) - g.get(j, i) - g.get(j, j))
                - skew * (g.get(i, j) - g.get(j, i));
        }
    }
    Ok(GameMatrix { n, entries })
}

/// `A + G`: the game whose replicator dynamics, scaled by the leading
/// coefficient, equal the limiting reaction.
pub fn modified_game(g: &GameMatrix, params: &ReactionParams) -> Result<GameMatrix, GameError> {
    skew_correction(g, params)?.combine(1.0, g, 1.0)
}

/// Classifies the effective cubic of a 2x2 game.
pub fn classify_2x2(g: &GameMatrix, params: &ReactionParams) -> Result<CubicClass, GameError> {
    if g.n != 2 {
        return Err(GameError::NotTwoByTwo(g.n));
    }
    let m = modified_game(g, params)?;
    let (alpha, beta, gamma, delta) = (m.get(0, 0), m.get(0, 1), m.get(1, 0), m.get(1, 1));
    classify_cubic(beta - delta, alpha - beta - gamma + delta)
}

/// Classifies `u(1-u)(b + Gamma u)` by the signs of its derivatives at 0
/// and 1.
pub fn classify_cubic(b: f64, gamma: f64) -> Result<CubicClass, GameError> {
    let d0 = b;
    let d1 = -(b + gamma);
    if d0.abs() <= DEGENERACY_TOL {
        return Err(GameError::Degenerate {
            which: "phi'(0)",
            value: d0,
        });
    }
    if d1.abs() <= DEGENERACY_TOL {
        return Err(GameError::Degenerate {
            which: "phi'(1)",
            value: d1,
        });
    }
    let case = match (d0 > 0.0, d1 > 0.0) {
        (true, true) => CubicCase::S1,
        (false, false) => CubicCase::S2,
        (false, true) => CubicCase::S3,
        (true, false) => CubicCase::S4,
    };
    let ubar = matches!(case, CubicCase::S1 | CubicCase::S2).then(|| -b / gamma);
    Ok(CubicClass {
        case,
        ubar,
        b,
        gamma,
    })
}

/// `a1 (G_k* - G) + a2 (G_kk - G_**) + a3 (G_k* - G_*k)` for strategy `k`
/// (0-based). Positive means `k` is favoured.
pub fn tarnita_statistic(
    g: &GameMatrix,
    k: usize,
    alphas: &TarnitaAlphas,
) -> Result<f64, GameError> {
    if k >= g.n {
        return Err(GameError::StrategyOutOfRange { k, n: g.n });
    }
    let row = g.row_mean(k);
    Ok(alphas.a1 * (row - g.grand_mean())
        + alphas.a2 * (g.get(k, k) - g.diag_mean())
        + alphas.a3 * (row - g.col_mean(k)))
}

/// Verdict of [`favored_by_selection`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Favor {
    Favored,
    Disfavored,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FavorRecord {
    pub strategy: usize,
    pub verdict: Favor,
    /// Reaction term of strategy `k` at the uniform point.
    pub reaction: f64,
    /// The favouring statistic; equals `n * reaction`.
    pub statistic: f64,
}

impl FavorRecord {
    pub fn is_favored(&self) -> bool {
        self.verdict == Favor::Favored
    }
}

/// Decides whether strategy `k` (0-based) is favoured, by the sign of the
/// reaction at the uniform frequency vector. The statistic computed from
/// the same parameters is cross-checked against it.
pub fn favored_by_selection(
    g: &GameMatrix,
    params: &ReactionParams,
    k: usize,
) -> Result<FavorRecord, GameError> {
    let n = g.n;
    if k >= n {
        return Err(GameError::StrategyOutOfRange { k, n });
    }
    let uniform = vec![1.0 / n as f64; n];
    let reaction = reaction_rhs(g, params, &uniform)?[k];
    let statistic = tarnita_statistic(g, k, &params.alphas())?;
    let scale = g.max_abs().max(1.0);
    let tol = 1e-12 * scale;
    if (reaction - statistic / n as f64).abs() > tol {
        return Err(GameError::SignDisagreement {
            k,
            reaction,
            statistic,
        });
    }
    let verdict = if reaction.abs() <= tol {
        Favor::Neutral
    } else if reaction > 0.0 {
        Favor::Favored
    } else {
        Favor::Disfavored
    };
    Ok(FavorRecord {
        strategy: k,
        verdict,
        reaction,
        statistic,
    })
}
