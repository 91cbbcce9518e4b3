//! Deterministic limits: the mean-field ODE (with mutation) and the
//! reaction-diffusion PDE on a periodic grid.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::games::{reaction_into, GameMatrix, ReactionParams, SIMPLEX_TOL};

#[derive(Debug, Error)]
pub enum LimitError {
    #[error("state left the simplex at t = {t}: {detail}")]
    SimplexDrift { t: f64, detail: String },
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("explicit scheme unstable: dt = {dt} exceeds dx^2/(2 d sigma^2) = {limit}")]
    StabilityViolation { dt: f64, limit: f64 },
    #[error(
        "fixed-point iteration did not converge in {iterations} steps (residual {residual:e})"
    )]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A reaction term on the simplex of `n` strategies.
pub trait Reaction {
    fn n(&self) -> usize;
    /// Writes `phi(u)` into `out`; `u` is assumed to lie on the simplex.
    fn eval(&self, u: &[f64], out: &mut [f64]);
}

/// `phi` from a game matrix and coalescence parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GameReaction {
    pub game: GameMatrix,
    pub params: ReactionParams,
}

impl GameReaction {
    pub fn new(game: GameMatrix, params: ReactionParams) -> Self {
        GameReaction { game, params }
    }
}

impl Reaction for GameReaction {
    fn n(&self) -> usize {
        self.game.n()
    }
    fn eval(&self, u: &[f64], out: &mut [f64]) {
        reaction_into(&self.game, &self.params, u, out);
    }
}

/// The contact-with-fast-voting reaction `beta u (1 - u) - u` on the
/// occupied density, written as a two-component system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactReaction {
    pub beta: f64,
}

impl ContactReaction {
    /// The nonzero rest point `(beta - 1)/beta`; zero when `beta <= 1`.
    pub fn fixed_point(&self) -> f64 {
        ((self.beta - 1.0) / self.beta).max(0.0)
    }
}

impl Reaction for ContactReaction {
    fn n(&self) -> usize {
        2
    }
    fn eval(&self, u: &[f64], out: &mut [f64]) {
        let f = self.beta * u[0] * (1.0 - u[0]) - u[0];
        out[0] = f;
        out[1] = -f;
    }
}

/// Zero reaction, for pure diffusion or pure mutation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoReaction(pub usize);

impl Reaction for NoReaction {
    fn n(&self) -> usize {
        self.0
    }
    fn eval(&self, _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// `du/dt = phi(u) + (mu/w)(1/n - u)`.
pub struct OdeSpec<'a> {
    pub reaction: &'a dyn Reaction,
    pub mu_over_w: f64,
    pub u0: Vec<f64>,
    pub t_end: f64,
    /// Times at which the solution is reported; `t_end` is always reported.
    pub sample_times: Vec<f64>,
    pub initial_step: f64,
    /// Absolute and relative local error tolerance.
    pub tolerance: f64,
}

impl<'a> OdeSpec<'a> {
    pub fn new(reaction: &'a dyn Reaction, u0: Vec<f64>, t_end: f64) -> Self {
        OdeSpec {
            reaction,
            mu_over_w: 0.0,
            u0,
            t_end,
            sample_times: Vec::new(),
            initial_step: 1e-3,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub steps: usize,
    pub rejected: usize,
}

impl OdeTrajectory {
    pub fn last(&self) -> &[f64] {
        self.states
            .last()
            .expect("trajectory has at least one state")
    }

    /// Linear interpolation of component `k` at time `t`.
    pub fn component_at(&self, k: usize, t: f64) -> f64 {
        let i = self.times.partition_point(|s| *s < t);
        if i == 0 {
            return self.states[0][k];
        }
        if i >= self.times.len() {
            return self.last()[k];
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let th = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
        self.states[i - 1][k] * (1.0 - th) + self.states[i][k] * th
    }
}

fn check_simplex(u: &[f64], t: f64) -> Result<(), LimitError> {
    let s: f64 = u.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(LimitError::SimplexDrift {
            t,
            detail: format!("components sum to {s}"),
        });
    }
    if let Some(v) = u.iter().find(|v| !(**v >= -SIMPLEX_TOL)) {
        return Err(LimitError::SimplexDrift {
            t,
            detail: format!("component {v} is negative"),
        });
    }
    Ok(())
}

struct Rhs<'a> {
    reaction: &'a dyn Reaction,
    mu_over_w: f64,
    inv_n: f64,
}

impl Rhs<'_> {
    fn eval(&self, u: &[f64], out: &mut [f64]) {
        self.reaction.eval(u, out);
        if self.mu_over_w != 0.0 {
            for (o, x) in out.iter_mut().zip(u) {
                *o += self.mu_over_w * (self.inv_n - x);
            }
        }
    }
}

// Dormand-Prince 5(4) tableau.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates the mutation-augmented limiting ODE with adaptive
/// Dormand-Prince 5(4) steps. Steps are shortened to land exactly on the
/// sample times. The simplex is checked after every accepted step and is
/// never renormalized.
pub fn integrate_ode(spec: &OdeSpec<'_>) -> Result<OdeTrajectory, LimitError> {
    let n = spec.reaction.n();
    if spec.u0.len() != n {
        return Err(LimitError::InvalidSpec(format!(
            "u0 has {} components, reaction has {n}",
            spec.u0.len()
        )));
    }
    if !(spec.mu_over_w >= 0.0) {
        return Err(LimitError::InvalidSpec("mu/w must be nonnegative".into()));
    }
    if !(spec.t_end >= 0.0 && spec.t_end.is_finite()) {
        return Err(LimitError::InvalidSpec(format!("t_end = {}", spec.t_end)));
    }
    if !(spec.tolerance > 0.0 && spec.initial_step > 0.0) {
        return Err(LimitError::InvalidSpec(
            "step control must be positive".into(),
        ));
    }
    check_simplex(&spec.u0, 0.0)?;
    let mut marks: Vec<f64> = spec
        .sample_times
        .iter()
        .copied()
        .filter(|t| *t > 0.0 && *t < spec.t_end)
        .collect();
    marks.sort_by(f64::total_cmp);
    marks.dedup();
    marks.push(spec.t_end);

    let rhs = Rhs {
        reaction: spec.reaction,
        mu_over_w: spec.mu_over_w,
        inv_n: 1.0 / n as f64,
    };
    let mut out = OdeTrajectory {
        times: vec![0.0],
        states: vec![spec.u0.clone()],
        steps: 0,
        rejected: 0,
    };
    let mut u = spec.u0.clone();
    let mut t = 0.0;
    let mut h = spec.initial_step;
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut u5 = vec![0.0; n];
    rhs.eval(&u, &mut k[0]);
    for &mark in &marks {
        while t < mark {
            let last = mark - t <= h * (1.0 + 1e-12);
            let step = if last { mark - t } else { h };
            for s in 1..7 {
                for i in 0..n {
                    tmp[i] = u[i] + step * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>();
                }
                let (before, after) = k.split_at_mut(s);
                let _ = before;
                rhs.eval(&tmp, &mut after[0]);
            }
            let mut err: f64 = 0.0;
            for i in 0..n {
                u5[i] = u[i] + step * (0..7).map(|j| B5[j] * k[j][i]).sum::<f64>();
                let e = step * (0..7).map(|j| (B5[j] - B4[j]) * k[j][i]).sum::<f64>();
                let sc = spec.tolerance * (1.0 + u[i].abs().max(u5[i].abs()));
                err = err.max((e / sc).abs());
            }
            if err <= 1.0 {
                t = if last { mark } else { t + step };
                std::mem::swap(&mut u, &mut u5);
                // First-same-as-last: stage 7 is the derivative at the new point.
                let (first, rest) = k.split_at_mut(1);
                first[0].copy_from_slice(&rest[5]);
                out.steps += 1;
                check_simplex(&u, t)?;
            } else {
                out.rejected += 1;
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            if !(last && err <= 1.0) {
                h = step * factor;
            }
            if h < 1e-14 * t.abs().max(1.0) {
                return Err(LimitError::StepUnderflow { t, h });
            }
        }
        out.times.push(t);
        out.states.push(u.clone());
    }
    Ok(out)
}

/// Result of [`equilibrium_shift`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumShift {
    /// Solution of `u = 1/n + (w/mu) phi(u)`.
    pub u: Vec<f64>,
    /// `1/n + (w/mu) phi(1/n, ..., 1/n)`.
    pub first_order: Vec<f64>,
    /// `max_k |u_k - first_order_k|`.
    pub remainder: f64,
    /// `remainder / (w/mu)^2`.
    pub c2: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl EquilibriumShift {
    /// Largest shift `|u_k - 1/n|`.
    pub fn max_shift(&self) -> f64 {
        let inv = 1.0 / self.u.len() as f64;
        self.u.iter().fold(0.0, |m, x| m.max((x - inv).abs()))
    }
}

/// Maximum number of fixed-point steps in [`equilibrium_shift`].
pub const SHIFT_MAX_ITER: usize = 10_000;

/// Solves `u_k = 1/n + (w/mu) phi_k(u)` by fixed-point iteration started at
/// the uniform vector and compares it with the first-order prediction.
pub fn equilibrium_shift(
    reaction: &dyn Reaction,
    mu_over_w: f64,
) -> Result<EquilibriumShift, LimitError> {
    if !(mu_over_w > 0.0 && mu_over_w.is_finite()) {
        return Err(LimitError::InvalidSpec(format!(
            "mu/w must be positive, got {mu_over_w}"
        )));
    }
    let n = reaction.n();
    let eps = 1.0 / mu_over_w;
    let inv = 1.0 / n as f64;
    let mut u = vec![inv; n];
    let mut phi = vec![0.0; n];
    reaction.eval(&u, &mut phi);
    let first_order: Vec<f64> = phi.iter().map(|p| inv + eps * p).collect();
    let mut residual = f64::INFINITY;
    for it in 1..=SHIFT_MAX_ITER {
        reaction.eval(&u, &mut phi);
        residual = 0.0;
        for i in 0..n {
            let next = inv + eps * phi[i];
            let delta = (next - u[i]).abs();
            if delta > residual || delta.is_nan() {
                residual = delta;
            }
            u[i] = next;
        }
        if !residual.is_finite() {
            break;
        }
        if residual <= 1e-15 {
            let remainder = u
                .iter()
                .zip(&first_order)
                .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
            return Ok(EquilibriumShift {
                u,
                first_order,
                remainder,
                c2: remainder / (eps * eps),
                iterations: it,
                residual,
            });
        }
    }
    Err(LimitError::NonConvergence {
        iterations: SHIFT_MAX_ITER,
        residual,
    })
}

/// A vector field on a periodic grid; the component index varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub dims: Vec<usize>,
    pub components: usize,
    pub dx: f64,
    pub dt: f64,
    pub data: Vec<f64>,
}

/// JSON description of the binary field layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub dims: Vec<usize>,
    pub components: usize,
    pub dx: f64,
    pub dt: f64,
    pub dtype: String,
    pub layout: String,
    pub header_bytes: usize,
}

impl Field {
    pub fn points(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn at(&self, point: usize) -> &[f64] {
        &self.data[point * self.components..(point + 1) * self.components]
    }

    /// Spatial mean of component `k`.
    pub fn mean(&self, k: usize) -> f64 {
        (0..self.points()).map(|p| self.at(p)[k]).sum::<f64>() / self.points() as f64
    }

    pub fn descriptor(&self) -> FieldDescriptor {
        FieldDescriptor {
            dims: self.dims.clone(),
            components: self.components,
            dx: self.dx,
            dt: self.dt,
            dtype: "f64-le".into(),
            layout: "row-major; trailing axis is the strategy component".into(),
            header_bytes: 8 * (1 + self.dims.len() + 1) + 16,
        }
    }

    /// Writes the little-endian binary layout: `u64` axis count, `u64`
    /// extent per axis (grid axes then the component axis), `f64 dx`,
    /// `f64 dt`, then the row-major `f64` payload.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&(self.dims.len() as u64 + 1).to_le_bytes())?;
        for d in self.dims.iter().chain(std::iter::once(&self.components)) {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        w.write_all(&self.dx.to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> io::Result<Field> {
        let mut b = [0u8; 8];
        let mut next = |r: &mut R| -> io::Result<[u8; 8]> {
            r.read_exact(&mut b)?;
            Ok(b)
        };
        let axes = u64::from_le_bytes(next(&mut r)?) as usize;
        if !(2..=8).contains(&axes) {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad axis count"));
        }
        let mut ext = Vec::with_capacity(axes);
        for _ in 0..axes {
            ext.push(u64::from_le_bytes(next(&mut r)?) as usize);
        }
        let dx = f64::from_le_bytes(next(&mut r)?);
        let dt = f64::from_le_bytes(next(&mut r)?);
        let components = ext.pop().expect("at least two axes");
        let len = ext.iter().product::<usize>() * components;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(next(&mut r)?));
        }
        Ok(Field {
            dims: ext,
            components,
            dx,
            dt,
            data,
        })
    }
}

/// `du/dt = (sigma^2/2) Laplacian(u) + phi(u)` on a periodic grid.
pub struct PdeSpec<'a> {
    pub reaction: &'a dyn Reaction,
    /// Per-coordinate jump variance of the kernel.
    pub sigma2: f64,
    pub dims: Vec<usize>,
    pub dx: f64,
    pub dt: f64,
    pub t_end: f64,
    /// Initial field, `components` values per grid point.
    pub u0: Vec<f64>,
    /// Times at which the field is stored; the initial and final fields are
    /// always stored.
    pub sample_times: Vec<f64>,
}

impl PdeSpec<'_> {
    pub fn stability_limit(&self) -> f64 {
        self.dx * self.dx / (2.0 * self.dims.len() as f64 * self.sigma2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldTrajectory {
    pub times: Vec<f64>,
    pub fields: Vec<Field>,
}

/// Forward-Euler, central-difference integration of the reaction-diffusion
/// system. Diffusion of the all-ones vector vanishes and the reaction sums
/// to zero, so `sum_i u_i = 1` is conserved at every point up to rounding.
pub fn integrate_pde(spec: &PdeSpec<'_>) -> Result<FieldTrajectory, LimitError> {
    let m = spec.reaction.n();
    let nd = spec.dims.len();
    if !(1..=3).contains(&nd) || spec.dims.iter().any(|d| *d < 3) {
        return Err(LimitError::InvalidSpec(
            "grid must have 1 to 3 axes of at least 3 points".into(),
        ));
    }
    if !(spec.dx > 0.0 && spec.dt > 0.0 && spec.sigma2 >= 0.0 && spec.t_end >= 0.0) {
        return Err(LimitError::InvalidSpec("dx, dt must be positive".into()));
    }
    let limit = spec.stability_limit();
    if spec.dt > limit {
        return Err(LimitError::StabilityViolation { dt: spec.dt, limit });
    }
    let points: usize = spec.dims.iter().product();
    if spec.u0.len() != points * m {
        return Err(LimitError::InvalidSpec(format!(
            "initial field has {} values, expected {}",
            spec.u0.len(),
            points * m
        )));
    }
    for p in 0..points {
        check_simplex(&spec.u0[p * m..(p + 1) * m], 0.0)?;
    }
    let strides: Vec<usize> = (0..nd)
        .map(|a| spec.dims[a + 1..].iter().product())
        .collect();
    let coef = spec.sigma2 / 2.0 / (spec.dx * spec.dx);
    let steps = (spec.t_end / spec.dt).round() as usize;
    let mut marks: Vec<usize> = spec
        .sample_times
        .iter()
        .map(|t| (t / spec.dt).round() as usize)
        .filter(|s| *s > 0 && *s < steps)
        .collect();
    marks.push(steps);
    marks.sort_unstable();
    marks.dedup();

    let snapshot = |data: &[f64]| Field {
        dims: spec.dims.clone(),
        components: m,
        dx: spec.dx,
        dt: spec.dt,
        data: data.to_vec(),
    };
    let mut u = spec.u0.clone();
    let mut next = vec![0.0; u.len()];
    let mut phi = vec![0.0; m];
    let mut out = FieldTrajectory {
        times: vec![0.0],
        fields: vec![snapshot(&u)],
    };
    let mut mark = marks.iter().peekable();
    for step in 1..=steps {
        for p in 0..points {
            let here = &u[p * m..(p + 1) * m];
            spec.reaction.eval(here, &mut phi);
            let mut rest = p;
            let mut nbrs = [(0usize, 0usize); 3];
            for a in 0..nd {
                let c = rest / strides[a];
                rest %= strides[a];
                let len = spec.dims[a];
                let up = if c + 1 == len {
                    p - c * strides[a]
                } else {
                    p + strides[a]
                };
                let down = if c == 0 {
                    p + (len - 1) * strides[a]
                } else {
                    p - strides[a]
                };
                nbrs[a] = (up, down);
            }
            for i in 0..m {
                let centre = here[i];
                let mut lap = 0.0;
                for &(up, down) in &nbrs[..nd] {
                    lap += u[up * m + i] + u[down * m + i] - 2.0 * centre;
                }
                next[p * m + i] = centre + spec.dt * (coef * lap + phi[i]);
            }
        }
        std::mem::swap(&mut u, &mut next);
        if mark.peek() == Some(&&step) {
            mark.next();
            let t = step as f64 * spec.dt;
            for p in 0..points {
                check_simplex(&u[p * m..(p + 1) * m], t)?;
            }
            out.times.push(t);
            out.fields.push(snapshot(&u));
        }
    }
    Ok(out)
}
