//! Reference computations that share no code paths with the simulator:
//! a lattice Green-function solver for walk hitting probabilities, and a
//! coordinate-based enumeration of the flip rates of the spatial games.

use torus_games::{GameMatrix, Kernel, UpdateRule};

/// Green function `G(x, 0) = E sum_n 1{S_n = 0}` of the kernel's
/// discrete-time walk killed on leaving `[-R, R]^d`, by conjugate
/// gradients on `(I - P) g = delta_0`.
pub struct BoxGreen {
    radius: i64,
    dim: usize,
    values: Vec<f64>,
}

impl BoxGreen {
    pub fn solve(kernel: &Kernel, radius: i64) -> BoxGreen {
        let dim = kernel.dim();
        let side = (2 * radius + 1) as usize;
        let size = side.pow(dim as u32);
        let steps: Vec<(Vec<i64>, f64)> = kernel
            .iter()
            .map(|(o, w)| (o.iter().map(|c| i64::from(*c)).collect(), w))
            .collect();
        let strides: Vec<usize> = (0..dim).map(|a| side.pow(a as u32)).collect();
        let coords = |mut i: usize| -> Vec<i64> {
            (0..dim)
                .map(|_| {
                    let c = (i % side) as i64 - radius;
                    i /= side;
                    c
                })
                .collect()
        };
        // Flat neighbour lists with usize::MAX for killed moves.
        let mut nbr = vec![usize::MAX; size * steps.len()];
        for i in 0..size {
            let x = coords(i);
            for (k, (v, _)) in steps.iter().enumerate() {
                let mut idx = 0usize;
                let mut inside = true;
                for a in 0..dim {
                    let c = x[a] + v[a];
                    if c.abs() > radius {
                        inside = false;
                        break;
                    }
                    idx += (c + radius) as usize * strides[a];
                }
                if inside {
                    nbr[i * steps.len() + k] = idx;
                }
            }
        }
        let weights: Vec<f64> = steps.iter().map(|(_, w)| *w).collect();
        let apply = |g: &[f64], out: &mut [f64]| {
            for i in 0..size {
                let mut s = 0.0;
                for (k, w) in weights.iter().enumerate() {
                    let j = nbr[i * weights.len() + k];
                    if j != usize::MAX {
                        s += w * g[j];
                    }
                }
                out[i] = g[i] - s;
            }
        };
        let origin: usize = (0..dim).map(|a| radius as usize * strides[a]).sum();
        let mut x = vec![0.0; size];
        let mut r = vec![0.0; size];
        r[origin] = 1.0;
        let mut p = r.clone();
        let mut ap = vec![0.0; size];
        let mut rr: f64 = 1.0;
        for _ in 0..100_000 {
            apply(&p, &mut ap);
            let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
            for i in 0..size {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let next: f64 = r.iter().map(|v| v * v).sum();
            if next.sqrt() < 1e-13 {
                break;
            }
            let beta = next / rr;
            rr = next;
            for i in 0..size {
                p[i] = r[i] + beta * p[i];
            }
        }
        BoxGreen {
            radius,
            dim,
            values: x,
        }
    }

    pub fn at(&self, x: &[i64]) -> f64 {
        let side = 2 * self.radius + 1;
        let mut idx = 0i64;
        for a in (0..self.dim).rev() {
            idx = idx * side + x[a] + self.radius;
        }
        self.values[idx as usize]
    }
}

/// Green-function values extrapolated to `R = infinity` from two boxes,
/// using the `1/R` leading correction of the killed walk.
pub struct GreenOracle {
    small: BoxGreen,
    large: BoxGreen,
}

impl GreenOracle {
    pub fn new(kernel: &Kernel, r_small: i64, r_large: i64) -> GreenOracle {
        GreenOracle {
            small: BoxGreen::solve(kernel, r_small),
            large: BoxGreen::solve(kernel, r_large),
        }
    }

    pub fn green(&self, x: &[i64]) -> f64 {
        let (r1, r2) = (
            (self.small.radius + 1) as f64,
            (self.large.radius + 1) as f64,
        );
        (r2 * self.large.at(x) - r1 * self.small.at(x)) / (r2 - r1)
    }

    /// Probability that the walk started at 0 ever returns.
    pub fn return_probability(&self) -> f64 {
        1.0 - 1.0 / self.green(&vec![0; self.small.dim])
    }

    /// Probability that a walk started at `x != 0` ever hits 0. This is also
    /// the probability that two walkers started `x` apart ever meet.
    pub fn hitting_probability(&self, x: &[i64]) -> f64 {
        self.green(x) / self.green(&vec![0; self.small.dim])
    }

    /// `p(0|x)`: two walkers started at 0 and `x` never meet.
    pub fn non_coalescence(&self, x: &[i64]) -> f64 {
        1.0 - self.hitting_probability(x)
    }
}

/// Two-strategy state on the torus given by coordinates, for rate
/// enumeration.
pub struct BruteState<'a> {
    pub side: i64,
    pub dim: usize,
    pub assignment: &'a [u8],
}

impl BruteState<'_> {
    fn coords(&self, mut site: usize) -> Vec<i64> {
        (0..self.dim)
            .map(|_| {
                let c = (site % self.side as usize) as i64;
                site /= self.side as usize;
                c
            })
            .collect()
    }

    fn site(&self, coords: &[i64]) -> usize {
        coords
            .iter()
            .rev()
            .fold(0i64, |acc, c| acc * self.side + c.rem_euclid(self.side)) as usize
    }

    fn strategy(&self, coords: &[i64]) -> usize {
        usize::from(self.assignment[self.site(coords)])
    }
}

/// Rate at which site `x` flips to strategy `j`, from the model formulas:
/// `f_j(x) + w sum_k f2_jk(x) G_jk` for Birth-Death and its normalization
/// over all strategies for Death-Birth, plus `mu/n` for mutation. The
/// double sum over `(y, z)` is enumerated explicitly.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_rate(
    state: &BruteState<'_>,
    kernel: &Kernel,
    game: &GameMatrix,
    rule: UpdateRule,
    w: f64,
    mu: f64,
    x: usize,
    j: usize,
) -> f64 {
    let n = game.n();
    let xc = state.coords(x);
    let shift = |a: &[i64], o: &[i32]| -> Vec<i64> {
        a.iter().zip(o).map(|(c, d)| c + i64::from(*d)).collect()
    };
    // f[k] and f2[k][l] as in the model definition.
    let mut f = vec![0.0; n];
    let mut f2 = vec![vec![0.0; n]; n];
    for (oy, py) in kernel.iter() {
        let y = shift(&xc, oy);
        let sy = state.strategy(&y);
        f[sy] += py;
        for (oz, pz) in kernel.iter() {
            let z = shift(&y, oz);
            f2[sy][state.strategy(&z)] += py * pz;
        }
    }
    let bd = |k: usize| f[k] + w * (0..n).map(|l| f2[k][l] * game.get(k, l)).sum::<f64>();
    let sel = match rule {
        UpdateRule::BirthDeath => bd(j),
        UpdateRule::DeathBirth => bd(j) / (0..n).map(bd).sum::<f64>(),
    };
    sel + mu / n as f64
}

/// All rates `(site, target strategy, rate)` out of the given state.
pub fn brute_force_generator(
    state: &BruteState<'_>,
    kernel: &Kernel,
    game: &GameMatrix,
    rule: UpdateRule,
    w: f64,
    mu: f64,
) -> Vec<(usize, u8, f64)> {
    let mut out = Vec::new();
    for x in 0..state.assignment.len() {
        for j in 0..game.n() {
            if j != usize::from(state.assignment[x]) {
                let r = brute_force_rate(state, kernel, game, rule, w, mu, x, j);
                out.push((x, j as u8, r));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn green_function_gives_polya_constant() {
        let k = Kernel::nearest_neighbor(3).unwrap();
        let o = GreenOracle::new(&k, 12, 24);
        assert!((o.return_probability() - 0.340537).abs() < 5e-4);
        // One-step decomposition: G(0) = 1 + G(e1) for a walk without holding.
        assert!((o.green(&[0, 0, 0]) - 1.0 - o.green(&[1, 0, 0])).abs() < 1e-6);
    }

    #[test]
    fn all_same_state_has_no_selection_rates() {
        let k = Kernel::nearest_neighbor(3).unwrap();
        let g = GameMatrix::two_by_two(1.0, 2.0, 3.0, 4.0).unwrap();
        let a = vec![1u8; 27];
        let s = BruteState {
            side: 3,
            dim: 3,
            assignment: &a,
        };
        for rule in [UpdateRule::BirthDeath, UpdateRule::DeathBirth] {
            for (_, _, r) in brute_force_generator(&s, &k, &g, rule, 0.1, 0.0) {
                assert_eq!(r, 0.0);
            }
        }
    }
}
