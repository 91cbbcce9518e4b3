use torus_games::particle_sim::{InitialCondition, SimConfig, Simulator};
use torus_games::{rng, GameMatrix, Kernel, TorusGeom, UpdateRule};
use torus_oracles::{brute_force_generator, BruteState, GreenOracle};

fn random_game(n: usize, seed: u64) -> GameMatrix {
    let mut g = rng::stream(seed, &[rng::tag("game")]);
    GameMatrix::from_rows(
        (0..n)
            .map(|_| (0..n).map(|_| 4.0 * rng::unit(&mut g) - 2.0).collect())
            .collect(),
    )
    .unwrap()
}

fn config(
    side: usize,
    dim: usize,
    kernel: Kernel,
    game: GameMatrix,
    rule: UpdateRule,
    assignment: &[u8],
) -> SimConfig {
    SimConfig {
        id: "oracle".into(),
        geometry: TorusGeom::new(side, dim).unwrap(),
        kernel,
        game,
        rule,
        w: 0.05,
        mu: 0.3,
        t_end: 1.0,
        record_times: vec![],
        seed: 3,
        initial: InitialCondition::Explicit {
            assignment: assignment.to_vec(),
        },
    }
}

#[test]
fn simulator_rates_match_enumeration() {
    let cases = [
        (3, 3, Kernel::nearest_neighbor(3).unwrap()),
        (4, 3, Kernel::nearest_neighbor(3).unwrap()),
        (4, 3, Kernel::moore(3, 1).unwrap()),
    ];
    for (seed, (side, dim, kernel)) in cases.into_iter().enumerate() {
        for n in 2..=4 {
            let game = random_game(n, seed as u64 * 10 + n as u64);
            let sites = TorusGeom::new(side, dim).unwrap().sites();
            let mut g = rng::stream(seed as u64, &[n as u64]);
            let assignment: Vec<u8> = (0..sites).map(|_| rng::index(&mut g, n) as u8).collect();
            for rule in [UpdateRule::BirthDeath, UpdateRule::DeathBirth] {
                let cfg = config(side, dim, kernel.clone(), game.clone(), rule, &assignment);
                let sim =
                    Simulator::with_state(cfg, assignment.clone(), rng::stream(0, &[])).unwrap();
                let state = BruteState {
                    side: side as i64,
                    dim,
                    assignment: &assignment,
                };
                for (x, j, rate) in brute_force_generator(&state, &kernel, &game, rule, 0.05, 0.3) {
                    let got = sim.flip_rate(x, j);
                    assert!(
                        (got - rate).abs() < 1e-12,
                        "{rule:?} n={n} side={side} site {x} -> {j}: {got} vs {rate}"
                    );
                }
            }
        }
    }
}

#[test]
fn death_birth_rates_sum_to_one_per_site_without_mutation() {
    let kernel = Kernel::nearest_neighbor(3).unwrap();
    let game = random_game(3, 77);
    let assignment: Vec<u8> = (0..27).map(|i| (i % 4 % 3) as u8).collect();
    let state = BruteState {
        side: 3,
        dim: 3,
        assignment: &assignment,
    };
    let rates = brute_force_generator(&state, &kernel, &game, UpdateRule::DeathBirth, 0.05, 0.0);
    for x in 0..27 {
        let out: f64 = rates.iter().filter(|r| r.0 == x).map(|r| r.2).sum();
        let keep = torus_oracles::brute_force_rate(
            &state,
            &kernel,
            &game,
            UpdateRule::DeathBirth,
            0.05,
            0.0,
            x,
            usize::from(assignment[x]),
        );
        assert!((out + keep - 1.0).abs() < 1e-12, "site {x}: {out} + {keep}");
    }
}

#[test]
fn hitting_probability_decreases_with_distance() {
    let o = GreenOracle::new(&Kernel::nearest_neighbor(3).unwrap(), 10, 20);
    let near = o.hitting_probability(&[1, 0, 0]);
    let diag = o.hitting_probability(&[1, 1, 0]);
    let far = o.hitting_probability(&[3, 0, 0]);
    assert!(near > diag && diag > far && far > 0.0);
    assert!((o.non_coalescence(&[1, 0, 0]) + near - 1.0).abs() < 1e-15);
}
