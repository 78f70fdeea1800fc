use ndarray::{Array1, Array2};
use neuron_ot::ot::{
    plan_trace_ratio, solve_exact, solve_ipot, solve_ipot_with_history, solve_sinkhorn,
    transport_cost, CostMatrix, DiscreteMeasure, Method, SolverSettings,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum of `(1/n) sum_i M[i, perm[i]]` over all permutations.
fn brute_force_assignment(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    assert!(n <= 7, "brute force is gated to small instances");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, m, &mut best);
    best / n as f64
}

fn permute(perm: &mut Vec<usize>, k: usize, m: &Array2<f64>, best: &mut f64) {
    if k == perm.len() {
        let c: f64 = perm.iter().enumerate().map(|(i, &j)| m[[i, j]]).sum();
        *best = best.min(c);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, m, best);
        perm.swap(k, i);
    }
}

fn random_cost(rng: &mut ChaCha8Rng, d: usize, dp: usize) -> Array2<f64> {
    Array2::from_shape_fn((d, dp), |_| rng.random::<f64>())
}

fn random_rational_measure(rng: &mut ChaCha8Rng, k: usize) -> DiscreteMeasure {
    let w = Array1::from_shape_fn(k, |_| rng.random_range(1..=10) as f64);
    DiscreteMeasure::normalized(w).unwrap()
}

#[test]
fn exact_and_ipot_match_permutation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let n = rng.random_range(2..=6);
        let m = random_cost(&mut rng, n, n);
        let oracle = brute_force_assignment(&m);
        let cost = CostMatrix::new(m).unwrap();
        let u = DiscreteMeasure::uniform(n);
        let exact = solve_exact(&cost, &u, &u).unwrap();
        let ipot = solve_ipot(&cost, &u, &u, &SolverSettings::default()).unwrap();
        let denom = oracle.max(1e-12);
        assert!((exact.cost - oracle).abs() / denom < 1e-5);
        assert!(
            (ipot.cost - oracle).abs() / denom < 1e-5,
            "n={n} ipot {} oracle {oracle}",
            ipot.cost
        );
    }
}

#[test]
fn random_five_by_five_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random_cost(&mut rng, 5, 5);
    let oracle = brute_force_assignment(&m);
    let u = DiscreteMeasure::uniform(5);
    let r = solve_exact(&CostMatrix::new(m).unwrap(), &u, &u).unwrap();
    assert!((r.cost - oracle).abs() < 1e-12);
}

#[test]
fn ipot_matches_exact_on_rectangular_rational_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..20 {
        let d = rng.random_range(1..=8);
        let dp = rng.random_range(1..=8);
        let cost = CostMatrix::new(random_cost(&mut rng, d, dp)).unwrap();
        let mu = random_rational_measure(&mut rng, d);
        let nu = random_rational_measure(&mut rng, dp);
        let exact = solve_exact(&cost, &mu, &nu).unwrap();
        assert!(exact.plan.max_marginal_deviation(&mu, &nu) < 1e-9);
        let ipot = solve_ipot(&cost, &mu, &nu, &SolverSettings::default()).unwrap();
        assert!(ipot.plan.max_marginal_deviation(&mu, &nu) < 1e-6);
        let rel = (ipot.cost - exact.cost).abs() / exact.cost.max(1e-12);
        assert!(rel < 1e-5, "{d}x{dp}: ipot {} exact {}", ipot.cost, exact.cost);
    }
}

#[test]
fn sinkhorn_small_epsilon_close_to_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cost = CostMatrix::new(random_cost(&mut rng, 4, 6)).unwrap();
    let mu = DiscreteMeasure::uniform(4);
    let nu = DiscreteMeasure::uniform(6);
    let exact = solve_exact(&cost, &mu, &nu).unwrap().cost;
    let settings = SolverSettings {
        method: Method::Sinkhorn,
        entropic_epsilon: 0.01 * cost.mean(),
        outer_iterations: 200_000,
        ..SolverSettings::default()
    };
    let r = solve_sinkhorn(&cost, &mu, &nu, &settings).unwrap();
    assert!((r.cost - exact).abs() / exact < 0.05);
}

/// Monotonicity is a property of the proximal point recursion; it is checked
/// with enough inner sweeps that each proximal step is solved to precision.
#[test]
fn ipot_cost_is_monotone_across_outer_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10 {
        let n = rng.random_range(2..=6);
        let cost = CostMatrix::new(random_cost(&mut rng, n, n)).unwrap();
        let u = DiscreteMeasure::uniform(n);
        let settings = SolverSettings {
            inner_iterations: 100,
            outer_iterations: 300,
            ..SolverSettings::default()
        };
        let (_, history) = solve_ipot_with_history(&cost, &u, &u, &settings).unwrap();
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn permuting_rows_permutes_the_exact_plan() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let m = random_cost(&mut rng, 4, 4);
    let u = DiscreteMeasure::uniform(4);
    let base = solve_exact(&CostMatrix::new(m.clone()).unwrap(), &u, &u).unwrap();
    let sigma = [2usize, 0, 3, 1];
    let permuted = Array2::from_shape_fn((4, 4), |(i, j)| m[[sigma[i], j]]);
    let r = solve_exact(&CostMatrix::new(permuted).unwrap(), &u, &u).unwrap();
    assert!((r.cost - base.cost).abs() < 1e-12);
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(r.plan.entries()[[i, j]], base.plan.entries()[[sigma[i], j]]);
        }
    }
}

#[test]
fn scaling_costs_scales_the_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cost = CostMatrix::new(random_cost(&mut rng, 5, 5)).unwrap();
    let u = DiscreteMeasure::uniform(5);
    let base = solve_exact(&cost, &u, &u).unwrap();
    for c in [0.25, 3.0, 1000.0] {
        let r = solve_exact(&cost.scaled(c).unwrap(), &u, &u).unwrap();
        assert!((r.cost - c * base.cost).abs() <= 1e-12 * c.max(1.0));
        assert_eq!(r.plan, base.plan);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_solver_is_feasible_and_bounded_below_by_exact(
        seed in any::<u64>(),
        d in 1usize..6,
        dp in 1usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = CostMatrix::new(random_cost(&mut rng, d, dp)).unwrap();
        let mu = random_rational_measure(&mut rng, d);
        let nu = random_rational_measure(&mut rng, dp);
        let exact = solve_exact(&cost, &mu, &nu).unwrap();
        for method in [Method::Exact, Method::Sinkhorn, Method::Ipot] {
            let settings = SolverSettings::with_method(method);
            let r = neuron_ot::solve(&cost, &mu, &nu, &settings).unwrap();
            prop_assert!(r.plan.max_marginal_deviation(&mu, &nu) < 1e-6);
            prop_assert!(r.plan.entries().iter().all(|p| *p >= 0.0));
            let value = transport_cost(&r.plan, &cost).unwrap();
            prop_assert!((value - r.cost).abs() <= 1e-9 * value.max(1e-300));
            prop_assert!(value >= exact.cost - 1e-9);
        }
    }

    #[test]
    fn trace_ratio_is_a_fraction(seed in any::<u64>(), d in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = CostMatrix::new(random_cost(&mut rng, d, d)).unwrap();
        let u = DiscreteMeasure::uniform(d);
        for r in [
            solve_exact(&cost, &u, &u).unwrap(),
            solve_ipot(&cost, &u, &u, &SolverSettings::default()).unwrap(),
        ] {
            let t = plan_trace_ratio(&r.plan).unwrap();
            prop_assert!((0.0..=1.0 + 1e-9).contains(&t));
        }
    }
}
