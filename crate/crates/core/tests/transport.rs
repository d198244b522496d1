use hgot::transport::{exact_ot_oracle, fgw_solve, sinkhorn_plan, FgwProblem, Marginals, SolverConfig};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cost(n: usize, m: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, m), || rng.random::<f64>())
}

fn random_simplex(len: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let raw = Array1::from_shape_simple_fn(len, || 0.05 + rng.random::<f64>());
    let total = raw.sum();
    raw / total
}

fn random_graph(n: usize, symmetric: bool, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let h = Array2::from_shape_simple_fn((n, 3), || rng.random::<f64>() - 0.5);
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j && (!symmetric || i < j) && rng.random::<f64>() < 0.3 {
                a[[i, j]] = 1.0;
                if symmetric {
                    a[[j, i]] = 1.0;
                }
            }
        }
    }
    (h, a)
}

#[test]
fn sinkhorn_approaches_exact_oracle() {
    for seed in 0..20 {
        let n = 2 + (seed as usize % 7);
        let cost = random_cost(n, n, seed);
        let exact = exact_ot_oracle(&cost).unwrap().objective_value;
        let marg = Marginals::uniform(n, n);
        let gaps: Vec<f64> = [0.2, 0.05, 0.01, 0.001]
            .iter()
            .map(|&epsilon| {
                let cfg = SolverConfig { epsilon, ..SolverConfig::default() };
                let plan = sinkhorn_plan(&cost, &marg, &cfg, false).unwrap();
                plan.objective_value - exact
            })
            .collect();
        // entropic plans never beat the optimum, and the gap shrinks with epsilon
        assert!(gaps.iter().all(|&g| g >= -1e-9), "seed {seed}: {gaps:?}");
        assert!(gaps[3] <= gaps[0] + 1e-12, "seed {seed}: {gaps:?}");
        assert!(gaps[3] < 1e-2 * exact.max(1e-3), "seed {seed}: {gaps:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sinkhorn_plans_are_feasible(n in 1usize..20, m in 1usize..20, seed in 0u64..10_000, eps_exp in -3.0f64..0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = random_cost(n, m, seed) * 3.0;
        let marg = Marginals::new(random_simplex(n, &mut rng), random_simplex(m, &mut rng)).unwrap();
        let cfg = SolverConfig { epsilon: 10f64.powf(eps_exp), ..SolverConfig::default() };
        let plan = sinkhorn_plan(&cost, &marg, &cfg, false).unwrap();
        prop_assert!(plan.row_residual <= 1e-6 && plan.col_residual <= 1e-6,
            "residuals {} {}", plan.row_residual, plan.col_residual);
        prop_assert!(plan.pi.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn cg_is_monotone_and_feasible(n in 2usize..14, m in 2usize..14, sigma in 0.0f64..=1.0, symmetric: bool, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h1, a1) = random_graph(n, symmetric, &mut rng);
        let (h2, a2) = random_graph(m, symmetric, &mut rng);
        let prob = FgwProblem::new(h1, a1, h2, a2, sigma).unwrap();
        let sol = fgw_solve(&prob, &SolverConfig::default()).unwrap();
        for w in sol.trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "trace rises: {:?}", sol.trace);
        }
        prop_assert!(sol.plan.row_residual <= 1e-6 && sol.plan.col_residual <= 1e-6);
        prop_assert!((prob.evaluate(&sol.plan.pi).unwrap() - sol.distance).abs() < 1e-10);
    }

    #[test]
    fn fgw_is_equivariant_under_relabeling(n in 2usize..9, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h1, a1) = random_graph(n, true, &mut rng);
        let (h2, a2) = random_graph(n, true, &mut rng);
        // reverse the target graph's node order
        let perm: Vec<usize> = (0..n).rev().collect();
        let h2p = h2.select(ndarray::Axis(0), &perm);
        let a2p = a2.select(ndarray::Axis(0), &perm).select(ndarray::Axis(1), &perm);
        let cfg = SolverConfig::default();
        let a = fgw_solve(&FgwProblem::new(h1.clone(), a1.clone(), h2, a2, 0.5).unwrap(), &cfg).unwrap();
        let b = fgw_solve(&FgwProblem::new(h1, a1, h2p, a2p, 0.5).unwrap(), &cfg).unwrap();
        prop_assert!((a.distance - b.distance).abs() < 1e-9, "{} vs {}", a.distance, b.distance);
        let back = b.plan.pi.select(ndarray::Axis(1), &perm);
        let diff = (&a.plan.pi - &back).mapv(f64::abs).fold(0.0f64, |x, &y| x.max(y));
        prop_assert!(diff < 1e-9, "plans differ by {diff}");
    }
}
