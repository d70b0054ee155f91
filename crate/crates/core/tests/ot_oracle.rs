//! Sinkhorn against the exact simplex, and the simplex against brute force.

use idmatch::exact::{enumerate_tiny, solve_transport_exact};
use idmatch::ot::{
    gibbs_kernel, marginal_residuals, sinkhorn, transport_cost, CostMatrix, MarginalWeights, SinkhornConfig,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_problem(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (CostMatrix, MarginalWeights) {
    let cost = Array2::from_shape_simple_fn((n, m), || rng.random_range(0.0..2.0));
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let b: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    (
        CostMatrix::new(cost).unwrap(),
        MarginalWeights::new(a.iter().map(|x| x / sa).collect(), b.iter().map(|x| x / sb).collect()).unwrap(),
    )
}

fn tight() -> SinkhornConfig {
    SinkhornConfig::new(100.0, 2000, 1e-9).unwrap()
}

#[test]
fn simplex_agrees_with_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..100 {
        let n = rng.random_range(2..=3);
        let m = rng.random_range(2..=3);
        let (cost, w) = random_problem(&mut rng, n, m);
        let grid = 60;
        let lp = solve_transport_exact(&cost, &w).unwrap();
        let brute = enumerate_tiny(&cost, &w, grid).unwrap();
        let resolution = (n * m) as f64 / grid as f64 * cost.max();
        assert!(
            brute.objective >= lp.objective - 1e-10,
            "trial {trial}: enumeration {} beat the simplex {}",
            brute.objective,
            lp.objective
        );
        assert!(
            brute.objective - lp.objective <= resolution,
            "trial {trial}: gap {} exceeds grid resolution {resolution}",
            brute.objective - lp.objective
        );
    }
}

#[test]
fn two_by_two_enumeration_within_point_oh_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (cost, w) = random_problem(&mut rng, 2, 2);
        let lp = solve_transport_exact(&cost, &w).unwrap();
        let brute = enumerate_tiny(&cost, &w, 100).unwrap();
        assert!((lp.objective - brute.objective).abs() <= 0.02);
    }
}

#[test]
fn simplex_certificate_and_feasibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..60 {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=8);
        let (cost, w) = random_problem(&mut rng, n, m);
        let lp = solve_transport_exact(&cost, &w).unwrap();
        let duals = lp.duals.as_ref().expect("simplex reports duals");
        for i in 0..n {
            for j in 0..m {
                let reduced = cost.view()[[i, j]] - duals.row[i] - duals.col[j];
                assert!(reduced >= -1e-10, "reduced cost {reduced} at ({i}, {j})");
            }
        }
        let (row, col) = marginal_residuals(&lp.flow, &w).unwrap();
        assert!(row <= 1e-12 && col <= 1e-12, "residuals {row} {col}");
        assert!(lp.flow.iter().all(|&x| x >= 0.0));
        assert!((transport_cost(&cost, &lp.flow).unwrap() - lp.objective).abs() < 1e-12);
    }
}

#[test]
fn sharp_sinkhorn_within_two_percent_on_four_by_four() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (cost, w) = random_problem(&mut rng, 4, 4);
        let lp = solve_transport_exact(&cost, &w).unwrap();
        let plan = sinkhorn(&cost, &w, &tight()).unwrap();
        let sk = transport_cost(&cost, &plan.flow).unwrap();
        assert!((sk - lp.objective).abs() <= 0.02 * lp.objective.max(1e-12), "{sk} vs {}", lp.objective);
    }
}

#[test]
fn converged_sinkhorn_never_beats_the_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let config = SinkhornConfig::new(20.0, 5000, 1e-13).unwrap();
    for _ in 0..50 {
        let n = rng.random_range(2..=5);
        let m = rng.random_range(2..=5);
        let (cost, w) = random_problem(&mut rng, n, m);
        let plan = sinkhorn(&cost, &w, &config).unwrap();
        assert!(plan.converged);
        let lp = solve_transport_exact(&cost, &w).unwrap();
        assert!(transport_cost(&cost, &plan.flow).unwrap() >= lp.objective - 1e-10);
    }
}

#[test]
fn marginal_feasibility_when_converged() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let config = SinkhornConfig::new(5.0, 500, 1e-9).unwrap();
    for _ in 0..50 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=6);
        let (cost, w) = random_problem(&mut rng, n, m);
        let plan = sinkhorn(&cost, &w, &config).unwrap();
        if plan.converged {
            let (row, col) = marginal_residuals(&plan.flow, &w).unwrap();
            assert!(row <= 1e-6 && col <= 1e-6, "residuals {row} {col}");
        }
    }
}

/// Rebuilds `diag(u) K diag(v)` from the kernel definition, independently of
/// the solver's own arithmetic.
fn reconstruct(cost: &CostMatrix, eta: f64, u: &Array1<f64>, v: &Array1<f64>) -> Array2<f64> {
    let c = cost.view();
    Array2::from_shape_fn(c.dim(), |(i, j)| u[i] * (-eta * c[[i, j]]).exp() * v[j])
}

fn arb_problem() -> impl Strategy<Value = (CostMatrix, MarginalWeights)> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(n, m)| {
        (
            proptest::collection::vec(0.0f64..2.0, n * m),
            proptest::collection::vec(0.01f64..1.0, n),
            proptest::collection::vec(0.01f64..1.0, m),
        )
            .prop_map(move |(c, a, b)| {
                (
                    CostMatrix::new(Array2::from_shape_vec((n, m), c).unwrap()).unwrap(),
                    MarginalWeights::new(a, b).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn plan_has_diagonal_scaling_form((cost, w) in arb_problem(), eta in 0.5f64..20.0, iters in 1usize..50) {
        let config = SinkhornConfig::new(eta, iters, 1e-9).unwrap();
        let plan = sinkhorn(&cost, &w, &config).unwrap();
        let rebuilt = reconstruct(&cost, eta, &plan.u, &plan.v);
        for (x, y) in plan.flow.iter().zip(rebuilt.iter()) {
            prop_assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
        }
        // Rescaling (u, v) -> (c u, v / c) gives the same plan.
        for c in [0.5, 3.0, 1e3] {
            let scaled = reconstruct(&cost, eta, &(&plan.u * c), &(&plan.v / c));
            for (x, y) in rebuilt.iter().zip(scaled.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
        prop_assert!(plan.flow.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn transposed_problem_gives_transposed_plan((cost, w) in arb_problem(), eta in 0.5f64..20.0) {
        let config = SinkhornConfig::new(eta, 500, 1e-12).unwrap();
        let plan = sinkhorn(&cost, &w, &config).unwrap();
        let swapped = MarginalWeights::new(w.b.clone(), w.a.clone()).unwrap();
        let plan_t = sinkhorn(&cost.transpose(), &swapped, &config).unwrap();
        if plan.converged && plan_t.converged {
            for (x, y) in plan.flow.t().iter().zip(plan_t.flow.iter()) {
                prop_assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn cost_does_not_increase_as_kernel_sharpens((cost, w) in arb_problem()) {
        let mut last = f64::INFINITY;
        for eta in [1.0, 5.0, 10.0, 20.0, 50.0] {
            let plan = sinkhorn(&cost, &w, &SinkhornConfig::new(eta, 20000, 1e-14).unwrap()).unwrap();
            let c = transport_cost(&cost, &plan.flow).unwrap();
            prop_assert!(c <= last + 1e-8, "eta {eta}: {c} > {last}");
            last = c;
        }
    }

    #[test]
    fn kernel_is_exponential_of_cost((cost, _w) in arb_problem(), eta in 0.1f64..50.0) {
        let k = gibbs_kernel(&cost, eta);
        for (kij, cij) in k.iter().zip(cost.view().iter()) {
            prop_assert!((kij - (-eta * cij).exp()).abs() <= 1e-15);
        }
    }
}
