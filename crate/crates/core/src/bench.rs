//! Timing and comparison harnesses.
//!
//! Wall-clock timings use [`std::time::Instant`] and only cover plan solver
//! calls (or whole matching calls for [`matching_timing`]), so encoder and
//! optimizer work does not blur the comparison.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::exact::solve_transport_exact;
use crate::learning::{evaluate_ids, train_with_solver, worst_id_risk, TrainConfig, TrainOutcome};
use crate::matching::{
    derive_seed, match_identities, relevance_weights, ConfiguredSolver, IdentityGroup, MatchConfig, MiniBatch,
    PlanSolver, Sampling, SolverKind, Weighting,
};
use crate::metrics::{evaluate, MetricsReport};
use crate::ot::{cosine_cost, sinkhorn, transport_cost, CostMatrix, MarginalWeights, SinkhornConfig};
use crate::synthetic::{generate, inconsistency_probe, probe_latents, ShiftScenario, SyntheticData};

/// Wraps a solver and accumulates the time spent inside it.
pub struct TimedSolver<S> {
    pub inner: S,
    pub elapsed: Duration,
    pub calls: usize,
}

impl<S> TimedSolver<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            elapsed: Duration::ZERO,
            calls: 0,
        }
    }
}

impl<S: PlanSolver> PlanSolver for TimedSolver<S> {
    fn solve(&mut self, cost: &CostMatrix, weights: &MarginalWeights) -> Result<(Array2<f64>, bool)> {
        let start = Instant::now();
        let out = self.inner.solve(cost, weights);
        self.elapsed += start.elapsed();
        self.calls += 1;
        out
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median wall time of `reps` calls of `f`, in seconds.
fn median_time<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(f()?);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

fn random_features(dim: usize, n: usize, shift: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((dim, n), || {
        let z: f64 = StandardNormal.sample(rng);
        z + shift
    })
}

/// The fixed 100 x 100 matching problem used for solver timing: cosine costs
/// between two seeded 64-dimensional feature sets with relevance weights.
pub fn benchmark_problem(seed: u64) -> Result<(CostMatrix, MarginalWeights)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bench_problem", 0));
    let reference = random_features(64, 100, 0.5, &mut rng);
    let target = random_features(64, 100, 0.8, &mut rng);
    let cost = cosine_cost(&reference, &target)?;
    let weights = relevance_weights(&reference, &target)?.weights;
    Ok((cost, weights))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverTiming {
    pub sinkhorn_seconds: f64,
    pub exact_seconds: f64,
    pub sinkhorn_cost: f64,
    pub exact_cost: f64,
    pub exact_pivots: usize,
}

/// Median solve times of Sinkhorn (`config`) and the exact simplex on one problem.
pub fn solver_timing(
    cost: &CostMatrix,
    weights: &MarginalWeights,
    config: &SinkhornConfig,
    reps: usize,
) -> Result<SolverTiming> {
    let (a, b) = weights.normalized()?;
    let unit = MarginalWeights::new(a.to_vec(), b.to_vec())?;
    let plan = sinkhorn(cost, weights, config)?;
    let exact = solve_transport_exact(cost, &unit)?;
    Ok(SolverTiming {
        sinkhorn_seconds: median_time(reps, || sinkhorn(cost, weights, config))?,
        exact_seconds: median_time(reps, || solve_transport_exact(cost, &unit))?,
        sinkhorn_cost: transport_cost(cost, &plan.flow)?,
        exact_cost: exact.objective,
        exact_pivots: exact.pivots,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingTiming {
    pub group_size: usize,
    pub k: usize,
    pub sampled_seconds: f64,
    pub full_seconds: f64,
}

/// Median time to match one 64-dimensional target group of `group_size`
/// samples against a reference, with Gumbel top-`k` sampling and without.
pub fn matching_timing(group_size: usize, k: usize, seed: u64, reps: usize) -> Result<MatchingTiming> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bench_matching", 0));
    let mut group = |key: &str, shift: f64| {
        let features = random_features(64, group_size, shift, &mut rng);
        let labels = random_features(2, group_size, 0.0, &mut rng).mapv(|v| (0.4 * v).clamp(-1.0, 1.0));
        IdentityGroup::new(key, features, labels)
    };
    let batch = MiniBatch::new(vec![group("ref", 0.5)?, group("tgt", 0.8)?], 0)?;
    let sampled = MatchConfig {
        k,
        ..MatchConfig::default()
    };
    let full = MatchConfig {
        sampling: Sampling::None,
        ..sampled
    };
    let mut call = 0u64;
    let sampled_seconds = median_time(reps, || {
        call += 1;
        match_identities(&batch, &sampled, call)
    })?;
    let full_seconds = median_time(reps, || match_identities(&batch, &full, 0))?;
    Ok(MatchingTiming {
        group_size,
        k,
        sampled_seconds,
        full_seconds,
    })
}

/// Baseline and normalized training on one scenario, same seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRun {
    pub seed: u64,
    pub elim_worst_mse: f64,
    pub baseline_worst_mse: f64,
    pub elim_spread: f64,
    pub baseline_spread: f64,
}

/// Worst held-out identity MSE and probe spread of a trained model.
pub fn held_out_scores(outcome: &TrainOutcome, data: &SyntheticData, probe_seed: u64) -> Result<(f64, f64)> {
    let per_id = evaluate_ids(&outcome.params, &data.test)?;
    let (_, worst) = worst_id_risk(&per_id)?;
    let test_styles = data
        .styles
        .iter()
        .filter(|(k, _)| data.test.keys.contains(k))
        .map(|(k, s)| (k.clone(), s.clone()))
        .collect();
    let latents = probe_latents(data.test.input_dim(), 200, probe_seed);
    let probe = inconsistency_probe(&outcome.params, &test_styles, &latents)?;
    Ok((worst, probe.median_spread))
}

pub fn paired_run(scenario: &ShiftScenario, config: &TrainConfig) -> Result<PairedRun> {
    let data = generate(scenario)?;
    let run = |normalize: bool| -> Result<(f64, f64)> {
        let cfg = TrainConfig {
            normalize,
            ..config.clone()
        };
        let mut solver = ConfiguredSolver::from(&cfg.match_config());
        let outcome = train_with_solver(&cfg, &data.train, &mut solver)?;
        held_out_scores(&outcome, &data, scenario.seed)
    };
    let (elim_worst_mse, elim_spread) = run(true)?;
    let (baseline_worst_mse, baseline_spread) = run(false)?;
    Ok(PairedRun {
        seed: scenario.seed,
        elim_worst_mse,
        baseline_worst_mse,
        elim_spread,
        baseline_spread,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub solver: SolverKind,
    pub weighting: Weighting,
    pub sampling: Sampling,
    pub solver_seconds: f64,
    pub solver_calls: usize,
    pub ccc_mean: f64,
    pub metrics: MetricsReport,
}

/// The six solver/weighting/sampling combinations compared by [`compare`].
pub fn bench_variants() -> Vec<(SolverKind, Weighting, Sampling)> {
    use Sampling::{Gumbel, None};
    use SolverKind::{Exact, Sinkhorn};
    use Weighting::{Relevance, SelfSide};
    vec![
        (Sinkhorn, SelfSide, None),
        (Sinkhorn, SelfSide, Gumbel),
        (Sinkhorn, Relevance, None),
        (Sinkhorn, Relevance, Gumbel),
        (Exact, SelfSide, Gumbel),
        (Exact, Relevance, Gumbel),
    ]
}

/// Trains each variant on `scenario` and reports plan solver time and
/// held-out CCC.
pub fn compare(scenario: &ShiftScenario, config: &TrainConfig) -> Result<Vec<BenchRow>> {
    let data = generate(scenario)?;
    bench_variants()
        .into_iter()
        .map(|(solver, weighting, sampling)| {
            let cfg = TrainConfig {
                solver,
                weighting,
                sampling,
                ..config.clone()
            };
            let mut timed = TimedSolver::new(ConfiguredSolver::from(&cfg.match_config()));
            let outcome = train_with_solver(&cfg, &data.train, &mut timed)?;
            let metrics = evaluate(&data.test.labels, &outcome.params.predict(&data.test.inputs)?)?;
            Ok(BenchRow {
                solver,
                weighting,
                sampling,
                solver_seconds: timed.elapsed.as_secs_f64(),
                solver_calls: timed.calls,
                ccc_mean: metrics.ccc_mean(),
                metrics,
            })
        })
        .collect()
}
