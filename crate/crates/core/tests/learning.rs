use idmatch::learning::{
    normalize, per_id_mse, project, step_gradients, step_loss, train, BatchGroup, LossOptions, ModelParams,
    StepBatch, StepPlan, TrainConfig,
};
use idmatch::matching::{match_identities, IdentityGroup, MatchConfig, MiniBatch, Sampling, ShiftStats};
use idmatch::synthetic::{generate, ShiftScenario};
use idmatch::Dataset;
use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

struct Step {
    params: ModelParams,
    batch: StepBatch,
    plan: StepPlan,
}

fn matched(params: &ModelParams, batch: &StepBatch, config: &MatchConfig, seed: u64) -> StepPlan {
    let groups = batch
        .groups
        .iter()
        .map(|g| IdentityGroup::new(g.key.clone(), params.encode(&g.inputs).unwrap(), g.labels.clone()).unwrap())
        .collect();
    let mini = MiniBatch::new(groups, batch.reference_index).unwrap();
    StepPlan::from_matches(batch, match_identities(&mini, config, seed).unwrap()).unwrap()
}

fn random_step(seed: u64, p: usize, d: usize, ids: usize, per_id: usize, config: &MatchConfig) -> Step {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(p, d, &mut rng);
    let groups = (0..ids)
        .map(|i| {
            let shift = normal(&mut rng, p, 1);
            BatchGroup {
                key: format!("id{i}"),
                inputs: normal(&mut rng, p, per_id) + &shift,
                labels: Array2::from_shape_simple_fn((2, per_id), || rng.random_range(-1.0..1.0)),
            }
        })
        .collect();
    let batch = StepBatch {
        groups,
        reference_index: rng.random_range(0..ids),
    };
    let plan = matched(&params, &batch, config, seed);
    Step { params, batch, plan }
}

fn loss_at(step: &Step, flat: &[f64], opts: &LossOptions) -> f64 {
    let p = ModelParams::from_flat(step.params.input_dim(), step.params.feature_dim(), flat).unwrap();
    step_loss(&p, &step.batch, &step.plan, opts).unwrap().total
}

fn check_gradient(step: &Step, opts: &LossOptions, coords: usize, seed: u64) {
    let (_, grad) = step_gradients(&step.params, &step.batch, &step.plan, opts).unwrap();
    let flat = step.params.to_flat();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, flat.len(), coords.min(flat.len()));
    for i in picks {
        let mut up = flat.clone();
        let mut down = flat.clone();
        up[i] += h;
        down[i] -= h;
        let fd = (loss_at(step, &up, opts) - loss_at(step, &down, opts)) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs()).max(1e-3);
        assert!(
            (grad[i] - fd).abs() <= 1e-4 * scale,
            "coordinate {i}: analytic {} vs finite difference {fd}",
            grad[i]
        );
    }
}

#[test]
fn gradients_match_finite_differences() {
    let config = MatchConfig {
        k: 4,
        ..MatchConfig::default()
    };
    for seed in 0..4 {
        let step = random_step(seed, 5, 6, 3, 8, &config);
        check_gradient(&step, &LossOptions::default(), 60, seed);
        check_gradient(
            &step,
            &LossOptions {
                normalize: false,
                ..LossOptions::default()
            },
            60,
            seed + 100,
        );
    }
}

#[test]
fn gradients_with_self_side_weights_and_full_matching() {
    let config = MatchConfig {
        weighting: idmatch::matching::Weighting::SelfSide,
        sampling: Sampling::None,
        ..MatchConfig::default()
    };
    let step = random_step(42, 4, 5, 4, 6, &config);
    check_gradient(&step, &LossOptions::default(), 80, 1);
}

/// The plan is frozen: the analytic gradient agrees with differentiating a
/// loss whose shift statistics stay fixed, and disagrees with one that
/// re-matches after every perturbation.
#[test]
fn shift_statistics_carry_no_gradient() {
    let config = MatchConfig {
        k: 4,
        sampling: Sampling::None,
        ..MatchConfig::default()
    };
    let step = random_step(9, 4, 5, 3, 4, &config);
    let opts = LossOptions::default();
    let (_, grad) = step_gradients(&step.params, &step.batch, &step.plan, &opts).unwrap();
    let flat = step.params.to_flat();
    let (p, d) = (step.params.input_dim(), step.params.feature_dim());
    let rematched = |f: &[f64]| {
        let params = ModelParams::from_flat(p, d, f).unwrap();
        let plan = matched(&params, &step.batch, &config, 9);
        step_loss(&params, &step.batch, &plan, &opts).unwrap().total
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..step.params.encoder_len() {
        let mut up = flat.clone();
        let mut down = flat.clone();
        up[i] += h;
        down[i] -= h;
        let fd = (rematched(&up) - rematched(&down)) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs());
    }
    assert!(worst > 1e-4, "re-matching did not change the derivative ({worst})");

    // Matching on perturbed features changes the plan, and the gradient
    // follows the plan it is handed rather than the features.
    let mut noisy = step.params.clone();
    noisy.encoder.weight += &(normal(&mut ChaCha8Rng::seed_from_u64(3), p, d) * 0.5);
    let other = matched(&noisy, &step.batch, &config, 9);
    assert_ne!(other, step.plan);
    let (_, again) = step_gradients(&step.params, &step.batch, &step.plan, &opts).unwrap();
    assert_eq!(grad, again);
    let (_, moved) = step_gradients(&step.params, &step.batch, &other, &opts).unwrap();
    assert_ne!(grad, moved);
}

#[test]
fn perfect_fit_has_zero_gradient() {
    // Zero encoder, labels constant per axis, projector bias equal to them.
    let (p, d, n) = (3, 4, 5);
    let mut params = ModelParams::zeros(p, d);
    params.projector.beta = Array1::from(vec![0.25, -0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut labels = Array2::zeros((2, n));
    labels.row_mut(0).fill(0.25);
    labels.row_mut(1).fill(-0.5);
    let groups = (0..2)
        .map(|i| BatchGroup {
            key: format!("g{i}"),
            inputs: normal(&mut rng, p, n),
            labels: labels.clone(),
        })
        .collect();
    let batch = StepBatch {
        groups,
        reference_index: 0,
    };
    let plan = StepPlan {
        targets: vec![idmatch::learning::FrozenTarget {
            group: 1,
            indices: vec![0, 2, 4],
            stats: ShiftStats {
                mu: vec![0.0; 3],
                sigma: vec![0.0; 3],
            },
            flow: Array2::from_elem((5, 3), 1.0 / 15.0),
        }],
    };
    let (loss, grad) = step_gradients(&params, &batch, &plan, &LossOptions::default()).unwrap();
    assert_eq!((loss.main, loss.va), (0.0, 0.0));
    assert!(grad.iter().all(|&g| g == 0.0), "{grad:?}");
}

#[test]
fn closed_form_mse() {
    // One feature, identity encoder, gamma = (1, 0): predictions equal inputs on the valence axis.
    let mut params = ModelParams::zeros(1, 1);
    params.encoder.weight[[0, 0]] = 1.0;
    params.projector.gamma[[0, 0]] = 1.0;
    let inputs = Array2::from_shape_vec((1, 2), vec![0.5, -0.5]).unwrap();
    let labels = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let mse = per_id_mse(
        &params,
        &[BatchGroup {
            key: "A".into(),
            inputs,
            labels,
        }],
    )
    .unwrap();
    // ((0.25 + 0.25) + (1 + 1)) / 4
    assert!((mse["A"] - 0.625).abs() < 1e-15);
}

#[test]
fn normalized_columns_have_scaled_rms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = normal(&mut rng, 7, 5) * 3.0;
    let mu: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..2.0)).collect();
    let sigma = idmatch::matching::shift_scale(&z, &mu).unwrap();
    let eps = 1e-6;
    let stats = ShiftStats { mu, sigma: sigma.clone() };
    let zhat = normalize(&z, &stats, eps).unwrap();
    for (j, col) in zhat.columns().into_iter().enumerate() {
        let rms = (col.iter().map(|x| x * x).sum::<f64>() / col.len() as f64).sqrt();
        assert!((rms - sigma[j] / (sigma[j] + eps)).abs() < 1e-10);
    }
}

#[test]
fn projection_matches_explicit_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = ModelParams::init(3, 6, &mut rng);
    let z = normal(&mut rng, 6, 9);
    let out = project(&z, &params.projector).unwrap();
    for j in 0..9 {
        for r in 0..2 {
            let mut acc = params.projector.beta[r];
            for i in 0..6 {
                acc += params.projector.gamma[[i, r]] * z[[i, j]];
            }
            assert!((out[[r, j]] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn total_loss_decomposes() {
    let step = random_step(
        5,
        4,
        5,
        3,
        10,
        &MatchConfig {
            k: 5,
            ..MatchConfig::default()
        },
    );
    let l = step_loss(&step.params, &step.batch, &step.plan, &LossOptions::default()).unwrap();
    assert!((l.total - (l.main + l.va + 0.5 * (l.pcc_loss + l.ccc_loss))).abs() < 1e-15);
    assert_eq!(l.per_id_main.len(), 2);
    assert!((l.per_id_main.values().sum::<f64>() - l.main).abs() < 1e-15);
}

fn small_data(seed: u64) -> Dataset {
    generate(&ShiftScenario {
        num_ids: 4,
        test_ids: 2,
        samples_per_id: 40,
        raw_dim: 6,
        seed,
        ..ShiftScenario::default()
    })
    .unwrap()
    .train
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        num_ids: 4,
        feature_dim: 8,
        batch_per_id: 16,
        k: 6,
        seed: 3,
        ..TrainConfig::desk()
    }
}

#[test]
fn zero_steps_leave_parameters_untouched() {
    let data = small_data(1);
    let config = quick(0);
    let out = train(&config, &data).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.params, idmatch::learning::init_params(&config, data.input_dim()));
}

#[test]
fn training_is_reproducible() {
    let data = small_data(2);
    let a = train(&quick(25), &data).unwrap();
    let b = train(&quick(25), &data).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params.to_flat(), b.params.to_flat());
    let c = train(&TrainConfig { seed: 4, ..quick(25) }, &data).unwrap();
    assert_ne!(a.params.to_flat(), c.params.to_flat());
}

#[test]
fn loss_trends_down() {
    let data = small_data(3);
    let out = train(&quick(300), &data).unwrap();
    let window = |from: usize| out.log[from..from + 50].iter().map(|r| r.loss.total).sum::<f64>() / 50.0;
    let first = window(0);
    let last = window(250);
    assert!(last < first, "moving average went from {first} to {last}");
    for r in &out.log {
        assert!(r.loss.is_finite());
        assert_eq!(r.worst_id_risk, r.loss.per_id_main[&r.worst_id_key]);
    }
}

#[test]
fn too_few_groups_is_an_error() {
    let data = small_data(4);
    let one = data.select(&(0..40).collect::<Vec<_>>());
    assert!(train(&quick(2), &one).is_err());
}
