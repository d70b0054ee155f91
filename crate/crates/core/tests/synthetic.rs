use idmatch::learning::{batch_groups, ModelParams};
use idmatch::matching::{match_identities, IdentityGroup, MatchConfig, MiniBatch};
use idmatch::synthetic::{generate, id_key, inconsistency_probe, probe_latents, ShiftScenario};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Least-squares map from latents to labels, `Y Z^T (Z Z^T)^-1`, by
/// Gauss-Seidel on the normal equations.
fn regress(z: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let gram = z.dot(&z.t());
    let rhs = y.dot(&z.t());
    let p = gram.nrows();
    let mut w = Array2::<f64>::zeros((2, p));
    for _ in 0..200 {
        for r in 0..2 {
            for i in 0..p {
                let off: f64 = (0..p).filter(|&j| j != i).map(|j| gram[[i, j]] * w[[r, j]]).sum();
                w[[r, i]] = (rhs[[r, i]] - off) / gram[[i, i]];
            }
        }
    }
    w
}

#[test]
fn labels_share_one_conditional_across_identities() {
    let scenario = ShiftScenario {
        samples_per_id: 1500,
        label_noise: 0.0,
        ..ShiftScenario::default()
    };
    let data = generate(&scenario).unwrap();
    for (i, (_, idx)) in data.train.groups().into_iter().enumerate().take(3) {
        let z = data.train_latents.select(Axis(1), &idx);
        let y = data.train.labels.select(Axis(1), &idx);
        let w = regress(&z, &y);
        // Clipping to [-1, 1] shrinks the slope a little.
        let err = (&w - &data.label_map).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 0.06, "identity {i}: largest coefficient error {err}");
    }
}

#[test]
fn inputs_carry_identity_offsets() {
    let data = generate(&ShiftScenario {
        samples_per_id: 4000,
        ..ShiftScenario::default()
    })
    .unwrap();
    for (key, idx) in data.train.groups() {
        let style = &data.styles[&key];
        let mean = data.train.inputs.select(Axis(1), &idx).mean_axis(Axis(1)).unwrap();
        for (m, o) in mean.iter().zip(&style.offset) {
            // Latent mean has standard error 1/sqrt(4000) per coordinate.
            assert!((m - style.scale * o).abs() < 0.08, "{key}: {m} vs {}", style.scale * o);
        }
        let norm = style.offset.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((0.7..=1.3).contains(&style.scale));
    }
}

#[test]
fn no_shift_scenario_gives_even_shift_levels() {
    let data = generate(&ShiftScenario::no_shift(7)).unwrap();
    let params = ModelParams::init(16, 32, &mut ChaCha8Rng::seed_from_u64(1));
    let groups: Vec<_> = batch_groups(&data.train)
        .into_iter()
        .map(|g| IdentityGroup::new(g.key, params.encode(&g.inputs).unwrap(), g.labels).unwrap())
        .collect();
    let batch = MiniBatch::new(groups, 0).unwrap();
    let out = match_identities(&batch, &MatchConfig::default(), 7).unwrap();
    let means: Vec<f64> = out
        .iter()
        .map(|r| r.stats.mu.iter().sum::<f64>() / r.stats.mu.len() as f64)
        .collect();
    let avg = means.iter().sum::<f64>() / means.len() as f64;
    let sd = (means.iter().map(|m| (m - avg) * (m - avg)).sum::<f64>() / means.len() as f64).sqrt();
    assert!(sd / avg < 0.2, "coefficient of variation {}", sd / avg);
}

#[test]
fn generation_is_deterministic_and_seeded() {
    let a = generate(&ShiftScenario::default()).unwrap();
    let b = generate(&ShiftScenario::default()).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    assert_eq!(a.styles, b.styles);
    let c = generate(&ShiftScenario {
        seed: 1,
        ..ShiftScenario::default()
    })
    .unwrap();
    assert_ne!(a.train.inputs, c.train.inputs);
    assert_eq!(a.test.keys[0], id_key(10));
    assert!(a.train.labels.iter().all(|y| (-1.0..=1.0).contains(y)));
}

#[test]
fn probe_is_zero_for_identity_blind_models() {
    let data = generate(&ShiftScenario::default()).unwrap();
    let mut params = ModelParams::zeros(16, 4);
    params.projector.beta[0] = 0.3;
    let latents = probe_latents(16, 50, 0);
    let report = inconsistency_probe(&params, &data.styles, &latents).unwrap();
    assert_eq!(report.median_spread, 0.0);
    assert!(report.per_id_spread.values().all(|&s| s == 0.0));

    let params = ModelParams::init(16, 4, &mut ChaCha8Rng::seed_from_u64(2));
    let report = inconsistency_probe(&params, &data.styles, &latents).unwrap();
    assert!(report.median_spread > 0.0);
    let none = generate(&ShiftScenario::no_shift(0)).unwrap();
    let report = inconsistency_probe(&params, &none.styles, &latents).unwrap();
    assert!(report.median_spread < 1e-12);
}
