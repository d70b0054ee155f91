//! Computations behind `www/index.html`.
//!
//! Every browser export is a thin JSON wrapper around a plain function, so
//! the numbers the page draws are tested natively.

use idmatch::matching::{
    gumbel_topk, match_identities, sampling_scores, IdentityGroup, MatchConfig, MiniBatch, Sampling,
};
use idmatch::ot::{cosine_cost, plan_entropy, sinkhorn, transport_cost, MarginalWeights, SinkhornConfig};
use idmatch::Error;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, Error>;

/// Largest side length accepted by [`plan_demo`].
pub const MAX_PLAN_SIZE: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanDemo {
    pub size: usize,
    /// Row-major `size x size`.
    pub cost: Vec<f64>,
    /// Row-major `size x size`.
    pub flow: Vec<f64>,
    pub transport_cost: f64,
    pub entropy: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

/// Directions spread over a half circle, lifted off the plane so no two
/// columns are orthogonal. Sorted by angle, so a sharp plan is near-diagonal.
fn arc_features(size: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((3, size), |(r, j)| {
        let t = std::f64::consts::PI * (j as f64 + 0.5) / size as f64;
        match r {
            0 => t.cos(),
            1 => t.sin(),
            _ => 0.3,
        }
    })
    .mapv(|x| x + jitter * rng.random_range(-1.0..1.0))
}

/// Sinkhorn plan between two jittered arcs with uniform marginals.
pub fn plan_demo(eta: f64, max_iter: usize, size: usize, seed: u64) -> Result<PlanDemo> {
    if !(2..=MAX_PLAN_SIZE).contains(&size) {
        return Err(Error::InvalidConfig(format!("size must be in 2..={MAX_PLAN_SIZE}, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = arc_features(size, 0.05, &mut rng);
    let target = arc_features(size, 0.05, &mut rng);
    let cost = cosine_cost(&reference, &target)?;
    let weights = MarginalWeights::uniform(size, size);
    let plan = sinkhorn(&cost, &weights, &SinkhornConfig::new(eta, max_iter, 1e-9)?)?;
    Ok(PlanDemo {
        size,
        cost: cost.view().iter().copied().collect(),
        flow: plan.flow.iter().copied().collect(),
        transport_cost: transport_cost(&cost, &plan.flow)?,
        entropy: plan_entropy(&plan.flow)?,
        iterations_used: plan.iterations_used,
        converged: plan.converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GumbelDemo {
    /// Sampling score of each item.
    pub pi: Vec<f64>,
    /// Fraction of draws that included each item.
    pub frequency: Vec<f64>,
    /// How often each item came first.
    pub top1: Vec<f64>,
}

/// Repeats Gumbel top-`k` selection over items whose label magnitudes are
/// `magnitudes` and counts how often each item is picked.
pub fn gumbel_demo(magnitudes: &[f64], k: usize, draws: usize, seed: u64) -> Result<GumbelDemo> {
    if draws == 0 {
        return Err(Error::InvalidConfig("draws must be positive".into()));
    }
    let n = magnitudes.len();
    let mut labels = Array2::zeros((2, n));
    for (j, &m) in magnitudes.iter().enumerate() {
        labels[[0, j]] = m;
    }
    let scores = sampling_scores(&labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = vec![0usize; n];
    let mut first = vec![0usize; n];
    for _ in 0..draws {
        let picked = gumbel_topk(&scores, k, &mut rng)?;
        if let Some(&i) = picked.first() {
            first[i] += 1;
        }
        for i in picked {
            hits[i] += 1;
        }
    }
    let share = |c: Vec<usize>| c.into_iter().map(|x| x as f64 / draws as f64).collect();
    Ok(GumbelDemo {
        pi: scores.pi,
        frequency: share(hits),
        top1: share(first),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftDemo {
    /// Per-sample shift of the fixed near target.
    pub near: Vec<f64>,
    /// Per-sample shift of the target rotated by `angle`.
    pub moved: Vec<f64>,
    pub near_mean: f64,
    pub moved_mean: f64,
}

const SHIFT_DIM: usize = 16;
const SHIFT_SAMPLES: usize = 20;

fn normalish(rng: &mut ChaCha8Rng) -> Array2<f64> {
    // Sum of uniforms is close enough to Gaussian for a picture.
    Array2::from_shape_simple_fn((SHIFT_DIM, SHIFT_SAMPLES), || {
        (0..4).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>() / 2.0
    })
}

/// Shift vectors of two targets against one reference: a near copy of the
/// reference, and a copy rotated by `angle` (0 = same as reference, 1 = negated).
pub fn shift_demo(angle: f64, seed: u64) -> Result<ShiftDemo> {
    if !(0.0..=1.0).contains(&angle) {
        return Err(Error::InvalidConfig(format!("angle must be in [0, 1], got {angle}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = normalish(&mut rng);
    let other = normalish(&mut rng);
    let near = &base + &(normalish(&mut rng) * 0.1);
    let theta = std::f64::consts::PI * angle;
    let moved = &base * theta.cos() + &other * theta.sin() + normalish(&mut rng) * 0.1;
    let mut labels = || Array2::from_shape_simple_fn((2, SHIFT_SAMPLES), || rng.random_range(-1.0..1.0));
    let batch = MiniBatch::new(
        vec![
            IdentityGroup::new("reference", base.clone(), labels())?,
            IdentityGroup::new("near", near, labels())?,
            IdentityGroup::new("moved", moved, labels())?,
        ],
        0,
    )?;
    let config = MatchConfig {
        sampling: Sampling::None,
        ..MatchConfig::default()
    };
    let out = match_identities(&batch, &config, seed)?;
    let mu = |key: &str| {
        out.iter()
            .find(|r| r.target_key == key)
            .map(|r| r.stats.mu.clone())
            .unwrap_or_default()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (near, moved) = (mu("near"), mu("moved"));
    Ok(ShiftDemo {
        near_mean: mean(&near),
        moved_mean: mean(&moved),
        near,
        moved,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = planJson)]
pub fn plan_json(eta: f64, max_iter: usize, size: usize, seed: u32) -> std::result::Result<String, JsError> {
    to_js(plan_demo(eta, max_iter, size, seed.into()))
}

#[wasm_bindgen(js_name = gumbelJson)]
pub fn gumbel_json(magnitudes: Vec<f64>, k: usize, draws: usize, seed: u32) -> std::result::Result<String, JsError> {
    to_js(gumbel_demo(&magnitudes, k, draws, seed.into()))
}

#[wasm_bindgen(js_name = shiftJson)]
pub fn shift_json(angle: f64, seed: u32) -> std::result::Result<String, JsError> {
    to_js(shift_demo(angle, seed.into()))
}
