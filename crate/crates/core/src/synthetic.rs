//! Synthetic identity-shift data.
//!
//! Every identity shares one label mechanism `y = clip(W z + noise)` on a
//! canonical latent `z`, but observes `x = s_e (z + o_e)` with its own offset
//! `o_e` (norm `shift_scale`) and scale `s_e`. Test identities are disjoint
//! from training identities.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::learning::ModelParams;
use crate::matching::derive_seed;

/// Norm of each row of the shared label map.
const LABEL_ROW_NORM: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftScenario {
    pub num_ids: usize,
    /// Unseen identities in the test split.
    pub test_ids: usize,
    pub samples_per_id: usize,
    pub raw_dim: usize,
    pub shift_scale: f64,
    pub scale_jitter: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for ShiftScenario {
    fn default() -> Self {
        Self {
            num_ids: 10,
            test_ids: 5,
            samples_per_id: 64,
            raw_dim: 16,
            shift_scale: 1.0,
            scale_jitter: 0.3,
            label_noise: 0.05,
            seed: 0,
        }
    }
}

impl ShiftScenario {
    /// Identically distributed identities.
    pub fn no_shift(seed: u64) -> Self {
        Self {
            shift_scale: 0.0,
            scale_jitter: 0.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.num_ids < 2 {
            return Err(Error::InvalidConfig(format!("num_ids must be at least 2, got {}", self.num_ids)));
        }
        if self.samples_per_id < k.max(1) {
            return Err(Error::InvalidConfig(format!(
                "samples_per_id {} is below k = {k}",
                self.samples_per_id
            )));
        }
        if self.raw_dim == 0 {
            return Err(Error::InvalidConfig("raw_dim must be at least 1".into()));
        }
        for (name, x) in [
            ("shift_scale", self.shift_scale),
            ("scale_jitter", self.scale_jitter),
            ("label_noise", self.label_noise),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative, got {x}")));
            }
        }
        if self.scale_jitter >= 1.0 {
            return Err(Error::InvalidConfig("scale_jitter must be below 1".into()));
        }
        Ok(())
    }
}

/// Per-identity rendering parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityStyle {
    pub offset: Vec<f64>,
    pub scale: f64,
}

impl IdentityStyle {
    /// `scale * (z + offset)` for every column of `latents`.
    pub fn render(&self, latents: &Array2<f64>) -> Array2<f64> {
        let offset = Array1::from(self.offset.clone());
        let mut x = latents.clone();
        for mut col in x.columns_mut() {
            col += &offset;
            col *= self.scale;
        }
        x
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    /// `2 x p`
    pub label_map: Array2<f64>,
    pub styles: BTreeMap<String, IdentityStyle>,
    /// `p x n` canonical latents, aligned with `train` then `test` columns.
    pub train_latents: Array2<f64>,
    pub test_latents: Array2<f64>,
}

fn normal_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

pub fn id_key(i: usize) -> String {
    format!("id{i:03}")
}

pub fn generate(scenario: &ShiftScenario) -> Result<SyntheticData> {
    scenario.validate(1)?;
    let p = scenario.raw_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scenario.seed, "label_map", 0));
    let mut label_map = normal_matrix(2, p, &mut rng);
    for mut row in label_map.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row *= LABEL_ROW_NORM / norm;
    }

    let mut styles = BTreeMap::new();
    let mut render_split = |first: usize, count: usize| -> (Dataset, Array2<f64>) {
        let mut keys = Vec::new();
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut latents = Vec::new();
        for i in first..first + count {
            let key = id_key(i);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scenario.seed, &key, 0));
            let offset = if scenario.shift_scale > 0.0 {
                let dir: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                dir.iter().map(|x| x * scenario.shift_scale / norm).collect()
            } else {
                vec![0.0; p]
            };
            let scale = if scenario.scale_jitter > 0.0 {
                rng.random_range(1.0 - scenario.scale_jitter..=1.0 + scenario.scale_jitter)
            } else {
                1.0
            };
            let style = IdentityStyle { offset, scale };
            let z = normal_matrix(p, scenario.samples_per_id, &mut rng);
            let noise = normal_matrix(2, scenario.samples_per_id, &mut rng);
            let y = (label_map.dot(&z) + noise * scenario.label_noise).mapv(|v| v.clamp(-1.0, 1.0));
            inputs.push(style.render(&z));
            labels.push(y);
            latents.push(z);
            keys.extend(std::iter::repeat_n(key.clone(), scenario.samples_per_id));
            styles.insert(key, style);
        }
        let cat = |parts: &[Array2<f64>]| {
            let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("equal row counts")
        };
        let data = Dataset {
            keys,
            inputs: cat(&inputs),
            labels: cat(&labels),
        };
        (data, cat(&latents))
    };
    let (train, train_latents) = render_split(0, scenario.num_ids);
    let (test, test_latents) = render_split(scenario.num_ids, scenario.test_ids);
    Ok(SyntheticData {
        train,
        test,
        label_map,
        styles,
        train_latents,
        test_latents,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Mean distance from each identity's predictions to the other identities'.
    pub per_id_spread: BTreeMap<String, f64>,
    /// Median over probe latents of the mean pairwise prediction distance.
    pub median_spread: f64,
}

/// Renders the same latents (hence the same labels) through several
/// identities and measures how far apart the predictions land.
pub fn inconsistency_probe(
    params: &ModelParams,
    styles: &BTreeMap<String, IdentityStyle>,
    latents: &Array2<f64>,
) -> Result<ProbeReport> {
    if styles.len() < 2 {
        return Err(Error::TooFewGroups {
            needed: 2,
            have: styles.len(),
        });
    }
    if latents.ncols() == 0 {
        return Err(Error::Empty("no probe latents".into()));
    }
    let preds = styles
        .values()
        .map(|s| params.predict(&s.render(latents)))
        .collect::<Result<Vec<_>>>()?;
    let e = preds.len();
    let n = latents.ncols();
    let dist = |a: usize, b: usize, j: usize| {
        let dv = preds[a][[0, j]] - preds[b][[0, j]];
        let da = preds[a][[1, j]] - preds[b][[1, j]];
        (dv * dv + da * da).sqrt()
    };
    let pairs = (e * (e - 1) / 2) as f64;
    let mut per_latent = Vec::with_capacity(n);
    let mut per_id = vec![0.0; e];
    for j in 0..n {
        let mut total = 0.0;
        for a in 0..e {
            for b in a + 1..e {
                let d = dist(a, b, j);
                total += d;
                per_id[a] += d;
                per_id[b] += d;
            }
        }
        per_latent.push(total / pairs);
    }
    per_latent.sort_by(f64::total_cmp);
    let median_spread = if n % 2 == 1 {
        per_latent[n / 2]
    } else {
        (per_latent[n / 2 - 1] + per_latent[n / 2]) / 2.0
    };
    let per_id_spread = styles
        .keys()
        .zip(per_id)
        .map(|(k, s)| (k.clone(), s / ((e - 1) * n) as f64))
        .collect();
    Ok(ProbeReport {
        per_id_spread,
        median_spread,
    })
}

/// Standard-normal probe latents for [`inconsistency_probe`].
pub fn probe_latents(raw_dim: usize, count: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "probe", 0));
    normal_matrix(raw_dim, count, &mut rng)
}
