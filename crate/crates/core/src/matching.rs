//! Grouping by identity, reliable-sample selection and transport-based shift
//! statistics.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::solve_transport_exact;
use crate::ot::{cosine_cost, sinkhorn, transport_cost, CostMatrix, FeatureSet, MarginalWeights, SinkhornConfig};

/// Features (`d x n`) and 2-D labels (`2 x n`) sharing one grouping key.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityGroup {
    pub key: String,
    pub features: FeatureSet,
    pub labels: Array2<f64>,
}

impl IdentityGroup {
    pub fn new(key: impl Into<String>, features: FeatureSet, labels: Array2<f64>) -> Result<Self> {
        let key = key.into();
        if features.ncols() == 0 {
            return Err(Error::Empty(format!("group {key} has no samples")));
        }
        if labels.nrows() != 2 || labels.ncols() != features.ncols() {
            return Err(Error::Dimension(format!(
                "group {key}: {} feature columns but labels are {:?}",
                features.ncols(),
                labels.dim()
            )));
        }
        if labels.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("labels of group {key}")));
        }
        Ok(Self { key, features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.features.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.nrows()
    }
}

/// One labelled sample before grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub key: String,
    pub features: Vec<f64>,
    pub label: [f64; 2],
}

/// Sample positions per distinct key, keys sorted, positions in input order.
pub fn group_indices<S: AsRef<str>>(keys: &[S]) -> Vec<(String, Vec<usize>)> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, key) in keys.iter().enumerate() {
        groups.entry(key.as_ref()).or_default().push(idx);
    }
    groups.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn group_by_identity(samples: &[Sample]) -> Result<Vec<IdentityGroup>> {
    let first = samples.first().ok_or_else(|| Error::Empty("sample list".into()))?;
    let d = first.features.len();
    if let Some(pos) = samples.iter().position(|s| s.features.len() != d) {
        return Err(Error::Dimension(format!(
            "sample {pos} has {} features, expected {d}",
            samples[pos].features.len()
        )));
    }
    let keys: Vec<&str> = samples.iter().map(|s| s.key.as_str()).collect();
    group_indices(&keys)
        .into_iter()
        .map(|(key, idx)| {
            let features = Array2::from_shape_fn((d, idx.len()), |(r, c)| samples[idx[c]].features[r]);
            let labels = Array2::from_shape_fn((2, idx.len()), |(r, c)| samples[idx[c]].label[r]);
            IdentityGroup::new(key, features, labels)
        })
        .collect()
}

/// Groups of one step, one of which is the reference.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub groups: Vec<IdentityGroup>,
    pub reference_index: usize,
}

impl MiniBatch {
    pub fn new(groups: Vec<IdentityGroup>, reference_index: usize) -> Result<Self> {
        if groups.len() < 2 {
            return Err(Error::TooFewGroups {
                needed: 2,
                have: groups.len(),
            });
        }
        if reference_index >= groups.len() {
            return Err(Error::InvalidConfig(format!(
                "reference index {reference_index} out of range for {} groups",
                groups.len()
            )));
        }
        let d = groups[0].dim();
        if let Some(g) = groups.iter().find(|g| g.dim() != d) {
            return Err(Error::Dimension(format!(
                "group {} has feature dimension {}, expected {d}",
                g.key,
                g.dim()
            )));
        }
        Ok(Self { groups, reference_index })
    }

    pub fn reference(&self) -> &IdentityGroup {
        &self.groups[self.reference_index]
    }

    pub fn targets(&self) -> impl Iterator<Item = &IdentityGroup> {
        let r = self.reference_index;
        self.groups.iter().enumerate().filter(move |(i, _)| *i != r).map(|(_, g)| g)
    }
}

/// Picks the reference group uniformly at random.
pub fn select_reference<R: Rng + ?Sized>(groups: Vec<IdentityGroup>, rng: &mut R) -> Result<MiniBatch> {
    if groups.len() < 2 {
        return Err(Error::TooFewGroups {
            needed: 2,
            have: groups.len(),
        });
    }
    let reference_index = rng.random_range(0..groups.len());
    MiniBatch::new(groups, reference_index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingScores {
    pub pi: Vec<f64>,
    /// Every label was `(0, 0)` and the scores fell back to uniform.
    pub uniform_fallback: bool,
}

/// `pi_i = |y_i| / sum_l |y_l|` over the columns of a `2 x n` label matrix.
pub fn sampling_scores(labels: &Array2<f64>) -> Result<SamplingScores> {
    let n = labels.ncols();
    if n == 0 {
        return Err(Error::Empty("labels".into()));
    }
    let norms: Vec<f64> = labels.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    if norms.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("labels".into()));
    }
    let total: f64 = norms.iter().sum();
    if total == 0.0 {
        log::warn!("all {n} labels are (0, 0); using uniform sampling scores");
        return Ok(SamplingScores {
            pi: vec![1.0 / n as f64; n],
            uniform_fallback: true,
        });
    }
    Ok(SamplingScores {
        pi: norms.iter().map(|x| x / total).collect(),
        uniform_fallback: false,
    })
}

/// Draws `k` distinct indices by ranking `log pi + Gumbel(0, 1)`.
///
/// Returned in decreasing order of perturbed score. Zero-probability entries
/// have score `-inf` and are never drawn.
pub fn gumbel_topk<R: Rng + ?Sized>(scores: &SamplingScores, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = scores.pi.len();
    if k > n {
        return Err(Error::Sampling(format!("cannot draw {k} of {n} samples")));
    }
    if scores.pi.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(Error::Sampling("sampling scores must be finite and nonnegative".into()));
    }
    let positive = scores.pi.iter().filter(|&&p| p > 0.0).count();
    if k > positive {
        return Err(Error::Sampling(format!(
            "cannot draw {k} samples: only {positive} have positive score"
        )));
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard Gumbel parameters are valid");
    let mut keyed: Vec<(f64, usize)> = scores
        .pi
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let noise = gumbel.sample(rng);
            let g = if p > 0.0 { p.ln() + noise } else { f64::NEG_INFINITY };
            (g, i)
        })
        .collect();
    keyed.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    Ok(keyed.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Weights plus flags recording a fallback to uniform mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub weights: MarginalWeights,
    pub fallback_a: bool,
    pub fallback_b: bool,
}

/// Prototype relevance: `a_i = [z_i . mean(target)]_+`, L2-normalized, and
/// the symmetric rule for `b`. A fully clipped side falls back to uniform.
pub fn relevance_weights(reference: &FeatureSet, target: &FeatureSet) -> Result<WeightReport> {
    check_pair(reference, target)?;
    let (a, fallback_a) = clipped_relevance(reference, target);
    let (b, fallback_b) = clipped_relevance(target, reference);
    Ok(WeightReport {
        weights: MarginalWeights::new(a, b)?,
        fallback_a,
        fallback_b,
    })
}

fn clipped_relevance(side: &FeatureSet, other: &FeatureSet) -> (Vec<f64>, bool) {
    let prototype = other.mean_axis(Axis(1)).expect("nonempty feature set");
    let raw: Vec<f64> = side.columns().into_iter().map(|c| c.dot(&prototype).max(0.0)).collect();
    l2_normalize_or_uniform(raw)
}

/// Per-sample L2 norm of each feature column, L2-normalized.
pub fn self_side_weights(reference: &FeatureSet, target: &FeatureSet) -> Result<WeightReport> {
    check_pair(reference, target)?;
    let norms = |f: &FeatureSet| -> Vec<f64> { f.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect() };
    let (a, fallback_a) = l2_normalize_or_uniform(norms(reference));
    let (b, fallback_b) = l2_normalize_or_uniform(norms(target));
    Ok(WeightReport {
        weights: MarginalWeights::new(a, b)?,
        fallback_a,
        fallback_b,
    })
}

fn check_pair(reference: &FeatureSet, target: &FeatureSet) -> Result<()> {
    if reference.ncols() == 0 || target.ncols() == 0 {
        return Err(Error::Empty("feature set without columns".into()));
    }
    if reference.nrows() != target.nrows() {
        return Err(Error::Dimension(format!(
            "feature dimensions differ: {} vs {}",
            reference.nrows(),
            target.nrows()
        )));
    }
    if reference.iter().chain(target.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("features".into()));
    }
    Ok(())
}

fn l2_normalize_or_uniform(raw: Vec<f64>) -> (Vec<f64>, bool) {
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        (raw.into_iter().map(|x| x / norm).collect(), false)
    } else {
        let n = raw.len();
        (vec![1.0 / (n as f64).sqrt(); n], true)
    }
}

/// `mu_j = sum_i C[i, j] X[i, j]`.
pub fn id_shift(cost: &CostMatrix, flow: &Array2<f64>) -> Result<Vec<f64>> {
    if cost.shape() != flow.dim() {
        return Err(Error::Dimension(format!(
            "cost is {:?} but flow is {:?}",
            cost.shape(),
            flow.dim()
        )));
    }
    Ok((cost.view().to_owned() * flow).sum_axis(Axis(0)).to_vec())
}

/// Per-column spread around the shift: `sigma_j = sqrt(mean_i (Z[i, j] - mu_j)^2)`.
pub fn shift_scale(features: &FeatureSet, mu: &[f64]) -> Result<Vec<f64>> {
    if features.ncols() != mu.len() {
        return Err(Error::Dimension(format!(
            "{} feature columns but {} shift values",
            features.ncols(),
            mu.len()
        )));
    }
    let d = features.nrows() as f64;
    Ok(features
        .columns()
        .into_iter()
        .zip(mu)
        .map(|(col, &m)| (col.iter().map(|z| (z - m) * (z - m)).sum::<f64>() / d).sqrt())
        .collect())
}

/// Shift `mu` and scale `sigma` for the sampled target columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Relevance,
    SelfSide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Gumbel,
    /// Match every sample of both groups.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Sinkhorn,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub k: usize,
    pub sinkhorn: SinkhornConfig,
    pub weighting: Weighting,
    pub sampling: Sampling,
    pub solver: SolverKind,
    /// Draw a fresh reference subset for every target.
    pub resample_reference: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            k: 10,
            sinkhorn: SinkhornConfig::default(),
            weighting: Weighting::Relevance,
            sampling: Sampling::Gumbel,
            solver: SolverKind::Sinkhorn,
            resample_reference: true,
        }
    }
}

/// Produces a transport plan for one matching problem.
pub trait PlanSolver {
    /// Returns the flow and whether the solver reached its stopping criterion.
    fn solve(&mut self, cost: &CostMatrix, weights: &MarginalWeights) -> Result<(Array2<f64>, bool)>;
}

/// The solver selected by a [`MatchConfig`].
#[derive(Debug, Clone, Copy)]
pub struct ConfiguredSolver {
    pub kind: SolverKind,
    pub sinkhorn: SinkhornConfig,
}

impl From<&MatchConfig> for ConfiguredSolver {
    fn from(config: &MatchConfig) -> Self {
        Self {
            kind: config.solver,
            sinkhorn: config.sinkhorn,
        }
    }
}

impl PlanSolver for ConfiguredSolver {
    fn solve(&mut self, cost: &CostMatrix, weights: &MarginalWeights) -> Result<(Array2<f64>, bool)> {
        match self.kind {
            SolverKind::Sinkhorn => {
                let plan = sinkhorn(cost, weights, &self.sinkhorn)?;
                Ok((plan.flow, plan.converged))
            }
            SolverKind::Exact => {
                let (a, b) = weights.normalized()?;
                let unit = MarginalWeights::new(a.to_vec(), b.to_vec())?;
                Ok((solve_transport_exact(cost, &unit)?.flow, true))
            }
        }
    }
}

/// Everything computed while matching one target group to the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub target_key: String,
    pub reference_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub weights: WeightReport,
    pub score_fallback: bool,
    pub cost: CostMatrix,
    pub flow: Array2<f64>,
    pub transport_cost: f64,
    pub converged: bool,
    pub stats: ShiftStats,
}

/// Seed for one named stream under a master seed.
///
/// FNV-1a over the key followed by a splitmix64 finalizer, so the stream for
/// a given key does not depend on which other keys are present.
pub fn derive_seed(master: u64, key: &str, salt: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in key.bytes() {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ master.rotate_left(17) ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn select_columns(features: &FeatureSet, idx: &[usize]) -> FeatureSet {
    features.select(Axis(1), idx)
}

fn draw_indices<R: Rng>(group: &IdentityGroup, config: &MatchConfig, rng: &mut R) -> Result<(Vec<usize>, bool)> {
    match config.sampling {
        Sampling::None => Ok(((0..group.len()).collect(), false)),
        Sampling::Gumbel => {
            if group.len() < config.k {
                return Err(Error::Sampling(format!(
                    "group {} has {} samples, fewer than k = {}",
                    group.key,
                    group.len(),
                    config.k
                )));
            }
            let scores = sampling_scores(&group.labels)?;
            Ok((gumbel_topk(&scores, config.k, rng)?, scores.uniform_fallback))
        }
    }
}

/// Matches every target group against the reference.
pub fn match_identities(batch: &MiniBatch, config: &MatchConfig, seed: u64) -> Result<Vec<MatchResult>> {
    match_identities_with(batch, config, seed, &mut ConfiguredSolver::from(config))
}

/// [`match_identities`] with a caller-supplied plan solver.
///
/// Each target draws from its own random stream derived from `seed` and its
/// key, so results do not depend on the order targets are processed in.
pub fn match_identities_with(
    batch: &MiniBatch,
    config: &MatchConfig,
    seed: u64,
    solver: &mut dyn PlanSolver,
) -> Result<Vec<MatchResult>> {
    config.sinkhorn.validate()?;
    if config.sampling == Sampling::Gumbel && config.k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let reference = batch.reference();
    let shared_reference = if config.resample_reference {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &reference.key, 1));
        Some(draw_indices(reference, config, &mut rng)?)
    };

    batch
        .targets()
        .map(|target| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &target.key, 0));
            let (reference_indices, ref_fallback) = match &shared_reference {
                Some(shared) => shared.clone(),
                None => draw_indices(reference, config, &mut rng)?,
            };
            let (target_indices, tgt_fallback) = draw_indices(target, config, &mut rng)?;
            let ref_feat = select_columns(&reference.features, &reference_indices);
            let tgt_feat = select_columns(&target.features, &target_indices);

            let cost = cosine_cost(&ref_feat, &tgt_feat)?;
            let weights = match config.weighting {
                Weighting::Relevance => relevance_weights(&ref_feat, &tgt_feat)?,
                Weighting::SelfSide => self_side_weights(&ref_feat, &tgt_feat)?,
            };
            let (flow, converged) = solver.solve(&cost, &weights.weights)?;
            let mu = id_shift(&cost, &flow)?;
            let sigma = shift_scale(&tgt_feat, &mu)?;
            Ok(MatchResult {
                target_key: target.key.clone(),
                reference_indices,
                target_indices,
                weights,
                score_fallback: ref_fallback || tgt_fallback,
                transport_cost: transport_cost(&cost, &flow)?,
                cost,
                flow,
                converged,
                stats: ShiftStats { mu, sigma },
            })
        })
        .collect()
}
