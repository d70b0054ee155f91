use std::collections::BTreeMap;

use log::warn;
use ndarray::Axis;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matching::{
    derive_seed, match_identities_with, select_reference, ConfiguredSolver, IdentityGroup, MatchConfig, PlanSolver,
    Sampling, SolverKind, Weighting,
};
use crate::ot::SinkhornConfig;

use super::loss::{per_id_mse, step_gradients, worst_id_risk, BatchGroup, LossBreakdown, LossOptions, StepBatch, StepPlan};
use super::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

/// Multiply learning rates by `factor` at step `first` and then every `every` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub factor: f64,
    pub first: usize,
    pub every: usize,
}

impl LrDecay {
    pub fn scale(&self, step: usize) -> f64 {
        if step < self.first {
            return 1.0;
        }
        let extra = (step - self.first).checked_div(self.every).unwrap_or(0);
        self.factor.powi(1 + extra as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_projector: f64,
    pub eps: f64,
    /// Identities per step.
    pub num_ids: usize,
    pub k: usize,
    /// Samples drawn from each identity per step.
    pub batch_per_id: usize,
    pub feature_dim: usize,
    pub sinkhorn: SinkhornConfig,
    pub weighting: Weighting,
    pub sampling: Sampling,
    pub solver: SolverKind,
    pub resample_reference: bool,
    pub steps: usize,
    pub optimizer: Optimizer,
    pub lr_decay: Option<LrDecay>,
    /// Disable to train the same pipeline without shift/scale normalization.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 5e-5,
            lr_projector: 1e-5,
            eps: 1e-6,
            num_ids: 10,
            k: 10,
            batch_per_id: 32,
            feature_dim: 64,
            sinkhorn: SinkhornConfig::default(),
            weighting: Weighting::Relevance,
            sampling: Sampling::Gumbel,
            solver: SolverKind::Sinkhorn,
            resample_reference: true,
            steps: 2000,
            optimizer: Optimizer::Adam,
            lr_decay: None,
            normalize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with learning rates large enough to converge within a few
    /// thousand steps on the synthetic scenarios.
    pub fn desk() -> Self {
        Self {
            lr_encoder: 1e-2,
            lr_projector: 1e-2,
            ..Self::default()
        }
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            k: self.k,
            sinkhorn: self.sinkhorn,
            weighting: self.weighting,
            sampling: self.sampling,
            solver: self.solver,
            resample_reference: self.resample_reference,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            eps: self.eps,
            normalize: self.normalize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive, got {x}")))
            }
        };
        positive("lr_encoder", self.lr_encoder)?;
        positive("lr_projector", self.lr_projector)?;
        positive("eps", self.eps)?;
        if self.num_ids < 2 {
            return Err(Error::InvalidConfig(format!("num_ids must be at least 2, got {}", self.num_ids)));
        }
        if self.k == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidConfig("k and feature_dim must be at least 1".into()));
        }
        if self.batch_per_id < 2 {
            return Err(Error::InvalidConfig("batch_per_id must be at least 2".into()));
        }
        if let Some(d) = self.lr_decay {
            if !(d.factor > 0.0 && d.factor <= 1.0) {
                return Err(Error::InvalidConfig(format!("decay factor must be in (0, 1], got {}", d.factor)));
            }
        }
        self.sinkhorn.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub worst_id_key: String,
    pub worst_id_risk: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<StepRecord>,
}

enum OptState {
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
    Sgd,
}

struct Updater {
    state: OptState,
    lr: Vec<f64>,
    decay: Option<LrDecay>,
}

impl Updater {
    fn new(config: &TrainConfig, params: &ModelParams) -> Self {
        let n = params.num_params();
        let split = params.encoder_len();
        let lr = (0..n)
            .map(|i| if i < split { config.lr_encoder } else { config.lr_projector })
            .collect();
        let state = match config.optimizer {
            Optimizer::Adam => OptState::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
            Optimizer::Sgd => OptState::Sgd,
        };
        Self {
            state,
            lr,
            decay: config.lr_decay,
        }
    }

    fn apply(&mut self, step: usize, flat: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let scale = self.decay.map_or(1.0, |d| d.scale(step));
        match &mut self.state {
            OptState::Sgd => {
                for ((p, g), lr) in flat.iter_mut().zip(grad).zip(&self.lr) {
                    *p -= scale * lr * g;
                }
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                for i in 0..flat.len() {
                    m[i] = B1 * m[i] + (1.0 - B1) * grad[i];
                    v[i] = B2 * v[i] + (1.0 - B2) * grad[i] * grad[i];
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    flat[i] -= scale * self.lr[i] * mh / (vh.sqrt() + EPS);
                }
            }
        }
    }
}

/// Every identity of `data` as a [`BatchGroup`], keys sorted.
pub fn batch_groups(data: &Dataset) -> Vec<BatchGroup> {
    data.groups()
        .into_iter()
        .map(|(key, idx)| BatchGroup {
            key,
            inputs: data.inputs.select(Axis(1), &idx),
            labels: data.labels.select(Axis(1), &idx),
        })
        .collect()
}

fn usable_groups(config: &TrainConfig, data: &Dataset) -> Result<Vec<BatchGroup>> {
    let min_len = if config.sampling == Sampling::Gumbel { config.k } else { 2 };
    let mut usable = Vec::new();
    for g in batch_groups(data) {
        if g.labels.ncols() < min_len {
            warn!("skipping group {} with {} samples (need {min_len})", g.key, g.labels.ncols());
        } else {
            usable.push(g);
        }
    }
    if usable.len() < 2 {
        return Err(Error::TooFewGroups {
            needed: 2,
            have: usable.len(),
        });
    }
    Ok(usable)
}

/// Draws the identities and samples of one step.
fn draw_step(config: &TrainConfig, groups: &[BatchGroup], rng: &mut ChaCha8Rng) -> Vec<BatchGroup> {
    let take = config.num_ids.min(groups.len());
    let mut chosen = sample(rng, groups.len(), take).into_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|gi| {
            let g = &groups[gi];
            let n = g.labels.ncols();
            let idx = sample(rng, n, config.batch_per_id.min(n)).into_vec();
            BatchGroup {
                key: g.key.clone(),
                inputs: g.inputs.select(Axis(1), &idx),
                labels: g.labels.select(Axis(1), &idx),
            }
        })
        .collect()
}

/// Initial parameters for `config` on inputs of dimension `input_dim`.
pub fn init_params(config: &TrainConfig, input_dim: usize) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init", 0));
    ModelParams::init(input_dim, config.feature_dim, &mut rng)
}

pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut solver = ConfiguredSolver::from(&config.match_config());
    train_with_solver(config, data, &mut solver)
}

/// [`train`] with a caller-supplied plan solver (used for timing).
pub fn train_with_solver(config: &TrainConfig, data: &Dataset, solver: &mut dyn PlanSolver) -> Result<TrainOutcome> {
    let params = init_params(config, data.input_dim());
    train_from(config, data, params, solver)
}

/// Continues training from `params`.
pub fn train_from(
    config: &TrainConfig,
    data: &Dataset,
    mut params: ModelParams,
    solver: &mut dyn PlanSolver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if params.input_dim() != data.input_dim() || params.feature_dim() != config.feature_dim {
        return Err(Error::Dimension(format!(
            "model is {} -> {}, data has {} inputs and config asks for {} features",
            params.input_dim(),
            params.feature_dim(),
            data.input_dim(),
            config.feature_dim
        )));
    }
    let groups = usable_groups(config, data)?;
    let match_config = config.match_config();
    let opts = config.loss_options();
    let mut updater = Updater::new(config, &params);
    let mut flat = params.to_flat();
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "batch", step as u64));
        let drawn = draw_step(config, &groups, &mut rng);
        let identity_groups = drawn
            .iter()
            .map(|g| IdentityGroup::new(g.key.clone(), params.encode(&g.inputs)?, g.labels.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mini = select_reference(identity_groups, &mut rng)?;
        let matches = match_identities_with(
            &mini,
            &match_config,
            derive_seed(config.seed, "match", step as u64),
            solver,
        )?;
        let batch = StepBatch {
            groups: drawn,
            reference_index: mini.reference_index,
        };
        let plan = StepPlan::from_matches(&batch, matches)?;
        let (loss, grad) = step_gradients(&params, &batch, &plan, &opts)
            .map_err(|e| Error::NonFiniteGradient(format!("step {step}: {e}")))?;
        updater.apply(step, &mut flat, &grad);
        params.set_flat(&flat);
        if !params.is_finite() {
            return Err(Error::NonFiniteGradient(format!("parameters became non-finite at step {step}")));
        }
        let (worst_id_key, worst_id_risk) = worst_id_risk(&loss.per_id_main)?;
        log.push(StepRecord {
            step,
            loss,
            worst_id_key,
            worst_id_risk,
        });
    }
    Ok(TrainOutcome { params, log })
}

/// Inference-path MSE per identity of `data`.
pub fn evaluate_ids(params: &ModelParams, data: &Dataset) -> Result<BTreeMap<String, f64>> {
    per_id_mse(params, &batch_groups(data))
}
