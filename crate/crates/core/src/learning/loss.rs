use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1, Axis};

use crate::error::{Error, Result};
use crate::matching::{MatchResult, ShiftStats};
use crate::metrics::{correlation_losses, moments, VARIANCE_GUARD};

use super::model::{normalize, project, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub main: f64,
    pub va: f64,
    pub pcc_loss: f64,
    pub ccc_loss: f64,
    pub total: f64,
    pub per_id_main: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn compose(main: f64, va: f64, pcc_loss: f64, ccc_loss: f64, per_id_main: BTreeMap<String, f64>) -> Self {
        Self {
            main,
            va,
            pcc_loss,
            ccc_loss,
            total: main + va + 0.5 * (pcc_loss + ccc_loss),
            per_id_main,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.main, self.va, self.pcc_loss, self.ccc_loss, self.total]
            .iter()
            .chain(self.per_id_main.values())
            .all(|x| x.is_finite())
    }
}

fn mse(pred: &Array2<f64>, labels: &Array2<f64>) -> f64 {
    (pred - labels).mapv(|e| e * e).mean().unwrap_or(0.0)
}

fn per_id(predictions: &BTreeMap<String, Array2<f64>>, labels: &BTreeMap<String, Array2<f64>>) -> Result<BTreeMap<String, f64>> {
    if predictions.is_empty() {
        return Err(Error::Empty("no target groups".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} prediction groups, {} label groups",
            predictions.len(),
            labels.len()
        )));
    }
    predictions
        .iter()
        .map(|(key, pred)| {
            let y = labels
                .get(key)
                .ok_or_else(|| Error::Dimension(format!("no labels for target {key}")))?;
            if y.dim() != pred.dim() || y.is_empty() {
                return Err(Error::Dimension(format!(
                    "target {key}: predictions {:?}, labels {:?}",
                    pred.dim(),
                    y.dim()
                )));
            }
            Ok((key.clone(), mse(pred, y)))
        })
        .collect()
}

/// Sum over targets of the per-target mean squared error.
pub fn main_loss(predictions: &BTreeMap<String, Array2<f64>>, labels: &BTreeMap<String, Array2<f64>>) -> Result<f64> {
    Ok(per_id(predictions, labels)?.values().sum())
}

/// Combines the target-path main loss with the raw-path VA and correlation
/// losses. `raw_predictions` and `raw_labels` are `2 x n` over the whole batch.
pub fn total_loss(
    predictions: &BTreeMap<String, Array2<f64>>,
    labels: &BTreeMap<String, Array2<f64>>,
    raw_predictions: &Array2<f64>,
    raw_labels: &Array2<f64>,
) -> Result<LossBreakdown> {
    let per_id_main = per_id(predictions, labels)?;
    if raw_predictions.dim() != raw_labels.dim() || raw_labels.nrows() != 2 {
        return Err(Error::Dimension(format!(
            "raw predictions {:?}, labels {:?}",
            raw_predictions.dim(),
            raw_labels.dim()
        )));
    }
    if raw_labels.ncols() < 2 {
        return Err(Error::Empty("correlation losses need at least 2 samples".into()));
    }
    let row = |m: &Array2<f64>, r: usize| m.row(r).to_vec();
    let (yv, ya, pv, pa) = (row(raw_labels, 0), row(raw_labels, 1), row(raw_predictions, 0), row(raw_predictions, 1));
    let mse_row = |y: &[f64], p: &[f64]| y.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    let va = mse_row(&yv, &pv) + mse_row(&ya, &pa);
    let (pcc_loss, ccc_loss) = correlation_losses((&yv, &pv), (&ya, &pa))?;
    let main = per_id_main.values().sum();
    let out = LossBreakdown::compose(main, va, pcc_loss, ccc_loss, per_id_main);
    if !out.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(out)
}

/// Key with the largest loss; ties go to the smallest key.
pub fn worst_id_risk(per_id_losses: &BTreeMap<String, f64>) -> Result<(String, f64)> {
    let mut best: Option<(&String, f64)> = None;
    for (key, &loss) in per_id_losses {
        if best.is_none_or(|(_, b)| loss > b) {
            best = Some((key, loss));
        }
    }
    best.map(|(k, v)| (k.clone(), v))
        .ok_or_else(|| Error::Empty("no per-identity losses".into()))
}

/// One identity's rows of a training step: raw inputs and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGroup {
    pub key: String,
    /// `p x B`
    pub inputs: Array2<f64>,
    /// `2 x B`
    pub labels: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub groups: Vec<BatchGroup>,
    pub reference_index: usize,
}

impl StepBatch {
    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.groups
            .iter()
            .map(|g| {
                let start = acc;
                acc += g.labels.ncols();
                start
            })
            .collect()
    }

    fn concat(&self) -> (Array2<f64>, Array2<f64>) {
        let inputs: Vec<_> = self.groups.iter().map(|g| g.inputs.view()).collect();
        let labels: Vec<_> = self.groups.iter().map(|g| g.labels.view()).collect();
        (
            ndarray::concatenate(Axis(1), &inputs).expect("groups share input dimension"),
            ndarray::concatenate(Axis(1), &labels).expect("labels are 2 x B"),
        )
    }
}

/// Matching outcome for one target, held fixed while differentiating.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTarget {
    /// Position of the target in [`StepBatch::groups`].
    pub group: usize,
    /// Sampled columns within the group.
    pub indices: Vec<usize>,
    pub stats: ShiftStats,
    pub flow: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub targets: Vec<FrozenTarget>,
}

impl StepPlan {
    /// Attaches matching results to the groups of `batch` by key.
    pub fn from_matches(batch: &StepBatch, matches: Vec<MatchResult>) -> Result<Self> {
        let targets = matches
            .into_iter()
            .map(|m| {
                let group = batch
                    .groups
                    .iter()
                    .position(|g| g.key == m.target_key)
                    .ok_or_else(|| Error::Dimension(format!("matched key {} not in batch", m.target_key)))?;
                Ok(FrozenTarget {
                    group,
                    indices: m.target_indices,
                    stats: m.stats,
                    flow: m.flow,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { targets })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub eps: f64,
    /// When false the target path sees raw features (the no-normalization baseline).
    pub normalize: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            normalize: true,
        }
    }
}

struct TargetPass {
    columns: Vec<usize>,
    scale: Vec<f64>,
    zhat: Array2<f64>,
    pred: Array2<f64>,
    labels: Array2<f64>,
}

struct Forward {
    inputs: Array2<f64>,
    raw_pred: Array2<f64>,
    raw_labels: Array2<f64>,
    features: Array2<f64>,
    targets: Vec<TargetPass>,
    loss: LossBreakdown,
}

fn forward(params: &ModelParams, batch: &StepBatch, plan: &StepPlan, opts: &LossOptions) -> Result<Forward> {
    if plan.targets.is_empty() {
        return Err(Error::Empty("step has no targets".into()));
    }
    let (inputs, raw_labels) = batch.concat();
    let features = params.encode(&inputs)?;
    let raw_pred = project(&features, &params.projector)?;
    let offsets = batch.offsets();

    let mut targets = Vec::with_capacity(plan.targets.len());
    let mut preds = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for t in &plan.targets {
        let group = batch
            .groups
            .get(t.group)
            .ok_or_else(|| Error::Dimension(format!("target group {} out of range", t.group)))?;
        if let Some(&bad) = t.indices.iter().find(|&&i| i >= group.labels.ncols()) {
            return Err(Error::Dimension(format!("index {bad} out of range for group {}", group.key)));
        }
        let columns: Vec<usize> = t.indices.iter().map(|&i| offsets[t.group] + i).collect();
        let z = features.select(Axis(1), &columns);
        let (zhat, scale) = if opts.normalize {
            let scale = t.stats.sigma.iter().map(|s| s + opts.eps).collect();
            (normalize(&z, &t.stats, opts.eps)?, scale)
        } else {
            (z, vec![1.0; columns.len()])
        };
        let pred = project(&zhat, &params.projector)?;
        let y = group.labels.select(Axis(1), &t.indices);
        preds.insert(group.key.clone(), pred.clone());
        labels.insert(group.key.clone(), y.clone());
        targets.push(TargetPass {
            columns,
            scale,
            zhat,
            pred,
            labels: y,
        });
    }
    let loss = total_loss(&preds, &labels, &raw_pred, &raw_labels)?;
    Ok(Forward {
        inputs,
        raw_pred,
        raw_labels,
        features,
        targets,
        loss,
    })
}

/// Loss of one step with the matching outcome held fixed.
pub fn step_loss(params: &ModelParams, batch: &StepBatch, plan: &StepPlan, opts: &LossOptions) -> Result<LossBreakdown> {
    Ok(forward(params, batch, plan, opts)?.loss)
}

/// Adds `coef * d(PCC + CCC)/dp` for one label axis to `out`. Zero when the
/// variance guard trips.
fn correlation_grad(y: ArrayView1<f64>, p: ArrayView1<f64>, coef: f64, mut out: ArrayViewMut1<f64>) {
    let n = y.len() as f64;
    let ys = y.to_vec();
    let ps = p.to_vec();
    let (my, vy) = moments(&ys);
    let (mp, vp) = moments(&ps);
    if vy < VARIANCE_GUARD || vp < VARIANCE_GUARD {
        return;
    }
    let cov = ys.iter().zip(&ps).map(|(a, b)| (a - my) * (b - mp)).sum::<f64>() / n;
    let (sy, sp) = (vy.sqrt(), vp.sqrt());
    let d = vy + vp + (my - mp) * (my - mp);
    for (i, o) in out.iter_mut().enumerate() {
        let a = ys[i] - my;
        let b = ps[i] - mp;
        let dpcc = a / (n * sy * sp) - cov * b / (n * sy * sp * sp * sp);
        let dccc = 2.0 * a / (n * d) - 2.0 * cov * (2.0 * b / n + 2.0 * (mp - my) / n) / (d * d);
        *o += coef * (dpcc + dccc);
    }
}

/// Loss and flat gradient (same layout as [`ModelParams::to_flat`]).
///
/// Shift statistics, plans and sampled indices are constants of the step;
/// only the features in the numerator of the normalization and the
/// projector carry gradient.
pub fn step_gradients(
    params: &ModelParams,
    batch: &StepBatch,
    plan: &StepPlan,
    opts: &LossOptions,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let fw = forward(params, batch, plan, opts)?;
    let gamma = &params.projector.gamma;
    let n = fw.raw_labels.ncols() as f64;

    let mut d_gamma = Array2::<f64>::zeros(gamma.dim());
    let mut d_beta = Array1::<f64>::zeros(2);
    let mut d_features = Array2::<f64>::zeros(fw.features.dim());

    // raw path: VA mean squared error plus correlation terms
    let mut d_raw = (&fw.raw_pred - &fw.raw_labels) * (2.0 / n);
    for axis in 0..2 {
        correlation_grad(fw.raw_labels.row(axis), fw.raw_pred.row(axis), -0.25, d_raw.row_mut(axis));
    }
    d_gamma += &fw.features.dot(&d_raw.t());
    d_beta += &d_raw.sum_axis(Axis(1));
    d_features += &gamma.dot(&d_raw);

    for t in &fw.targets {
        let m = t.labels.len() as f64;
        let d_pred = (&t.pred - &t.labels) * (2.0 / m);
        d_gamma += &t.zhat.dot(&d_pred.t());
        d_beta += &d_pred.sum_axis(Axis(1));
        let d_zhat = gamma.dot(&d_pred);
        for (j, &col) in t.columns.iter().enumerate() {
            let mut dst = d_features.column_mut(col);
            dst.scaled_add(1.0 / t.scale[j], &d_zhat.column(j));
        }
    }

    let d_weight = fw.inputs.dot(&d_features.t());
    let d_bias = d_features.sum_axis(Axis(1));
    let grad: Vec<f64> = d_weight
        .iter()
        .chain(d_bias.iter())
        .chain(d_gamma.iter())
        .chain(d_beta.iter())
        .copied()
        .collect();
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("coordinate {i} of {}", grad.len())));
    }
    Ok((fw.loss, grad))
}

/// Mean squared error of the inference path (encoder and projector, no
/// normalization) for each key of `groups`.
pub fn per_id_mse(params: &ModelParams, groups: &[BatchGroup]) -> Result<BTreeMap<String, f64>> {
    groups
        .iter()
        .map(|g| Ok((g.key.clone(), mse(&params.predict(&g.inputs)?, &g.labels))))
        .collect()
}
