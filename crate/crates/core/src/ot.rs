//! Entropy-regularized optimal transport.
//!
//! The solver follows the single-vector Sinkhorn-Knopp fixed point
//!
//! ```text
//! K  = exp(-eta * C)
//! K~ = diag(1 ./ a) K
//! u <- 1 ./ (K~ (b ./ (K^T u)))
//! v  = b ./ (K^T u)
//! X  = diag(u) K diag(v)
//! ```
//!
//! `eta` acts as an inverse temperature: large values give a sharp kernel and
//! plans close to an optimal vertex of the linear program, small values give
//! smooth, high-entropy plans. Marginals are rescaled to unit mass before
//! solving, so the balance condition `sum(a) == sum(b)` always holds.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `d x n` matrix whose columns are feature vectors.
pub type FeatureSet = Array2<f64>;

/// Nonnegative, finite matching costs between `n` suppliers and `m` demanders.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("cost matrix".into()));
        }
        for ((i, j), &c) in entries.indexed_iter() {
            if !c.is_finite() {
                return Err(Error::NonFinite(format!("cost entry ({i}, {j})")));
            }
            if c < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "cost entry ({i}, {j}) is negative: {c}"
                )));
            }
        }
        Ok(Self(entries))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Dimension("ragged cost rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let entries = Array2::from_shape_vec((n, m), flat)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(entries)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.t().to_owned())
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Supplier masses `a` and demander masses `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalWeights {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl MarginalWeights {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        check_masses("a", &a)?;
        check_masses("b", &b)?;
        Ok(Self { a, b })
    }

    pub fn uniform(n: usize, m: usize) -> Self {
        Self {
            a: vec![1.0 / n as f64; n],
            b: vec![1.0 / m as f64; m],
        }
    }

    /// Both marginals rescaled to unit mass.
    pub fn normalized(&self) -> Result<(Array1<f64>, Array1<f64>)> {
        check_masses("a", &self.a)?;
        check_masses("b", &self.b)?;
        let sa: f64 = self.a.iter().sum();
        let sb: f64 = self.b.iter().sum();
        Ok((
            self.a.iter().map(|x| x / sa).collect(),
            self.b.iter().map(|x| x / sb).collect(),
        ))
    }
}

fn check_masses(name: &str, w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::InvalidWeights(format!("{name} is empty")));
    }
    if let Some(i) = w.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{name}[{i}]")));
    }
    if let Some(i) = w.iter().position(|&x| x < 0.0) {
        return Err(Error::InvalidWeights(format!("{name}[{i}] is negative")));
    }
    if !w.iter().any(|&x| x > 0.0) {
        return Err(Error::InvalidWeights(format!(
            "{name} has no strictly positive entry"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Kernel sharpness; the kernel is `exp(-eta * C)`.
    pub eta: f64,
    pub max_iter: usize,
    /// Stop once `max |u_new - u_old| < tol`.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            eta: 5.0,
            max_iter: 5,
            tol: 1e-9,
        }
    }
}

impl SinkhornConfig {
    pub fn new(eta: f64, max_iter: usize, tol: f64) -> Result<Self> {
        let config = Self { eta, max_iter, tol };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "eta must be positive and finite, got {}",
                self.eta
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tol must be positive and finite, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Output of [`sinkhorn`]. `flow == diag(u) * K * diag(v)` by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub flow: Array2<f64>,
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Array1<f64> {
        self.flow.sum_axis(Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.flow.sum_axis(Axis(0))
    }
}

/// `C[i, j] = 1 - cos(ref_i, tgt_j)` for column features.
pub fn cosine_cost(ref_features: &FeatureSet, tgt_features: &FeatureSet) -> Result<CostMatrix> {
    let d = ref_features.nrows();
    if d == 0 {
        return Err(Error::Empty("feature dimension".into()));
    }
    if tgt_features.nrows() != d {
        return Err(Error::Dimension(format!(
            "reference features have dimension {d}, target features {}",
            tgt_features.nrows()
        )));
    }
    if ref_features.ncols() == 0 || tgt_features.ncols() == 0 {
        return Err(Error::Empty("feature set without columns".into()));
    }
    if ref_features.iter().chain(tgt_features.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("feature set".into()));
    }

    let ref_norms = column_norms("reference", ref_features)?;
    let tgt_norms = column_norms("target", tgt_features)?;
    let dots = ref_features.t().dot(tgt_features);
    let mut cost = dots;
    for ((i, j), c) in cost.indexed_iter_mut() {
        let cos = *c / (ref_norms[i] * tgt_norms[j]);
        *c = (1.0 - cos).clamp(0.0, 2.0);
    }
    CostMatrix::new(cost)
}

fn column_norms(side: &'static str, features: &FeatureSet) -> Result<Vec<f64>> {
    features
        .columns()
        .into_iter()
        .enumerate()
        .map(|(column, col)| {
            let norm = col.dot(&col).sqrt();
            if norm > 0.0 {
                Ok(norm)
            } else {
                Err(Error::ZeroNormColumn { side, column })
            }
        })
        .collect()
}

/// Gibbs kernel `exp(-eta * C)`.
pub fn gibbs_kernel(cost: &CostMatrix, eta: f64) -> Array2<f64> {
    cost.view().mapv(|c| (-eta * c).exp())
}

/// Solves the entropic transport problem by Sinkhorn-Knopp iteration.
///
/// When every supplier mass is positive the single-vector update
/// `u <- 1 ./ (K~ (b ./ K^T u))` is used. Otherwise the alternating form
/// `u <- a ./ (K (b ./ K^T u))` takes over, which pins `u_i = 0` on empty
/// rows; this is the reduced problem with those rows restored as zeros.
pub fn sinkhorn(
    cost: &CostMatrix,
    weights: &MarginalWeights,
    config: &SinkhornConfig,
) -> Result<TransportPlan> {
    config.validate()?;
    let (n, m) = cost.shape();
    if weights.a.len() != n || weights.b.len() != m {
        return Err(Error::Dimension(format!(
            "cost is {n}x{m} but marginals have lengths {} and {}",
            weights.a.len(),
            weights.b.len()
        )));
    }
    let (a, b) = weights.normalized()?;
    let kernel = gibbs_kernel(cost, config.eta);
    let all_positive = a.iter().all(|&x| x > 0.0);
    // K~ = diag(1 ./ a) K
    let scaled_kernel = all_positive.then(|| {
        let mut kt = kernel.clone();
        for (mut row, &ai) in kt.rows_mut().into_iter().zip(a.iter()) {
            row.mapv_inplace(|k| k / ai);
        }
        kt
    });

    let mut u = Array1::from_elem(n, 1.0 / n as f64);
    let mut iterations_used = 0;
    let mut converged = false;
    for t in 1..=config.max_iter {
        let w = demand_ratio(&kernel, &u, &b, t)?;
        let u_new = match &scaled_kernel {
            Some(kt) => {
                let denom = kt.dot(&w);
                if denom.iter().any(|&x| x == 0.0) {
                    return Err(Error::Underflow { iteration: t });
                }
                denom.mapv(|x| 1.0 / x)
            }
            None => {
                let kw = kernel.dot(&w);
                let mut next = Array1::zeros(n);
                for i in 0..n {
                    if a[i] > 0.0 {
                        if kw[i] == 0.0 {
                            return Err(Error::Underflow { iteration: t });
                        }
                        next[i] = a[i] / kw[i];
                    }
                }
                next
            }
        };
        if u_new.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("scaling vector u at iteration {t}")));
        }
        let change = u_new
            .iter()
            .zip(u.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        u = u_new;
        iterations_used = t;
        if change < config.tol {
            converged = true;
            break;
        }
    }

    let v = demand_ratio(&kernel, &u, &b, iterations_used)?;
    let mut flow = kernel;
    for ((i, j), x) in flow.indexed_iter_mut() {
        *x *= u[i] * v[j];
    }
    if flow.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("transport plan".into()));
    }
    Ok(TransportPlan {
        flow,
        u,
        v,
        iterations_used,
        converged,
    })
}

/// `b ./ (K^T u)`, rejecting zero denominators on columns that carry mass.
fn demand_ratio(
    kernel: &Array2<f64>,
    u: &Array1<f64>,
    b: &Array1<f64>,
    iteration: usize,
) -> Result<Array1<f64>> {
    let ktu = kernel.t().dot(u);
    let mut w = Array1::zeros(b.len());
    for j in 0..b.len() {
        if b[j] > 0.0 {
            if ktu[j] == 0.0 {
                return Err(Error::Underflow { iteration });
            }
            w[j] = b[j] / ktu[j];
        }
    }
    if w.iter().any(|x: &f64| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "column scaling at iteration {iteration}"
        )));
    }
    Ok(w)
}

/// `sum_ij C[i, j] * X[i, j]`.
pub fn transport_cost(cost: &CostMatrix, flow: &Array2<f64>) -> Result<f64> {
    if cost.shape() != flow.dim() {
        return Err(Error::Dimension(format!(
            "cost is {:?} but flow is {:?}",
            cost.shape(),
            flow.dim()
        )));
    }
    Ok(cost.view().iter().zip(flow.iter()).map(|(c, x)| c * x).sum())
}

/// Entropy `-sum X (log X - 1)` with `0 log 0 = 0`. Reported only.
pub fn plan_entropy(flow: &Array2<f64>) -> Result<f64> {
    let mut h = 0.0;
    for &x in flow {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::NonFinite(format!("plan entry {x}")));
        }
        if x > 0.0 {
            h -= x * (x.ln() - 1.0);
        }
    }
    Ok(h)
}

/// Largest absolute deviation of the plan's row and column sums from the
/// unit-mass marginals.
pub fn marginal_residuals(flow: &Array2<f64>, weights: &MarginalWeights) -> Result<(f64, f64)> {
    let (a, b) = weights.normalized()?;
    let rows = flow.sum_axis(Axis(1));
    let cols = flow.sum_axis(Axis(0));
    if rows.len() != a.len() || cols.len() != b.len() {
        return Err(Error::Dimension("plan does not match marginals".into()));
    }
    let sup = |x: &Array1<f64>, y: &Array1<f64>| {
        x.iter()
            .zip(y.iter())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    };
    Ok((sup(&rows, &a), sup(&cols, &b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cost(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cosine_cost_examples() {
        let c = cosine_cost(&array![[1.0], [0.0]], &array![[1.0, -1.0, 1.0], [0.0, 0.0, 1.0]])
            .unwrap();
        assert_eq!(c.view()[[0, 0]], 0.0);
        assert_eq!(c.view()[[0, 1]], 2.0);
        assert!((c.view()[[0, 2]] - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-15);
        assert!((c.view()[[0, 2]] - 0.29289).abs() < 1e-5);
    }

    #[test]
    fn cosine_cost_rejects_zero_column() {
        let err = cosine_cost(&array![[1.0, 0.0], [0.0, 0.0]], &array![[1.0], [1.0]]).unwrap_err();
        match err {
            Error::ZeroNormColumn { side, column } => {
                assert_eq!(side, "reference");
                assert_eq!(column, 1);
            }
            other => panic!("unexpected error {other}"),
        }
        assert!(cosine_cost(&array![[1.0], [0.0]], &array![[1.0], [0.0], [0.0]]).is_err());
    }

    #[test]
    fn constant_cost_gives_independent_coupling() {
        let plan = sinkhorn(
            &cost(&[&[0.0, 0.0], &[0.0, 0.0]]),
            &MarginalWeights::new(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap(),
            &SinkhornConfig::default(),
        )
        .unwrap();
        for x in &plan.flow {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn sharp_kernel_approaches_diagonal() {
        let c = cost(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let plan = sinkhorn(
            &c,
            &MarginalWeights::uniform(2, 2),
            &SinkhornConfig::new(50.0, 500, 1e-12).unwrap(),
        )
        .unwrap();
        assert!((plan.flow[[0, 0]] - 0.5).abs() < 1e-6);
        assert!((plan.flow[[1, 1]] - 0.5).abs() < 1e-6);
        assert!(transport_cost(&c, &plan.flow).unwrap() <= 0.01);
    }

    #[test]
    fn default_config_matches_truncated_loop() {
        let c = SinkhornConfig::default();
        assert_eq!((c.eta, c.max_iter), (5.0, 5));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SinkhornConfig::new(0.0, 5, 1e-9).is_err());
        assert!(SinkhornConfig::new(1.0, 0, 1e-9).is_err());
        assert!(SinkhornConfig::new(1.0, 5, 0.0).is_err());
        assert!(SinkhornConfig::new(f64::NAN, 5, 1e-9).is_err());
    }

    #[test]
    fn underflow_is_reported() {
        let c = cost(&[&[0.0, 2.0], &[2.0, 2.0]]);
        let err = sinkhorn(
            &c,
            &MarginalWeights::uniform(2, 2),
            &SinkhornConfig::new(1e4, 50, 1e-9).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Underflow { .. }), "{err}");
    }

    #[test]
    fn zero_supplier_row_is_restored_as_zeros() {
        let c = cost(&[&[0.3, 0.9, 0.1], &[0.5, 0.2, 0.7], &[0.8, 0.4, 0.6]]);
        let config = SinkhornConfig::new(3.0, 1000, 1e-13).unwrap();
        let full = sinkhorn(
            &c,
            &MarginalWeights::new(vec![0.4, 0.0, 0.6], vec![0.2, 0.5, 0.3]).unwrap(),
            &config,
        )
        .unwrap();
        let reduced = sinkhorn(
            &cost(&[&[0.3, 0.9, 0.1], &[0.8, 0.4, 0.6]]),
            &MarginalWeights::new(vec![0.4, 0.6], vec![0.2, 0.5, 0.3]).unwrap(),
            &config,
        )
        .unwrap();
        for j in 0..3 {
            assert_eq!(full.flow[[1, j]], 0.0);
            assert!((full.flow[[0, j]] - reduced.flow[[0, j]]).abs() < 1e-12);
            assert!((full.flow[[2, j]] - reduced.flow[[1, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let c = cost(&[&[0.0, 1.0]]);
        assert!(sinkhorn(&c, &MarginalWeights::uniform(2, 2), &SinkhornConfig::default()).is_err());
        assert!(transport_cost(&c, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn transport_cost_examples() {
        let c = cost(&[&[0.2, 0.8], &[0.6, 0.4]]);
        let x = array![[0.3, 0.2], [0.1, 0.4]];
        assert!((transport_cost(&c, &x).unwrap() - 0.44).abs() < 1e-15);
        assert_eq!(transport_cost(&c, &Array2::zeros((2, 2))).unwrap(), 0.0);
        let zero = cost(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(transport_cost(&zero, &x).unwrap(), 0.0);
    }

    #[test]
    fn entropy_examples() {
        let uniform = Array2::from_elem((2, 2), 0.25);
        let expected = 0.25 * 4.0 * (1.0 + 4f64.ln());
        assert!((plan_entropy(&uniform).unwrap() - expected).abs() < 1e-14);
        assert!((plan_entropy(&uniform).unwrap() - 2.3863).abs() < 1e-4);
        assert_eq!(plan_entropy(&array![[1.0, 0.0], [0.0, 0.0]]).unwrap(), 1.0);
        assert_eq!(plan_entropy(&Array2::zeros((3, 2))).unwrap(), 0.0);
        assert!(plan_entropy(&array![[f64::NAN]]).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(MarginalWeights::new(vec![0.0, 0.0], vec![1.0]).is_err());
        assert!(MarginalWeights::new(vec![-0.1, 1.0], vec![1.0]).is_err());
        assert!(MarginalWeights::new(vec![], vec![1.0]).is_err());
        let (a, b) = MarginalWeights::new(vec![1.0, 3.0], vec![2.0])
            .unwrap()
            .normalized()
            .unwrap();
        assert_eq!(a.to_vec(), vec![0.25, 0.75]);
        assert_eq!(b.to_vec(), vec![1.0]);
    }
}
