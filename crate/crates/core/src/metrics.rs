//! Regression metrics for 2-D (valence, arousal) predictions.
//!
//! All moments are population moments (divide by `n`). Correlations of a
//! series whose variance is below [`VARIANCE_GUARD`] are reported as 0 and
//! flagged degenerate.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCE_GUARD: f64 = 1e-12;

fn check(truth: &[f64], prediction: &[f64], min_len: usize) -> Result<()> {
    if truth.len() != prediction.len() {
        return Err(Error::Dimension(format!(
            "truth has {} values, prediction {}",
            truth.len(),
            prediction.len()
        )));
    }
    if truth.len() < min_len {
        return Err(Error::Empty(format!("need at least {min_len} values, got {}", truth.len())));
    }
    if truth.iter().chain(prediction).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(())
}

pub fn rmse(truth: &[f64], prediction: &[f64]) -> Result<f64> {
    check(truth, prediction, 1)?;
    let mse = truth.iter().zip(prediction).map(|(y, p)| (y - p) * (y - p)).sum::<f64>() / truth.len() as f64;
    Ok(mse.sqrt())
}

/// Fraction of positions whose signs agree. `sign(0) = 0` matches only 0.
pub fn sagr(truth: &[f64], prediction: &[f64]) -> Result<f64> {
    check(truth, prediction, 1)?;
    let sign = |x: f64| {
        if x > 0.0 {
            1
        } else if x < 0.0 {
            -1
        } else {
            0
        }
    };
    let agree = truth.iter().zip(prediction).filter(|(y, p)| sign(**y) == sign(**p)).count();
    Ok(agree as f64 / truth.len() as f64)
}

/// Population mean and variance.
pub fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn covariance(x: &[f64], mx: f64, y: &[f64], my: f64) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

impl Correlation {
    fn degenerate() -> Self {
        Self {
            value: 0.0,
            degenerate: true,
        }
    }
}

pub fn pcc(truth: &[f64], prediction: &[f64]) -> Result<Correlation> {
    check(truth, prediction, 2)?;
    let (my, vy) = moments(truth);
    let (mp, vp) = moments(prediction);
    if vy < VARIANCE_GUARD || vp < VARIANCE_GUARD {
        return Ok(Correlation::degenerate());
    }
    let value = covariance(truth, my, prediction, mp) / (vy.sqrt() * vp.sqrt());
    Ok(Correlation {
        value: value.clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// `2 sy sp PCC / (vy + vp + (my - mp)^2)`.
pub fn ccc(truth: &[f64], prediction: &[f64]) -> Result<Correlation> {
    check(truth, prediction, 2)?;
    let (my, vy) = moments(truth);
    let (mp, vp) = moments(prediction);
    if vy < VARIANCE_GUARD || vp < VARIANCE_GUARD {
        return Ok(Correlation::degenerate());
    }
    let cov = covariance(truth, my, prediction, mp);
    let value = 2.0 * cov / (vy + vp + (my - mp) * (my - mp));
    Ok(Correlation {
        value: value.clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// `(1 - (PCC_v + PCC_a) / 2, 1 - (CCC_v + CCC_a) / 2)`.
pub fn correlation_losses(valence: (&[f64], &[f64]), arousal: (&[f64], &[f64])) -> Result<(f64, f64)> {
    let pv = pcc(valence.0, valence.1)?.value;
    let pa = pcc(arousal.0, arousal.1)?.value;
    let cv = ccc(valence.0, valence.1)?.value;
    let ca = ccc(arousal.0, arousal.1)?.value;
    Ok((1.0 - (pv + pa) / 2.0, 1.0 - (cv + ca) / 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_v: f64,
    pub rmse_a: f64,
    pub sagr_v: f64,
    pub sagr_a: f64,
    pub pcc_v: f64,
    pub pcc_a: f64,
    pub ccc_v: f64,
    pub ccc_a: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn ccc_mean(&self) -> f64 {
        (self.ccc_v + self.ccc_a) / 2.0
    }
}

/// Metrics over `2 x n` label and prediction matrices (row 0 valence, row 1 arousal).
pub fn evaluate(truth: &Array2<f64>, prediction: &Array2<f64>) -> Result<MetricsReport> {
    if truth.dim() != prediction.dim() || truth.nrows() != 2 {
        return Err(Error::Dimension(format!(
            "labels {:?} and predictions {:?} must both be 2 x n",
            truth.dim(),
            prediction.dim()
        )));
    }
    let row = |m: &Array2<f64>, r: usize| m.row(r).to_vec();
    let (yv, ya, pv, pa) = (row(truth, 0), row(truth, 1), row(prediction, 0), row(prediction, 1));
    Ok(MetricsReport {
        rmse_v: rmse(&yv, &pv)?,
        rmse_a: rmse(&ya, &pa)?,
        sagr_v: sagr(&yv, &pv)?,
        sagr_a: sagr(&ya, &pa)?,
        pcc_v: pcc(&yv, &pv)?.value,
        pcc_a: pcc(&ya, &pa)?.value,
        ccc_v: ccc(&yv, &pv)?.value,
        ccc_a: ccc(&ya, &pa)?.value,
        n: truth.ncols(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[0.3, -0.2], &[0.3, -0.2]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.53553).abs() < 1e-5);
        assert_eq!(rmse(&[1.0], &[0.0]).unwrap(), 1.0);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sagr_examples() {
        assert_eq!(sagr(&[0.5, -0.1, 0.0], &[0.5, -0.1, 0.0]).unwrap(), 1.0);
        assert_eq!(sagr(&[1.0, -1.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(sagr(&[1.0, -1.0], &[-1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(sagr(&[0.0], &[0.1]).unwrap(), 0.0);
    }

    #[test]
    fn pcc_examples() {
        let y = [0.1, -0.4, 0.7, 0.2];
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((pcc(&y, &y).unwrap().value - 1.0).abs() < 1e-12);
        assert!((pcc(&y, &neg).unwrap().value + 1.0).abs() < 1e-12);
        assert!((pcc(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap().value - 1.0).abs() < 1e-12);
        let flat = pcc(&y, &[0.3; 4]).unwrap();
        assert!(flat.degenerate);
        assert_eq!(flat.value, 0.0);
        assert!(pcc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ccc_examples() {
        let y = [0.1, -0.4, 0.7, 0.2];
        assert!((ccc(&y, &y).unwrap().value - 1.0).abs() < 1e-12);
        assert!((ccc(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap().value - 4.0 / 7.0).abs() < 1e-12);
        let flat = ccc(&y, &[0.5; 4]).unwrap();
        assert!(flat.degenerate);
        assert_eq!(flat.value, 0.0);
    }

    #[test]
    fn correlation_loss_examples() {
        let y = [0.1, -0.4, 0.7];
        assert_eq!(correlation_losses((&y, &y), (&y, &y)).unwrap(), (0.0, 0.0));
        // Zero correlation on both axes: x and x^2 on a symmetric grid.
        let x = [-1.0, 0.0, 1.0];
        let sq = [1.0, 0.0, 1.0];
        let (pl, _) = correlation_losses((&x, &sq), (&x, &sq)).unwrap();
        assert!((pl - 1.0).abs() < 1e-15);
        let (_, cl) = correlation_losses((&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]), (&y, &y)).unwrap();
        assert!((cl - 3.0 / 14.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_report() {
        let y = ndarray::array![[0.1, -0.5, 0.3], [0.2, 0.4, -0.6]];
        let r = evaluate(&y, &y).unwrap();
        assert_eq!(r.rmse_v, 0.0);
        assert_eq!(r.sagr_a, 1.0);
        assert!((r.ccc_mean() - 1.0).abs() < 1e-12);
        assert_eq!(r.n, 3);
    }
}
