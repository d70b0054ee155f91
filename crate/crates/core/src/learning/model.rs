use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matching::ShiftStats;
use crate::ot::FeatureSet;

/// Affine encoder `z = W^T x + c` from raw inputs (`p`) to features (`d`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `p x d`
    pub weight: Array2<f64>,
    /// `d`
    pub bias: Array1<f64>,
}

/// Affine head `y = gamma^T z + beta` onto the 2-D label space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    /// `d x 2`
    pub gamma: Array2<f64>,
    /// `2`
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub projector: ProjectorParams,
}

impl ModelParams {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, feature_dim: usize, rng: &mut R) -> Self {
        let enc = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("valid std");
        let proj = Normal::new(0.0, 1.0 / (feature_dim as f64).sqrt()).expect("valid std");
        Self {
            encoder: EncoderParams {
                weight: Array2::from_shape_simple_fn((input_dim, feature_dim), || enc.sample(rng)),
                bias: Array1::zeros(feature_dim),
            },
            projector: ProjectorParams {
                gamma: Array2::from_shape_simple_fn((feature_dim, 2), || proj.sample(rng)),
                beta: Array1::zeros(2),
            },
        }
    }

    pub fn zeros(input_dim: usize, feature_dim: usize) -> Self {
        Self {
            encoder: EncoderParams {
                weight: Array2::zeros((input_dim, feature_dim)),
                bias: Array1::zeros(feature_dim),
            },
            projector: ProjectorParams {
                gamma: Array2::zeros((feature_dim, 2)),
                beta: Array1::zeros(2),
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.weight.ncols()
    }

    pub fn encode(&self, inputs: &Array2<f64>) -> Result<FeatureSet> {
        if inputs.nrows() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "encoder expects {} inputs per sample, got {}",
                self.input_dim(),
                inputs.nrows()
            )));
        }
        let mut z = self.encoder.weight.t().dot(inputs);
        for mut col in z.columns_mut() {
            col += &self.encoder.bias;
        }
        Ok(z)
    }

    /// Inference path: encoder followed by the projector, no normalization.
    pub fn predict(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        project(&self.encode(inputs)?, &self.projector)
    }

    /// Number of scalar parameters in the encoder block of [`Self::to_flat`].
    pub fn encoder_len(&self) -> usize {
        self.encoder.weight.len() + self.encoder.bias.len()
    }

    pub fn num_params(&self) -> usize {
        self.encoder_len() + self.projector.gamma.len() + self.projector.beta.len()
    }

    /// Encoder weight, encoder bias, gamma, beta; matrices row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        self.encoder
            .weight
            .iter()
            .chain(self.encoder.bias.iter())
            .chain(self.projector.gamma.iter())
            .chain(self.projector.beta.iter())
            .copied()
            .collect()
    }

    pub fn from_flat(input_dim: usize, feature_dim: usize, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(input_dim, feature_dim);
        if flat.len() != params.num_params() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                params.num_params(),
                flat.len()
            )));
        }
        params.set_flat(flat);
        Ok(params)
    }

    pub(crate) fn set_flat(&mut self, flat: &[f64]) {
        let slots = self
            .encoder
            .weight
            .iter_mut()
            .chain(self.encoder.bias.iter_mut())
            .chain(self.projector.gamma.iter_mut())
            .chain(self.projector.beta.iter_mut());
        for (slot, &x) in slots.zip(flat) {
            *slot = x;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }
}

/// `Z_hat[i, j] = (Z[i, j] - mu_j) / (sigma_j + eps)`.
pub fn normalize(features: &FeatureSet, stats: &ShiftStats, eps: f64) -> Result<FeatureSet> {
    let m = features.ncols();
    if stats.mu.len() != m || stats.sigma.len() != m {
        return Err(Error::Dimension(format!(
            "{m} columns but {} shifts and {} scales",
            stats.mu.len(),
            stats.sigma.len()
        )));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("eps must be positive, got {eps}")));
    }
    if stats.mu.iter().chain(&stats.sigma).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("shift statistics".into()));
    }
    let mut out = features.clone();
    for ((mut col, &mu), &sigma) in out.columns_mut().into_iter().zip(&stats.mu).zip(&stats.sigma) {
        let scale = sigma + eps;
        col.mapv_inplace(|z| (z - mu) / scale);
    }
    Ok(out)
}

/// `gamma^T Z + beta` for every column of `Z`.
pub fn project(features: &FeatureSet, theta: &ProjectorParams) -> Result<Array2<f64>> {
    if features.nrows() != theta.gamma.nrows() || theta.gamma.ncols() != 2 || theta.beta.len() != 2 {
        return Err(Error::Dimension(format!(
            "features have dimension {}, projector is {:?} + {}",
            features.nrows(),
            theta.gamma.dim(),
            theta.beta.len()
        )));
    }
    let mut out = theta.gamma.t().dot(features);
    for mut col in out.columns_mut() {
        col += &theta.beta;
    }
    Ok(out)
}
