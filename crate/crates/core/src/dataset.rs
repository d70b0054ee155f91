use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::matching::group_indices;

/// Column-major sample table: one key, one input column and one label column
/// per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub keys: Vec<String>,
    /// `p x n`
    pub inputs: Array2<f64>,
    /// `2 x n`, rows are (valence, arousal)
    pub labels: Array2<f64>,
}

impl Dataset {
    pub fn new(keys: Vec<String>, inputs: Array2<f64>, labels: Array2<f64>) -> Result<Self> {
        let n = keys.len();
        if inputs.ncols() != n || labels.ncols() != n || labels.nrows() != 2 {
            return Err(Error::Dimension(format!(
                "{n} keys, inputs {:?}, labels {:?}",
                inputs.dim(),
                labels.dim()
            )));
        }
        if inputs.iter().chain(labels.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("dataset".into()));
        }
        Ok(Self { keys, inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.nrows()
    }

    /// Sample positions per key, keys sorted.
    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        group_indices(&self.keys)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            keys: idx.iter().map(|&i| self.keys[i].clone()).collect(),
            inputs: self.inputs.select(Axis(1), idx),
            labels: self.labels.select(Axis(1), idx),
        }
    }
}
