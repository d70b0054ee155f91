//! CSV and JSON formats.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! matrix read back from CSV is bit-identical and reruns produce identical
//! bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::learning::{ModelParams, StepRecord};
use crate::matching::MatchResult;

fn reader_builder() -> csv::ReaderBuilder {
    let mut b = csv::ReaderBuilder::new();
    b.has_headers(false).trim(csv::Trim::All).comment(Some(b'#'));
    b
}

fn parse_field(field: &str, line: usize, column: usize) -> Result<f64> {
    let x: f64 = field.parse().map_err(|_| Error::Parse {
        line,
        column,
        message: format!("not a number: {field:?}"),
    })?;
    if !x.is_finite() {
        return Err(Error::Parse {
            line,
            column,
            message: format!("non-finite value {field:?}"),
        });
    }
    Ok(x)
}

fn record_line(record: &csv::StringRecord, fallback: usize) -> usize {
    record.position().map_or(fallback, |p| p.line() as usize)
}

/// Reads a row-major numeric matrix. A first row that does not parse as
/// numbers is taken as a header and skipped.
pub fn read_matrix<R: Read>(input: R) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, record) in reader_builder().flexible(true).from_reader(input).records().enumerate() {
        let record = record?;
        let line = record_line(&record, i + 1);
        if record.iter().all(str::is_empty) {
            continue;
        }
        if rows.is_empty() && width.is_none() && record.iter().all(|f| f.parse::<f64>().is_err()) {
            width = Some(record.len());
            continue;
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(c, f)| parse_field(f, line, c + 1))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    line,
                    column: row.len().min(first.len()) + 1,
                    message: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Empty("matrix file has no data rows".into()));
    }
    let (n, m) = (rows.len(), rows[0].len());
    Ok(Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect()).expect("rectangular rows"))
}

/// Reads a weight vector: one value per line, or a single row.
pub fn read_vector<R: Read>(input: R) -> Result<Vec<f64>> {
    let m = read_matrix(input)?;
    if m.nrows() == 1 || m.ncols() == 1 {
        Ok(m.iter().copied().collect())
    } else {
        Err(Error::Dimension(format!("expected a vector, found a {:?} matrix", m.dim())))
    }
}

pub fn write_matrix<W: Write>(output: W, m: &Array2<f64>, header: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(output);
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for row in m.rows() {
        w.write_record(row.iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_file(path: &Path) -> Result<Array2<f64>> {
    read_matrix(File::open(path)?)
}

pub fn write_matrix_file(path: &Path, m: &Array2<f64>, header: Option<&[String]>) -> Result<()> {
    write_matrix(File::create(path)?, m, header)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(File::open(path)?)?)
}

/// Metadata written next to a plan CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSidecar {
    pub solver: String,
    pub eta: Option<f64>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub iterations_used: Option<usize>,
    pub converged: bool,
    pub transport_cost: f64,
    pub entropy: f64,
    pub objective: Option<f64>,
    pub basis_degenerate: Option<bool>,
    pub row_residual: f64,
    pub col_residual: f64,
}

/// Feature/label table: columns `id, y_v, y_a, f0 ... f{p-1}`.
pub fn read_features<R: Read>(input: R) -> Result<Dataset> {
    let mut keys = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    let mut width: Option<usize> = None;
    for (i, record) in reader_builder().flexible(true).from_reader(input).records().enumerate() {
        let record = record?;
        let line = record_line(&record, i + 1);
        if record.iter().all(str::is_empty) {
            continue;
        }
        if keys.is_empty() && width.is_none() && record.get(1).is_some_and(|f| f.parse::<f64>().is_err()) {
            width = Some(record.len());
            continue;
        }
        if record.len() < 4 {
            return Err(Error::Parse {
                line,
                column: record.len() + 1,
                message: "expected id, y_v, y_a and at least one feature".into(),
            });
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::Parse {
                line,
                column: record.len().min(expected) + 1,
                message: format!("expected {expected} columns, found {}", record.len()),
            });
        }
        keys.push(record[0].to_string());
        labels.push(parse_field(&record[1], line, 2)?);
        labels.push(parse_field(&record[2], line, 3)?);
        for c in 3..record.len() {
            values.push(parse_field(&record[c], line, c + 1)?);
        }
    }
    if keys.is_empty() {
        return Err(Error::Empty("feature file has no samples".into()));
    }
    let n = keys.len();
    let p = values.len() / n;
    let inputs = Array2::from_shape_vec((n, p), values).expect("rows checked").reversed_axes();
    let labels = Array2::from_shape_vec((n, 2), labels).expect("rows checked").reversed_axes();
    Dataset::new(keys, inputs.as_standard_layout().to_owned(), labels.as_standard_layout().to_owned())
}

pub fn write_features<W: Write>(output: W, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(output);
    let mut header = vec!["id".to_string(), "y_v".into(), "y_a".into()];
    header.extend((0..data.input_dim()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (j, key) in data.keys.iter().enumerate() {
        let mut row = vec![key.clone(), data.labels[[0, j]].to_string(), data.labels[[1, j]].to_string()];
        row.extend(data.inputs.column(j).iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features_file(path: &Path) -> Result<Dataset> {
    read_features(File::open(path)?)
}

pub fn write_features_file(path: &Path, data: &Dataset) -> Result<()> {
    write_features(File::create(path)?, data)
}

/// One target's entry in a matching report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub reference_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub weights_a: Vec<f64>,
    pub weights_b: Vec<f64>,
    pub transport_cost: f64,
    pub converged: bool,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub weight_fallback_a: bool,
    pub weight_fallback_b: bool,
    pub score_fallback: bool,
}

impl From<&MatchResult> for TargetReport {
    fn from(m: &MatchResult) -> Self {
        Self {
            reference_indices: m.reference_indices.clone(),
            target_indices: m.target_indices.clone(),
            weights_a: m.weights.weights.a.clone(),
            weights_b: m.weights.weights.b.clone(),
            transport_cost: m.transport_cost,
            converged: m.converged,
            mu: m.stats.mu.clone(),
            sigma: m.stats.sigma.clone(),
            weight_fallback_a: m.weights.fallback_a,
            weight_fallback_b: m.weights.fallback_b,
            score_fallback: m.score_fallback,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub reference_key: String,
    /// Groups left out because they had fewer than `k` samples.
    pub skipped: BTreeMap<String, usize>,
    pub targets: BTreeMap<String, TargetReport>,
    pub total_transport_cost: f64,
}

pub const LOSS_LOG_HEADER: [&str; 8] = [
    "step",
    "main",
    "va",
    "pcc_loss",
    "ccc_loss",
    "total",
    "worst_id_key",
    "worst_id_risk",
];

pub fn write_loss_log<W: Write>(output: W, log: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(output);
    w.write_record(LOSS_LOG_HEADER)?;
    for r in log {
        w.write_record([
            r.step.to_string(),
            r.loss.main.to_string(),
            r.loss.va.to_string(),
            r.loss.pcc_loss.to_string(),
            r.loss.ccc_loss.to_string(),
            r.loss.total.to_string(),
            r.worst_id_key.clone(),
            r.worst_id_risk.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub step: usize,
    pub seed: u64,
}

/// Checkpoint layout: a JSON header on the first line, then CSV rows
/// `block,row,col,value` for `encoder_weight`, `encoder_bias`, `gamma`, `beta`.
pub fn write_checkpoint<W: Write>(mut output: W, header: &CheckpointHeader, params: &ModelParams) -> Result<()> {
    serde_json::to_writer(&mut output, header)?;
    output.write_all(b"\n")?;
    let mut w = csv::Writer::from_writer(output);
    w.write_record(["block", "row", "col", "value"])?;
    let blocks: [(&str, Array2<f64>); 4] = [
        ("encoder_weight", params.encoder.weight.clone()),
        ("encoder_bias", params.encoder.bias.clone().insert_axis(Axis(1))),
        ("gamma", params.projector.gamma.clone()),
        ("beta", params.projector.beta.clone().insert_axis(Axis(1))),
    ];
    for (name, m) in &blocks {
        for ((r, c), x) in m.indexed_iter() {
            w.write_record([name.to_string(), r.to_string(), c.to_string(), x.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(CheckpointHeader, ModelParams)> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let header: CheckpointHeader = serde_json::from_str(first)?;
    let mut params = ModelParams::zeros(header.input_dim, header.feature_dim);
    let mut seen = 0usize;
    let mut rdr = csv::ReaderBuilder::new().from_reader(rest.as_bytes());
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record_line(&record, i + 2) + 1;
        let idx = |c: usize| -> Result<usize> {
            record.get(c).and_then(|f| f.parse().ok()).ok_or_else(|| Error::Parse {
                line,
                column: c + 1,
                message: "expected an index".into(),
            })
        };
        let (r, c) = (idx(1)?, idx(2)?);
        let value = parse_field(record.get(3).unwrap_or(""), line, 4)?;
        let slot = match record.get(0).unwrap_or("") {
            "encoder_weight" => params.encoder.weight.get_mut((r, c)),
            "encoder_bias" if c == 0 => params.encoder.bias.get_mut(r),
            "gamma" => params.projector.gamma.get_mut((r, c)),
            "beta" if c == 0 => params.projector.beta.get_mut(r),
            other => {
                return Err(Error::Parse {
                    line,
                    column: 1,
                    message: format!("unknown block {other:?}"),
                })
            }
        };
        *slot.ok_or_else(|| Error::Parse {
            line,
            column: 2,
            message: format!("index ({r}, {c}) out of range"),
        })? = value;
        seen += 1;
    }
    if seen != params.num_params() {
        return Err(Error::Dimension(format!(
            "checkpoint has {seen} values, model needs {}",
            params.num_params()
        )));
    }
    Ok((header, params))
}

/// Prediction table: columns `y_v, y_a, pred_v, pred_a`.
pub fn write_predictions<W: Write>(output: W, truth: &Array2<f64>, prediction: &Array2<f64>) -> Result<()> {
    if truth.dim() != prediction.dim() || truth.nrows() != 2 {
        return Err(Error::Dimension(format!(
            "labels {:?}, predictions {:?}",
            truth.dim(),
            prediction.dim()
        )));
    }
    let header: Vec<String> = ["y_v", "y_a", "pred_v", "pred_a"].iter().map(|s| s.to_string()).collect();
    let table = ndarray::concatenate(Axis(0), &[truth.view(), prediction.view()]).expect("both 2 x n");
    write_matrix(output, &table.t().to_owned(), Some(&header))
}

/// Returns `(truth, prediction)`, each `2 x n`.
pub fn read_predictions<R: Read>(input: R) -> Result<(Array2<f64>, Array2<f64>)> {
    let table = read_matrix(input)?;
    if table.ncols() != 4 {
        return Err(Error::Parse {
            line: 1,
            column: table.ncols().min(4) + 1,
            message: format!("expected columns y_v, y_a, pred_v, pred_a; found {}", table.ncols()),
        });
    }
    let t = table.t();
    Ok((
        t.slice(ndarray::s![0..2, ..]).to_owned(),
        t.slice(ndarray::s![2..4, ..]).to_owned(),
    ))
}
