//! Fairness, energy efficiency and run summaries.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("Jain index needs at least one value")]
    Empty,
    #[error("Jain index needs non-negative finite values, got {0}")]
    InvalidValue(f64),
    #[error("energy must be positive, got {0} J")]
    NonPositiveEnergy(f64),
}

/// Jain's fairness index `(sum x)^2 / (n * sum x^2)`. An all-zero vector is
/// perfectly fair (1).
pub fn jain_index(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(MetricsError::InvalidValue(bad));
    }
    // Scale by the maximum first so squares neither overflow nor underflow.
    let max = values.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(1.0);
    }
    let (sum, sum_sq) = values
        .iter()
        .map(|v| v / max)
        .fold((0.0, 0.0), |(s, q), v| (s + v, q + v * v));
    Ok((sum * sum / (values.len() as f64 * sum_sq)).clamp(1.0 / values.len() as f64, 1.0))
}

pub fn energy_efficiency(bits: f64, joules: f64) -> Result<f64, MetricsError> {
    if !(joules > 0.0) {
        return Err(MetricsError::NonPositiveEnergy(joules));
    }
    Ok(bits / joules)
}

/// Order-independent hash of `key = value` pairs (hex SHA-256 prefix).
pub fn config_hash<'a, I>(pairs: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut sorted: Vec<(&str, &str)> = pairs.into_iter().collect();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for (k, v) in sorted {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    /// Files holding the per-slot or per-episode series of this run.
    pub series: Vec<String>,
}

impl RunSummary {
    pub fn new(experiment: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            experiment: experiment.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            metrics: BTreeMap::new(),
            series: Vec::new(),
        }
    }

    pub fn with_metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["experiment", "config_hash", "seed"];
        cols.extend(self.metrics.keys().map(String::as_str));
        cols.push("series");
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.experiment.clone(),
            self.config_hash.clone(),
            self.seed.to_string(),
        ];
        cols.extend(self.metrics.values().map(f64::to_string));
        cols.push(self.series.join(";"));
        cols.join(",")
    }
}
