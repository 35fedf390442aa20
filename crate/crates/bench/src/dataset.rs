//! Tidy and summary tables of experiment results.
//!
//! Tidy rows are long format: one measure per (parameter value, replicate,
//! episode, metric).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{csv_error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub experiment: String,
    pub parameter: String,
    pub value: String,
    pub replicate: usize,
    pub episode: usize,
    pub seed: u64,
    pub metric: String,
    pub measure: f64,
    pub manifest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub parameter: String,
    pub value: String,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    /// Range of the per-replicate means.
    pub replicate_mean_min: f64,
    pub replicate_mean_max: f64,
    pub manifest: String,
}

/// Groups by (value, metric) in order of first appearance.
pub fn summarize(rows: &[TidyRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in rows {
        let key = (r.value.as_str(), r.metric.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(value, metric)| {
            let group: Vec<&TidyRow> = rows.iter().filter(|r| r.value == value && r.metric == metric).collect();
            let measures: Vec<f64> = group.iter().map(|r| r.measure).collect();
            let mut replicates: Vec<usize> = group.iter().map(|r| r.replicate).collect();
            replicates.sort_unstable();
            replicates.dedup();
            let rep_means: Vec<f64> = replicates
                .iter()
                .map(|&k| {
                    let m: Vec<f64> = group.iter().filter(|r| r.replicate == k).map(|r| r.measure).collect();
                    mean(&m)
                })
                .collect();
            let first = group[0];
            SummaryRow {
                experiment: first.experiment.clone(),
                parameter: first.parameter.clone(),
                value: value.to_string(),
                metric: metric.to_string(),
                count: measures.len(),
                mean: mean(&measures),
                max: measures.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                min: measures.iter().cloned().fold(f64::INFINITY, f64::min),
                replicate_mean_min: rep_means.iter().cloned().fold(f64::INFINITY, f64::min),
                replicate_mean_max: rep_means.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                manifest: first.manifest.clone(),
            }
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| csv_error(path)(e.into()))
}

pub fn read_csv<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_error(path))
}
