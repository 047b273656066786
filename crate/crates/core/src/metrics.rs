//! Retrieval and classification metrics.
//!
//! AP is non-interpolated and normalized by the number of relevant gallery
//! items, so relevant items missing from a truncated ranking cost precision.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numeric::Matrix;
use crate::retrieval::{classify, RetrievalIndex};

/// Matches among the first `min(k, len)` results, divided by `k`.
pub fn precision_at_k(result_labels: &[usize], query_label: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let hits = result_labels.iter().take(k).filter(|&&y| y == query_label).count();
    Ok(hits as f64 / k as f64)
}

/// `(1/R) Σ_{i relevant} P@i`
pub fn average_precision(result_labels: &[usize], query_label: usize, total_relevant: usize) -> Result<f64> {
    if total_relevant == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &y) in result_labels.iter().enumerate() {
        if y == query_label {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / total_relevant as f64)
}

pub fn mean_ap(per_query_aps: &[f64]) -> Result<f64> {
    if per_query_aps.is_empty() {
        return Err(Error::invalid("mean AP of zero queries"));
    }
    Ok(per_query_aps.iter().sum::<f64>() / per_query_aps.len() as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::dims(labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of zero examples"));
    }
    let hits = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Brute,
    TwoStage,
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brute" => Ok(SearchMode::Brute),
            "two-stage" | "two_stage" => Ok(SearchMode::TwoStage),
            other => Err(Error::invalid(format!("unknown search mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub precision_at: Vec<(usize, f64)>,
    pub accuracy: Option<f64>,
    pub query_count: usize,
    pub mean_comparisons_per_query: f64,
    pub wall_time_ms: f64,
    pub skipped_queries: usize,
}

impl EvalReport {
    pub fn precision(&self, k: usize) -> Option<f64> {
        self.precision_at.iter().find(|&&(kk, _)| kk == k).map(|&(_, v)| v)
    }

    /// Flat JSON object: `map`, `p_at_<k>`, `accuracy`, `query_count`,
    /// `mean_comparisons`, `wall_time_ms`, `skipped_queries`.
    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("map".into(), Value::from(self.map));
        for &(k, v) in &self.precision_at {
            obj.insert(format!("p_at_{k}"), Value::from(v));
        }
        obj.insert("accuracy".into(), self.accuracy.map_or(Value::Null, Value::from));
        obj.insert("query_count".into(), Value::from(self.query_count));
        obj.insert("mean_comparisons".into(), Value::from(self.mean_comparisons_per_query));
        obj.insert("wall_time_ms".into(), Value::from(self.wall_time_ms));
        obj.insert("skipped_queries".into(), Value::from(self.skipped_queries));
        Value::Object(obj)
    }
}

struct QueryScore {
    ap: f64,
    precisions: Vec<f64>,
}

/// Scores every query against the index.
///
/// Brute mode ranks the full gallery. Two-stage mode ranks only the selected
/// bucket; gallery items outside it are never retrieved. Queries whose class
/// has no gallery items are skipped and counted. The index comparison counter
/// is reset before and after.
pub fn evaluate(
    index: &RetrievalIndex,
    queries: &Matrix,
    query_labels: &[usize],
    ks: &[usize],
    mode: SearchMode,
    exec: Exec,
) -> Result<EvalReport> {
    if queries.rows() != query_labels.len() {
        return Err(Error::dims(queries.rows(), query_labels.len()));
    }
    if queries.rows() == 0 {
        return Err(Error::invalid("no queries"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("ks must be nonempty and >= 1"));
    }
    if queries.cols() != index.anchors().dim() {
        return Err(Error::dims(index.anchors().dim(), queries.cols()));
    }

    let mut relevant = vec![0usize; index.anchors().num_classes()];
    for &y in index.labels() {
        if y >= relevant.len() {
            relevant.resize(y + 1, 0);
        }
        relevant[y] += 1;
    }

    index.reset_and_read_counter();
    let started = Instant::now();
    let full = index.len().max(1);
    let scores = exec.map_indexed(queries.rows(), |i| -> Result<Option<QueryScore>> {
        let y = query_labels[i];
        let r = relevant.get(y).copied().unwrap_or(0);
        if r == 0 {
            return Ok(None);
        }
        let q = queries.row(i);
        let ranked = match mode {
            SearchMode::Brute => index.brute_force_query(q, full)?,
            SearchMode::TwoStage => index.two_stage_query(q, full)?,
        };
        let labels: Vec<usize> = ranked.entries.iter().map(|&(id, _)| index.labels()[id]).collect();
        Ok(Some(QueryScore {
            ap: average_precision(&labels, y, r)?,
            precisions: ks.iter().map(|&k| precision_at_k(&labels, y, k)).collect::<Result<_>>()?,
        }))
    });
    let wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
    let comparisons = index.reset_and_read_counter();

    let mut aps = Vec::with_capacity(scores.len());
    let mut p_sums = vec![0.0; ks.len()];
    let mut skipped = 0;
    for s in scores {
        match s? {
            Some(s) => {
                aps.push(s.ap);
                for (acc, p) in p_sums.iter_mut().zip(&s.precisions) {
                    *acc += p;
                }
            }
            None => skipped += 1,
        }
    }
    if aps.is_empty() {
        return Err(Error::invalid("no query class is present in the gallery"));
    }
    let evaluated = aps.len() as f64;

    let predictions = exec.map_indexed(queries.rows(), |i| classify(index.anchors(), queries.row(i)));
    let predictions = predictions.into_iter().collect::<Result<Vec<_>>>()?;

    Ok(EvalReport {
        map: mean_ap(&aps)?,
        precision_at: ks.iter().zip(&p_sums).map(|(&k, &s)| (k, s / evaluated)).collect(),
        accuracy: Some(accuracy(&predictions, query_labels)?),
        query_count: aps.len(),
        mean_comparisons_per_query: comparisons as f64 / evaluated,
        wall_time_ms,
        skipped_queries: skipped,
    })
}
