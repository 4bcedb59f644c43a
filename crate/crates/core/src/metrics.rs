//! Retrieval quality: average precision, mAP, bullseye score and recall@K.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::retrieval::Ranking;

/// Relevant and ignored instances for one query.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub positives: HashSet<String>,
    /// Removed from the ranking before scoring.
    pub junk: HashSet<String>,
}

/// AP in `[0, 1]`: mean over positives of precision at each positive hit,
/// after deleting junk entries from the ranking. Positives never retrieved
/// contribute zero.
pub fn average_precision(ranking: &Ranking, gt: &GroundTruth) -> Result<f64> {
    if gt.positives.is_empty() {
        return Err(Error::Metric(format!("query {:?} has no positives", ranking.query_id)));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut pos = 0usize;
    for id in ranking.ids() {
        if gt.junk.contains(id) {
            continue;
        }
        pos += 1;
        if gt.positives.contains(id) {
            hits += 1;
            sum += hits as f64 / pos as f64;
        }
    }
    Ok(sum / gt.positives.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryScore {
    pub query_id: String,
    pub value: f64,
}

/// Per-query values and their aggregate, both on a 0–100 scale.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    pub per_query: Vec<QueryScore>,
    pub aggregate: f64,
    pub config: BTreeMap<String, String>,
}

/// Unweighted mean of per-query AP, ×100.
pub fn mean_average_precision(rankings: &[Ranking], ground_truth: &HashMap<String, GroundTruth>) -> Result<f64> {
    map_report(rankings, ground_truth).map(|r| r.aggregate)
}

pub fn map_report(rankings: &[Ranking], ground_truth: &HashMap<String, GroundTruth>) -> Result<MetricReport> {
    if rankings.is_empty() {
        return Err(Error::Metric("no rankings to score".into()));
    }
    let mut per_query = Vec::with_capacity(rankings.len());
    for r in rankings {
        let gt = ground_truth
            .get(&r.query_id)
            .ok_or_else(|| Error::Metric(format!("no ground truth for query {:?}", r.query_id)))?;
        per_query.push(QueryScore {
            query_id: r.query_id.clone(),
            value: 100.0 * average_precision(r, gt)?,
        });
    }
    let aggregate = per_query.iter().map(|q| q.value).sum::<f64>() / per_query.len() as f64;
    Ok(MetricReport {
        metric: "map".into(),
        window: None,
        per_query,
        aggregate,
        config: BTreeMap::new(),
    })
}

/// Same-class recall inside a window of `k`, the query counting as its own
/// hit. If the ranking does not list the query, the query occupies the
/// first window slot. Averaged over queries, ×100.
pub fn bullseye(rankings: &[Ranking], labels: &HashMap<String, i64>, k: usize) -> Result<f64> {
    bullseye_report(rankings, labels, k).map(|r| r.aggregate)
}

pub fn bullseye_report(rankings: &[Ranking], labels: &HashMap<String, i64>, k: usize) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::Metric("bullseye window must be at least 1".into()));
    }
    if rankings.is_empty() {
        return Err(Error::Metric("no rankings to score".into()));
    }
    let mut class_size: HashMap<i64, usize> = HashMap::new();
    for &l in labels.values() {
        *class_size.entry(l).or_default() += 1;
    }
    let label_of = |id: &str| {
        labels
            .get(id)
            .copied()
            .ok_or_else(|| Error::Metric(format!("no label for instance {id:?}")))
    };
    let mut per_query = Vec::with_capacity(rankings.len());
    for r in rankings {
        let ql = label_of(&r.query_id)?;
        let lists_query = r.ids().any(|id| id == r.query_id);
        let (mut hits, window) = if lists_query { (0, k) } else { (1, k - 1) };
        for id in r.ids().take(window) {
            if label_of(id)? == ql {
                hits += 1;
            }
        }
        per_query.push(QueryScore {
            query_id: r.query_id.clone(),
            value: 100.0 * hits as f64 / class_size[&ql] as f64,
        });
    }
    let aggregate = per_query.iter().map(|q| q.value).sum::<f64>() / per_query.len() as f64;
    Ok(MetricReport {
        metric: "bullseye".into(),
        window: Some(k),
        per_query,
        aggregate,
        config: BTreeMap::new(),
    })
}

/// Fraction of the top `k` (query excluded) sharing the query's label,
/// relative to the best achievable count `min(k, class_size − 1)`.
pub fn recall_at_k(ranking: &Ranking, labels: &HashMap<String, i64>, k: usize) -> Result<f64> {
    let ql = *labels
        .get(&ranking.query_id)
        .ok_or_else(|| Error::Metric(format!("no label for query {:?}", ranking.query_id)))?;
    let class = labels.values().filter(|&&l| l == ql).count();
    let best = k.min(class.saturating_sub(1));
    if best == 0 {
        return Err(Error::Metric("query class has no other members".into()));
    }
    let hits = ranking
        .ids()
        .filter(|&id| id != ranking.query_id)
        .take(k)
        .filter(|id| labels.get(*id) == Some(&ql))
        .count();
    Ok(hits as f64 / best as f64)
}
