//! Cosine ranking over learned features and query feature expansion for
//! unseen queries.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dataio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::graph::{nearest, SimilarityMetric};
use crate::kernels::{cosine_unchecked, DenseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    /// Row in the searched matrix.
    pub index: usize,
    pub id: String,
    pub score: f64,
}

/// Retrieval result for one query, best match first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

impl Ranking {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.id.as_str())
    }

    /// Replaces positional ids with names from `ids`.
    pub fn with_ids(mut self, ids: &[String]) -> Self {
        for h in &mut self.hits {
            h.id = ids[h.index].clone();
        }
        self
    }

    /// Drops the entry at row `index`, if present.
    pub fn excluding(mut self, index: usize) -> Self {
        self.hits.retain(|h| h.index != index);
        self
    }

    pub fn truncate(mut self, k: usize) -> Self {
        self.hits.truncate(k);
        self
    }
}

fn sort_scored(scored: &mut [(f64, usize)]) {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
}

/// Top-`topk` rows of `h` by cosine similarity to `query` (ties by lower
/// index). `topk` is clamped to the number of rows.
pub fn retrieve(query: &[f32], h: &DenseMatrix<f32>, topk: usize) -> Result<Ranking> {
    if query.len() != h.cols() {
        return Err(Error::shape(format!(
            "query of length {} against features of width {}",
            query.len(),
            h.cols()
        )));
    }
    let mut scored: Vec<(f64, usize)> = (0..h.rows())
        .map(|i| (cosine_unchecked(query, h.row(i)), i))
        .collect();
    sort_scored(&mut scored);
    scored.truncate(topk.min(h.rows()));
    Ok(Ranking {
        query_id: String::new(),
        hits: scored
            .into_iter()
            .map(|(score, index)| Hit {
                index,
                id: index.to_string(),
                score,
            })
            .collect(),
    })
}

/// `h_q = Σ_{i ∈ N_q} s(q, x_i) h_i` over the `k` nearest database rows of
/// `q` in the original descriptor space.
pub fn qfe(
    q: &[f32],
    x_orig: &FeatureMatrix,
    h: &DenseMatrix<f32>,
    k: usize,
    metric: SimilarityMetric,
) -> Result<Vec<f32>> {
    if x_orig.n() == 0 {
        return Err(Error::param("empty database"));
    }
    if k == 0 {
        return Err(Error::param("qfe needs k >= 1"));
    }
    if q.len() != x_orig.d() {
        return Err(Error::shape(format!(
            "query of length {} against descriptors of width {}",
            q.len(),
            x_orig.d()
        )));
    }
    if h.rows() != x_orig.n() {
        return Err(Error::shape(format!(
            "{} learned rows for {} database rows",
            h.rows(),
            x_orig.n()
        )));
    }
    let weighted: Vec<(usize, f64)> = nearest(x_orig, q, k, metric, None)
        .into_iter()
        .map(|i| (i, metric.similarity(q, x_orig.row(i))))
        .collect();
    Ok(weighted_sum(h, &weighted))
}

fn weighted_sum(h: &DenseMatrix<f32>, terms: &[(usize, f64)]) -> Vec<f32> {
    let mut acc = vec![0.0f64; h.cols()];
    for &(i, w) in terms {
        for (a, &v) in acc.iter_mut().zip(h.row(i)) {
            *a += w * v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Runs [`qfe`], then `rounds − 1` further expansions over the top-`k`
/// rows of the learned-space ranking, weighted by cosine similarity.
pub fn qfe_iterate(
    q: &[f32],
    x_orig: &FeatureMatrix,
    h: &DenseMatrix<f32>,
    k: usize,
    metric: SimilarityMetric,
    rounds: usize,
) -> Result<Vec<f32>> {
    if rounds == 0 {
        return Err(Error::param("qfe needs at least one round"));
    }
    let mut hq = qfe(q, x_orig, h, k, metric)?;
    for _ in 1..rounds {
        let ranking = retrieve(&hq, h, k)?;
        let terms: Vec<(usize, f64)> = ranking.hits.iter().map(|hit| (hit.index, hit.score)).collect();
        hq = weighted_sum(h, &terms);
    }
    Ok(hq)
}

/// Writes `query_id,rank,instance_id,score` rows (rank is 1-based).
pub fn write_rankings_csv(rankings: &[Ranking], mut out: impl Write) -> Result<()> {
    writeln!(out, "query_id,rank,instance_id,score")?;
    for r in rankings {
        for (pos, hit) in r.hits.iter().enumerate() {
            writeln!(out, "{},{},{},{}", r.query_id, pos + 1, hit.id, hit.score)?;
        }
    }
    Ok(())
}

/// One JSON object per ranking: `{"query_id", "results": [{"instance_id", "score"}]}`.
pub fn write_rankings_jsonl(rankings: &[Ranking], mut out: impl Write) -> Result<()> {
    for r in rankings {
        let results: Vec<serde_json::Value> = r
            .hits
            .iter()
            .map(|h| serde_json::json!({ "instance_id": h.id, "score": h.score }))
            .collect();
        let line = serde_json::json!({ "query_id": r.query_id, "results": results });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads the CSV export back. Row indices are not stored, so each hit's
/// `index` is its position in the ranking.
pub fn read_rankings_csv(input: impl BufRead) -> Result<Vec<Ranking>> {
    let mut rankings: Vec<Ranking> = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if lineno == 0 && line.starts_with("query_id") || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!("ranking line {}: expected 4 fields", lineno + 1)));
        }
        let score: f64 = fields[3]
            .parse()
            .map_err(|_| Error::Data(format!("ranking line {}: bad score", lineno + 1)))?;
        let qid = fields[0].to_string();
        if rankings.last().is_none_or(|r| r.query_id != qid) {
            rankings.push(Ranking {
                query_id: qid,
                hits: Vec::new(),
            });
        }
        let r = rankings.last_mut().unwrap();
        r.hits.push(Hit {
            index: r.hits.len(),
            id: fields[2].to_string(),
            score,
        });
    }
    Ok(rankings)
}
