//! Mutual k-NN affinity graphs, symmetric normalization and truncation.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::dataio::{FeatureMatrix, GraphFile};
use crate::error::{Error, Result};
use crate::kernels::{dot, norm, Real, SparseMatrix};

/// Pairwise similarity used for edge weights and neighbor ordering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimilarityMetric {
    /// `1 / (1 + ‖x − y‖₂)`
    InvEuclidean,
    Cosine,
    /// `exp(−‖x − y‖² / (2σ²))`
    GaussianEuclidean { sigma: f64 },
}

impl SimilarityMetric {
    pub fn similarity(&self, a: &[f32], b: &[f32]) -> f64 {
        match *self {
            SimilarityMetric::InvEuclidean => 1.0 / (1.0 + sq_dist(a, b).sqrt()),
            SimilarityMetric::Cosine => crate::kernels::cosine_unchecked(a, b),
            SimilarityMetric::GaussianEuclidean { sigma } => {
                (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp()
            }
        }
    }

    /// Ordering key: smaller means more similar.
    fn key(&self, a: &[f32], b: &[f32], norm_a: f64, norm_b: f64) -> f64 {
        match self {
            SimilarityMetric::Cosine => {
                if norm_a < crate::kernels::NORM_EPS || norm_b < crate::kernels::NORM_EPS {
                    0.0
                } else {
                    -(dot(a, b) / (norm_a * norm_b))
                }
            }
            _ => sq_dist(a, b),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            SimilarityMetric::GaussianEuclidean { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::param(format!("gaussian sigma must be positive, got {sigma}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimilarityMetric::InvEuclidean => write!(f, "inv_euclidean"),
            SimilarityMetric::Cosine => write!(f, "cosine"),
            SimilarityMetric::GaussianEuclidean { sigma } => write!(f, "gaussian_euclidean({sigma})"),
        }
    }
}

impl FromStr for SimilarityMetric {
    type Err = Error;

    /// Accepts `inv_euclidean`, `cosine`, `gaussian_euclidean(σ)` and
    /// `gaussian_euclidean:σ`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let metric = match s {
            "inv_euclidean" => SimilarityMetric::InvEuclidean,
            "cosine" => SimilarityMetric::Cosine,
            _ => {
                let sigma = s
                    .strip_prefix("gaussian_euclidean")
                    .and_then(|rest| {
                        rest.strip_prefix('(')
                            .and_then(|r| r.strip_suffix(')'))
                            .or_else(|| rest.strip_prefix(':'))
                    })
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::param(format!("unknown similarity metric {s:?}")))?;
                SimilarityMetric::GaussianEuclidean { sigma }
            }
        };
        metric.validate()?;
        Ok(metric)
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn by_key_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `count` rows of `x` nearest to `q` (most similar first), excluding
/// row `exclude`. Ties are broken by lower row index.
pub fn nearest(
    x: &FeatureMatrix,
    q: &[f32],
    count: usize,
    metric: SimilarityMetric,
    exclude: Option<usize>,
) -> Vec<usize> {
    let norms: Vec<f64> = if matches!(metric, SimilarityMetric::Cosine) {
        (0..x.n()).map(|j| norm(x.row(j))).collect()
    } else {
        Vec::new()
    };
    nearest_with_norms(x, q, norm(q), &norms, count, metric, exclude)
}

fn nearest_with_norms(
    x: &FeatureMatrix,
    q: &[f32],
    q_norm: f64,
    norms: &[f64],
    count: usize,
    metric: SimilarityMetric,
    exclude: Option<usize>,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = (0..x.n())
        .filter(|&j| Some(j) != exclude)
        .map(|j| {
            let nb = norms.get(j).copied().unwrap_or(0.0);
            (metric.key(q, x.row(j), q_norm, nb), j)
        })
        .collect();
    let count = count.min(keyed.len());
    if count == 0 {
        return Vec::new();
    }
    if count < keyed.len() {
        keyed.select_nth_unstable_by(count - 1, by_key_then_index);
        keyed.truncate(count);
    }
    keyed.sort_unstable_by(by_key_then_index);
    // a fresh vector; collecting in place would keep the n-sized buffer alive
    let mut out = Vec::with_capacity(count);
    out.extend(keyed.iter().map(|&(_, j)| j));
    out
}

/// Directed k-NN lists of every row (self excluded), each sorted by index.
pub fn knn_lists(x: &FeatureMatrix, k: usize, metric: SimilarityMetric) -> Vec<Vec<usize>> {
    let norms: Vec<f64> = if matches!(metric, SimilarityMetric::Cosine) {
        (0..x.n()).map(|j| norm(x.row(j))).collect()
    } else {
        Vec::new()
    };
    (0..x.n())
        .into_par_iter()
        .map(|i| {
            let qn = norms.get(i).copied().unwrap_or(0.0);
            let mut nn = nearest_with_norms(x, x.row(i), qn, &norms, k, metric, Some(i));
            nn.sort_unstable();
            nn
        })
        .collect()
}

/// Mutual k-NN affinity `A`, its normalization `S = D^{-1/2} A D^{-1/2}`
/// and the degree vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    a: SparseMatrix<f32>,
    s: SparseMatrix<f32>,
    degree: Vec<f64>,
    k: usize,
    metric: SimilarityMetric,
    node_ids: Vec<String>,
}

impl AffinityGraph {
    /// Wraps a symmetric, nonnegative, zero-diagonal affinity matrix.
    pub fn from_affinity(
        a: SparseMatrix<f32>,
        k: usize,
        metric: SimilarityMetric,
        node_ids: Vec<String>,
    ) -> Result<Self> {
        if node_ids.len() != a.rows() {
            return Err(Error::shape(format!(
                "{} node ids for {} graph rows",
                node_ids.len(),
                a.rows()
            )));
        }
        if (0..a.rows()).any(|i| a.get(i, i) != 0.0) {
            return Err(Error::Validation("affinity matrix has a nonzero diagonal".into()));
        }
        let (s, degree) = normalize(&a)?;
        Ok(AffinityGraph {
            a,
            s,
            degree,
            k,
            metric,
            node_ids,
        })
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn affinity(&self) -> &SparseMatrix<f32> {
        &self.a
    }

    pub fn transition(&self) -> &SparseMatrix<f32> {
        &self.s
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn metric(&self) -> SimilarityMetric {
        self.metric
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    /// Neighbors of node `i`, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        self.a.row(i).0
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.a.nnz() / 2
    }

    pub fn to_file(&self) -> GraphFile {
        GraphFile::new(self.a.clone(), format!("k={};metric={}", self.k, self.metric))
    }

    /// Rebuilds a graph from a `.csrg` payload; node ids default to row
    /// indices when `node_ids` is `None`.
    pub fn from_file(file: &GraphFile, node_ids: Option<Vec<String>>) -> Result<Self> {
        let k = file
            .meta_value("k")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        let metric = match file.meta_value("metric") {
            Some(m) => m.parse()?,
            None => SimilarityMetric::InvEuclidean,
        };
        let ids = node_ids.unwrap_or_else(|| (0..file.matrix.rows()).map(|i| i.to_string()).collect());
        Self::from_affinity(file.matrix.clone(), k, metric, ids)
    }
}

/// `S = D^{-1/2} A D^{-1/2}` with `D^{-1/2} := 0` on zero-degree nodes.
pub fn transition_matrix(a: &SparseMatrix<f32>) -> Result<SparseMatrix<f32>> {
    normalize(a).map(|(s, _)| s)
}

fn normalize(a: &SparseMatrix<f32>) -> Result<(SparseMatrix<f32>, Vec<f64>)> {
    if !a.is_symmetric() {
        return Err(Error::Validation("affinity matrix is not symmetric".into()));
    }
    if a.values().iter().any(|&v| v < 0.0) {
        return Err(Error::Validation("affinity matrix has negative entries".into()));
    }
    let degree: Vec<f64> = (0..a.rows())
        .map(|i| a.row(i).1.iter().map(|&v| v as f64).sum())
        .collect();
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut values = Vec::with_capacity(a.nnz());
    for i in 0..a.rows() {
        let (cols, vals) = a.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            values.push(<f32 as Real>::from_f64(v as f64 * inv_sqrt[i] * inv_sqrt[j]));
        }
    }
    let s = SparseMatrix::new(
        a.rows(),
        a.cols(),
        a.indptr().to_vec(),
        a.indices().to_vec(),
        values,
    )?;
    Ok((s, degree))
}

/// Mutual k-NN graph: `a_ij = s(x_i, x_j)` iff each is among the other's
/// `k` nearest neighbors (self excluded, ties by lower index).
pub fn build_mutual_knn(x: &FeatureMatrix, k: usize, metric: SimilarityMetric) -> Result<AffinityGraph> {
    metric.validate()?;
    x.check_finite()?;
    let n = x.n();
    if n <= 1 {
        return AffinityGraph::from_affinity(SparseMatrix::zeros(n, n), k, metric, x.ids().to_vec());
    }
    if k == 0 || k >= n {
        return Err(Error::param(format!("k must satisfy 1 <= k < n, got k={k}, n={n}")));
    }
    let lists = knn_lists(x, k, metric);
    let mut rows: Vec<Vec<(usize, f32)>> = vec![Vec::new(); n];
    for i in 0..n {
        for &j in &lists[i] {
            if j > i && lists[j].binary_search(&i).is_ok() {
                let w = metric.similarity(x.row(i), x.row(j)) as f32;
                rows[i].push((j, w));
                rows[j].push((i, w));
            }
        }
    }
    let a = SparseMatrix::from_row_lists(n, rows)?;
    AffinityGraph::from_affinity(a, k, metric, x.ids().to_vec())
}

/// Restricts the problem to the union of the queries and their `t` nearest
/// database rows, then rebuilds the mutual k-NN graph on that subset.
/// Returns the subgraph and the map from subgraph rows to rows of `x`.
pub fn truncate_union(
    x: &FeatureMatrix,
    queries: &[usize],
    t: usize,
    k: usize,
    metric: SimilarityMetric,
) -> Result<(AffinityGraph, Vec<usize>)> {
    if queries.is_empty() {
        return Err(Error::param("empty query set"));
    }
    if t > x.n() {
        return Err(Error::param(format!("t={t} exceeds n={}", x.n())));
    }
    if let Some(&q) = queries.iter().find(|&&q| q >= x.n()) {
        return Err(Error::param(format!("query index {q} out of range")));
    }
    let mut nodes: Vec<usize> = queries.to_vec();
    for &q in queries {
        nodes.extend(nearest(x, x.row(q), t, metric, Some(q)));
    }
    nodes.sort_unstable();
    nodes.dedup();
    let sub = x.select(&nodes);
    let graph = build_mutual_knn(&sub, k, metric)?;
    Ok((graph, nodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::DenseMatrix;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeSet;

    fn points(rows: &[[f32; 2]]) -> FeatureMatrix {
        let data = DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        FeatureMatrix::with_index_ids(data, None).unwrap()
    }

    fn random_points(seed: u64, n: usize, d: usize) -> FeatureMatrix {
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(0.0f32..1.0)).collect();
        FeatureMatrix::with_index_ids(DenseMatrix::from_vec(n, d, data).unwrap(), None).unwrap()
    }

    /// O(n²) oracle: full sort of every row's distances.
    fn brute_mutual(x: &FeatureMatrix, k: usize) -> DenseMatrix<f32> {
        let n = x.n();
        let mut nn = vec![BTreeSet::new(); n];
        for i in 0..n {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(x.row(i), x.row(j)), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            nn[i] = all.iter().take(k).map(|p| p.1).collect();
        }
        let mut a = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if nn[i].contains(&j) && nn[j].contains(&i) {
                    let d = sq_dist(x.row(i), x.row(j)).sqrt();
                    a.set(i, j, (1.0 / (1.0 + d)) as f32);
                }
            }
        }
        a
    }

    fn spectral_radius(m: &DenseMatrix<f64>) -> f64 {
        // power iteration on M² to avoid sign oscillation
        let n = m.rows();
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let mv: Vec<f64> = (0..n).map(|i| dot(m.row(i), &v)).collect();
            let m2v: Vec<f64> = (0..n).map(|i| dot(m.row(i), &mv)).collect();
            let len = norm(&m2v);
            if len == 0.0 {
                return 0.0;
            }
            lambda = len.sqrt();
            v = m2v.iter().map(|x| x / len).collect();
        }
        lambda
    }

    #[test]
    fn coincident_points() {
        let g = build_mutual_knn(&points(&[[1.0, 2.0], [1.0, 2.0]]), 1, SimilarityMetric::InvEuclidean).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.affinity().get(0, 1), 1.0);
    }

    #[test]
    fn single_node_graph_is_empty() {
        let g = build_mutual_knn(&points(&[[0.0, 0.0]]), 1, SimilarityMetric::InvEuclidean).unwrap();
        assert_eq!(g.affinity().nnz(), 0);
        assert_eq!(g.transition().nnz(), 0);
    }

    #[test]
    fn parameter_errors() {
        let x = random_points(1, 5, 2);
        assert!(matches!(build_mutual_knn(&x, 5, SimilarityMetric::InvEuclidean), Err(Error::Param(_))));
        assert!(matches!(build_mutual_knn(&x, 0, SimilarityMetric::InvEuclidean), Err(Error::Param(_))));
        let bad = points(&[[f32::NAN, 0.0], [0.0, 0.0]]);
        assert!(matches!(build_mutual_knn(&bad, 1, SimilarityMetric::InvEuclidean), Err(Error::Data(_))));
    }

    #[test]
    fn matches_exhaustive_oracle() {
        for seed in 0..10 {
            let x = random_points(seed, 8, 2);
            let g = build_mutual_knn(&x, 3, SimilarityMetric::InvEuclidean).unwrap();
            assert_eq!(g.affinity().to_dense(), brute_mutual(&x, 3), "seed {seed}");
        }
    }

    #[test]
    fn mutuality_holds_at_moderate_scale() {
        let x = random_points(4, 200, 3);
        let k = 7;
        let g = build_mutual_knn(&x, k, SimilarityMetric::InvEuclidean).unwrap();
        let lists = knn_lists(&x, k, SimilarityMetric::InvEuclidean);
        for i in 0..200 {
            for &j in g.neighbors(i) {
                assert!(lists[i].contains(&j) && lists[j].contains(&i));
            }
            assert!(g.neighbors(i).len() <= k);
        }
        assert!(g.affinity().is_symmetric());
    }

    #[test]
    fn ties_resolved_by_lower_index() {
        // 1, 2 and 3 are all at distance 1 from node 0
        let x = points(&[[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]);
        let lists = knn_lists(&x, 2, SimilarityMetric::InvEuclidean);
        assert_eq!(lists[0], vec![1, 2]);
    }

    #[test]
    fn transition_examples() {
        let a = SparseMatrix::from_dense(&DenseMatrix::from_rows(&[vec![0.0f32, 1.0], vec![1.0, 0.0]]).unwrap());
        assert_eq!(transition_matrix(&a).unwrap(), a);

        let a = SparseMatrix::from_dense(
            &DenseMatrix::from_rows(&[vec![0.0f32, 2.0, 0.0], vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap(),
        );
        let s = transition_matrix(&a).unwrap();
        assert_eq!(s.row(2).0.len(), 0);
        assert_eq!(s.get(0, 1), 1.0);

        let asym = SparseMatrix::from_dense(&DenseMatrix::from_rows(&[vec![0.0f32, 1.0], vec![0.0, 0.0]]).unwrap());
        assert!(matches!(transition_matrix(&asym), Err(Error::Validation(_))));
    }

    #[test]
    fn transition_matches_dense_formula_and_radius() {
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(21);
        for _ in 0..5 {
            let mut d = DenseMatrix::<f32>::zeros(4, 4);
            for i in 0..4 {
                for j in (i + 1)..4 {
                    if rng.random_bool(0.7) {
                        let v = rng.random_range(0.1f32..2.0);
                        d.set(i, j, v);
                        d.set(j, i, v);
                    }
                }
            }
            let s = transition_matrix(&SparseMatrix::from_dense(&d)).unwrap();
            let deg: Vec<f64> = (0..4).map(|i| d.row(i).iter().map(|&v| v as f64).sum()).collect();
            let mut want = DenseMatrix::<f64>::zeros(4, 4);
            for i in 0..4 {
                for j in 0..4 {
                    if deg[i] > 0.0 && deg[j] > 0.0 {
                        want.set(i, j, d.get(i, j) as f64 / (deg[i] * deg[j]).sqrt());
                    }
                }
            }
            let got = s.to_dense().cast::<f64>();
            assert!(got.max_abs_diff(&want) < 1e-6);
            assert!(s.is_symmetric());
            assert!(spectral_radius(&got) <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn truncation_no_op_and_counting() {
        let x = random_points(8, 100, 2);
        let (g, map) = truncate_union(&x, &[0], 5, 2, SimilarityMetric::InvEuclidean).unwrap();
        assert_eq!(map.len(), 6);
        assert_eq!(g.n(), 6);
        assert!(map.contains(&0));

        let small = random_points(9, 30, 2);
        let (full, map) = truncate_union(&small, &[3], 30, 4, SimilarityMetric::InvEuclidean).unwrap();
        assert_eq!(map, (0..30).collect::<Vec<_>>());
        assert_eq!(full.affinity(), build_mutual_knn(&small, 4, SimilarityMetric::InvEuclidean).unwrap().affinity());

        assert!(matches!(truncate_union(&x, &[], 5, 2, SimilarityMetric::InvEuclidean), Err(Error::Param(_))));
    }

    #[test]
    fn truncation_union_of_overlapping_sets() {
        let x = random_points(10, 100, 2);
        // two nearby queries share neighbors
        let q0 = 0;
        let q1 = nearest(&x, x.row(0), 1, SimilarityMetric::InvEuclidean, Some(0))[0];
        let t = 10;
        let (_, map) = truncate_union(&x, &[q0, q1], t, 3, SimilarityMetric::InvEuclidean).unwrap();

        let mut oracle = BTreeSet::from([q0, q1]);
        for &q in &[q0, q1] {
            let mut all: Vec<(f64, usize)> = (0..100)
                .filter(|&j| j != q)
                .map(|j| (sq_dist(x.row(q), x.row(j)), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            oracle.extend(all.iter().take(t).map(|p| p.1));
        }
        assert!(oracle.len() < 2 * (t + 1));
        assert_eq!(map, oracle.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn metric_parsing_round_trip() {
        for m in [
            SimilarityMetric::InvEuclidean,
            SimilarityMetric::Cosine,
            SimilarityMetric::GaussianEuclidean { sigma: 0.5 },
        ] {
            assert_eq!(m.to_string().parse::<SimilarityMetric>().unwrap(), m);
        }
        assert!("gaussian_euclidean(0)".parse::<SimilarityMetric>().is_err());
        assert!("manhattan".parse::<SimilarityMetric>().is_err());
        let v = SimilarityMetric::InvEuclidean.similarity(&[0.0, 0.0], &[3.0, 4.0]);
        assert!((v - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_construction() {
        let x = random_points(12, 60, 3);
        for metric in [SimilarityMetric::Cosine, SimilarityMetric::GaussianEuclidean { sigma: 0.3 }] {
            let a = build_mutual_knn(&x, 5, metric).unwrap();
            let b = build_mutual_knn(&x, 5, metric).unwrap();
            assert_eq!(a, b);
        }
    }
}
