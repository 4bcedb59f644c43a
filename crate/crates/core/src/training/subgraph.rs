//! Breadth-first mini-batch subgraphs.

use std::collections::HashSet;

use rand::seq::index;

use crate::graph::AffinityGraph;
use crate::kernels::SparseMatrix;
use crate::rng::Prng;

/// Node set (sorted global indices) with `S` and `A` restricted to it.
#[derive(Debug, Clone)]
pub struct Subgraph {
    pub nodes: Vec<usize>,
    pub s: SparseMatrix<f32>,
    pub a: SparseMatrix<f32>,
}

impl Subgraph {
    /// Local row of a global node.
    pub fn local(&self, global: usize) -> Option<usize> {
        self.nodes.binary_search(&global).ok()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Expands `seeds` hop by hop. When a hop would push the node count past
/// `node_budget`, a uniform subset of that hop's new nodes is kept and the
/// expansion stops. Seeds are always kept.
///
/// Work is proportional to the visited neighborhood, not to the graph size.
pub fn bfs_subgraph(
    graph: &AffinityGraph,
    seeds: &[usize],
    hops: usize,
    node_budget: Option<usize>,
    rng: &mut Prng,
) -> Subgraph {
    let mut frontier: Vec<usize> = seeds.to_vec();
    frontier.sort_unstable();
    frontier.dedup();
    let mut visited: HashSet<usize> = frontier.iter().copied().collect();
    let mut nodes = frontier.clone();
    let budget = node_budget.unwrap_or(usize::MAX);

    for _ in 0..hops {
        if nodes.len() >= budget {
            break;
        }
        let mut next = Vec::new();
        for &f in &frontier {
            for &nb in graph.neighbors(f) {
                if visited.insert(nb) {
                    next.push(nb);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        let room = budget - nodes.len();
        if next.len() > room {
            let mut keep = index::sample(rng, next.len(), room).into_vec();
            keep.sort_unstable();
            next = keep.into_iter().map(|p| next[p]).collect();
            nodes.extend_from_slice(&next);
            break;
        }
        nodes.extend_from_slice(&next);
        frontier = next;
    }
    nodes.sort_unstable();
    Subgraph {
        s: graph.transition().restrict(&nodes),
        a: graph.affinity().restrict(&nodes),
        nodes,
    }
}
