//! Sextet sampling on the mutual k-NN graph.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::AffinityGraph;
use crate::rng::Prng;

pub const MAX_TRIES: usize = 100;
const REJECTION_TRIES: usize = 32;

/// Two anchored neighbor pairs `(i, j)`, `(k, l)` and a negative for each
/// anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sextet {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub l: usize,
    pub u: usize,
    pub v: usize,
}

impl Sextet {
    pub fn nodes(&self) -> [usize; 6] {
        [self.i, self.j, self.k, self.l, self.u, self.v]
    }

    pub fn map(&self, f: impl Fn(usize) -> usize) -> Sextet {
        Sextet {
            i: f(self.i),
            j: f(self.j),
            k: f(self.k),
            l: f(self.l),
            u: f(self.u),
            v: f(self.v),
        }
    }
}

/// Sampler with the list of nodes eligible as anchors (degree ≥ 1).
#[derive(Debug, Clone)]
pub struct SextetSampler<'g> {
    graph: &'g AffinityGraph,
    eligible: Vec<usize>,
}

impl<'g> SextetSampler<'g> {
    pub fn new(graph: &'g AffinityGraph) -> Result<Self> {
        if graph.n() < 6 {
            return Err(Error::Sampling(format!(
                "graph has {} nodes, a sextet needs 6",
                graph.n()
            )));
        }
        let eligible: Vec<usize> = (0..graph.n()).filter(|&i| !graph.neighbors(i).is_empty()).collect();
        if eligible.len() < 2 {
            return Err(Error::Sampling("fewer than two nodes have neighbors".into()));
        }
        Ok(SextetSampler { graph, eligible })
    }

    pub fn eligible(&self) -> &[usize] {
        &self.eligible
    }

    pub fn sample(&self, rng: &mut Prng) -> Result<Sextet> {
        let g = self.graph;
        for _ in 0..MAX_TRIES {
            let i = self.eligible[rng.random_range(0..self.eligible.len())];
            let k = self.eligible[rng.random_range(0..self.eligible.len())];
            let ni = g.neighbors(i);
            let nk = g.neighbors(k);
            let j = ni[rng.random_range(0..ni.len())];
            let l = nk[rng.random_range(0..nk.len())];
            if i == k || i == l || j == k || j == l {
                continue;
            }
            let mut closure: Vec<usize> = [i, j, k, l].to_vec();
            for &x in &[i, j, k, l] {
                closure.extend_from_slice(g.neighbors(x));
            }
            closure.sort_unstable();
            closure.dedup();
            let Some(u) = draw_outside(g.n(), &closure, rng) else {
                continue;
            };
            let pos = closure.binary_search(&u).unwrap_err();
            closure.insert(pos, u);
            let Some(v) = draw_outside(g.n(), &closure, rng) else {
                continue;
            };
            return Ok(Sextet { i, j, k, l, u, v });
        }
        Err(Error::Sampling(format!(
            "no valid sextet after {MAX_TRIES} tries"
        )))
    }

    /// Up to `count` sextets; failed draws are skipped. Errors only when
    /// nothing could be drawn.
    pub fn sample_batch(&self, count: usize, rng: &mut Prng) -> Result<Vec<Sextet>> {
        let mut out = Vec::with_capacity(count);
        let mut last_err = None;
        for _ in 0..count {
            match self.sample(rng) {
                Ok(s) => out.push(s),
                Err(e) => last_err = Some(e),
            }
        }
        match (out.is_empty(), last_err) {
            (true, Some(e)) => Err(e),
            (true, None) => Err(Error::param("batch size must be at least 1")),
            _ => Ok(out),
        }
    }
}

pub fn sample_sextet(graph: &AffinityGraph, rng: &mut Prng) -> Result<Sextet> {
    SextetSampler::new(graph)?.sample(rng)
}

/// Uniform draw from `0..n` minus the sorted set `excluded`.
fn draw_outside(n: usize, excluded: &[usize], rng: &mut Prng) -> Option<usize> {
    let free = n - excluded.len();
    if free == 0 {
        return None;
    }
    for _ in 0..REJECTION_TRIES {
        let x = rng.random_range(0..n);
        if excluded.binary_search(&x).is_err() {
            return Some(x);
        }
    }
    // r-th node not in the excluded set
    let mut r = rng.random_range(0..free);
    let mut prev = 0;
    for &e in excluded {
        let gap = e - prev;
        if r < gap {
            return Some(prev + r);
        }
        r -= gap;
        prev = e + 1;
    }
    Some(prev + r)
}
