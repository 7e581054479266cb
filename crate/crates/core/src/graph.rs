//! Oriented graphs and their incidence operators.
//!
//! A [`Graph`] stores node count and an ordered edge list of `(head, tail)`
//! pairs. Its incidence matrix `E` has `+1` at the head and `-1` at the tail
//! of each edge column, so `E^T y` yields per-edge differences
//! `y_head - y_tail` and `E mu` accumulates edge flows into node injections.
//! The same type backs both the physical coupling graph and the communication
//! graph.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Undirected connected graph with a fixed edge orientation.
///
/// Orientation only fixes sign conventions; it never changes closed-loop
/// behavior for odd-symmetric edge feedback. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

/// Serde-facing form; `Graph::new` revalidates on deserialization.
#[derive(Serialize, Deserialize)]
struct RawGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<RawGraph> for Graph {
    type Error = Error;
    fn try_from(raw: RawGraph) -> Result<Self> {
        Graph::new(raw.n, raw.edges)
    }
}

impl From<Graph> for RawGraph {
    fn from(g: Graph) -> Self {
        RawGraph {
            n: g.n,
            edges: g.edges,
        }
    }
}

impl Graph {
    /// Builds a graph, rejecting self-loops and out-of-range node indices.
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("node count must be positive".into()));
        }
        for (idx, &(h, t)) in edges.iter().enumerate() {
            if h == t {
                return Err(Error::InvalidGraph(format!(
                    "edge {idx} is a self-loop at node {h}"
                )));
            }
            if h >= n || t >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge {idx} = ({h}, {t}) references a node outside 0..{n}"
                )));
            }
        }
        Ok(Graph { n, edges })
    }

    /// Path graph `0 - 1 - ... - n-1`.
    pub fn line(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGraph("line graph needs n >= 2".into()));
        }
        Graph::new(n, (0..n - 1).map(|i| (i, i + 1)).collect())
    }

    /// Cycle graph on `n >= 3` nodes.
    pub fn ring(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidGraph("ring graph needs n >= 3".into()));
        }
        Graph::new(n, (0..n).map(|i| (i, (i + 1) % n)).collect())
    }

    /// Complete graph on `n >= 2` nodes.
    pub fn complete(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGraph("complete graph needs n >= 2".into()));
        }
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push((i, j));
            }
        }
        Graph::new(n, edges)
    }

    /// Random regular graph of the given degree, deterministic under `seed`.
    ///
    /// Uses the pairing model and retries until the sample is simple and
    /// connected; gives up after 100 attempts.
    pub fn random_regular(n: usize, degree: usize, seed: u64) -> Result<Self> {
        if degree == 0 || degree >= n {
            return Err(Error::GraphGenerationFailed(format!(
                "degree {degree} infeasible for {n} nodes"
            )));
        }
        if n * degree % 2 != 0 {
            return Err(Error::GraphGenerationFailed(format!(
                "n * degree = {} is odd",
                n * degree
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        'attempt: for _ in 0..100 {
            let mut stubs: Vec<usize> = (0..n).flat_map(|i| core::iter::repeat(i).take(degree)).collect();
            stubs.shuffle(&mut rng);
            let mut seen = vec![false; n * n];
            let mut edges = Vec::with_capacity(n * degree / 2);
            for pair in stubs.chunks(2) {
                let (a, b) = (pair[0], pair[1]);
                if a == b || seen[a * n + b] {
                    continue 'attempt;
                }
                seen[a * n + b] = true;
                seen[b * n + a] = true;
                edges.push((a, b));
            }
            let g = Graph::new(n, edges)?;
            if g.is_connected() {
                return Ok(g);
            }
        }
        Err(Error::GraphGenerationFailed(format!(
            "no connected {degree}-regular graph on {n} nodes after 100 attempts"
        )))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Edge count `m`.
    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Dense incidence matrix `E` in row-major `n x m` layout.
    pub fn incidence(&self) -> Vec<f64> {
        let (n, m) = (self.n, self.m());
        let mut e = vec![0.0; n * m];
        for (l, &(h, t)) in self.edges.iter().enumerate() {
            e[h * m + l] = 1.0;
            e[t * m + l] = -1.0;
        }
        e
    }

    /// True iff every node is reachable from node 0 over undirected edges.
    pub fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.n];
        for &(h, t) in &self.edges {
            adj[h].push(t);
            adj[t].push(h);
        }
        let mut visited = vec![false; self.n];
        let mut queue = vec![0usize];
        visited[0] = true;
        let mut count = 1;
        while let Some(node) = queue.pop() {
            for &next in &adj[node] {
                if !visited[next] {
                    visited[next] = true;
                    count += 1;
                    queue.push(next);
                }
            }
        }
        count == self.n
    }

    /// `E v`: accumulates per-edge values into node injections.
    pub fn apply_incidence(&self, edge_vals: &[f64]) -> Result<Vec<f64>> {
        if edge_vals.len() != self.m() {
            return Err(Error::DimensionMismatch {
                expected: self.m(),
                got: edge_vals.len(),
            });
        }
        Ok(self.apply_incidence_raw(edge_vals))
    }

    /// `E^T y`: per-edge differences `y_head - y_tail`.
    pub fn apply_transpose(&self, node_vals: &[f64]) -> Result<Vec<f64>> {
        if node_vals.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: node_vals.len(),
            });
        }
        Ok(self.apply_transpose_raw(node_vals))
    }

    pub(crate) fn apply_incidence_raw(&self, edge_vals: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.accumulate_incidence(edge_vals, &mut out);
        out
    }

    /// `out += E v` without allocation.
    pub(crate) fn accumulate_incidence(&self, edge_vals: &[f64], out: &mut [f64]) {
        for (l, &(h, t)) in self.edges.iter().enumerate() {
            out[h] += edge_vals[l];
            out[t] -= edge_vals[l];
        }
    }

    pub(crate) fn apply_transpose_raw(&self, node_vals: &[f64]) -> Vec<f64> {
        self.edges
            .iter()
            .map(|&(h, t)| node_vals[h] - node_vals[t])
            .collect()
    }
}
