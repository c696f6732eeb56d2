use rayon::prelude::*;

use super::{euclidean, PointSet};
use crate::error::{GamaError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub to: usize,
    pub weight: f64,
}

/// Neighbor graph over the rows of a [`PointSet`], weighted by Euclidean distance.
///
/// Adjacency lists are sorted by target node index.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    k: usize,
    adjacency: Vec<Vec<Edge>>,
    symmetric: bool,
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, node: usize) -> &[Edge] {
        &self.adjacency[node]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    /// Builds a graph from explicit adjacency lists (e.g. hand-made test graphs).
    pub fn from_adjacency(k: usize, mut adjacency: Vec<Vec<Edge>>, symmetric: bool) -> Result<Self> {
        let n = adjacency.len();
        for list in &mut adjacency {
            if list.iter().any(|e| e.to >= n || !(e.weight >= 0.0) || !e.weight.is_finite()) {
                return Err(GamaError::param("edge target out of range or weight invalid"));
            }
            list.sort_by_key(|e| e.to);
        }
        Ok(Self {
            k,
            adjacency,
            symmetric,
        })
    }
}

/// Exact k-nearest-neighbor graph by brute force.
///
/// Each node gets exactly `k` outgoing edges; equal distances are resolved in
/// favour of the lower point id. With `symmetrize`, every edge `i -> j` gains its
/// reverse `j -> i`.
pub fn build_knn_graph(points: &PointSet, k: usize, symmetrize: bool) -> Result<KnnGraph> {
    let n = points.len();
    if k == 0 {
        return Err(GamaError::param("k must be positive"));
    }
    if k >= n {
        return Err(GamaError::param(format!("k = {k} must be below n = {n}")));
    }
    let ids = points.ids();

    let mut adjacency: Vec<Vec<Edge>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let base = points.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (euclidean(base, points.row(j)), j))
                .collect();
            let order = |a: &(f64, usize), b: &(f64, usize)| {
                a.0.total_cmp(&b.0).then(ids[a.1].cmp(&ids[b.1]))
            };
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, order);
                cand.truncate(k);
            }
            cand.sort_by(order);
            let mut edges: Vec<Edge> = cand
                .into_iter()
                .map(|(weight, to)| Edge { to, weight })
                .collect();
            edges.sort_by_key(|e| e.to);
            edges
        })
        .collect();

    if symmetrize {
        let mut reverse: Vec<Vec<Edge>> = vec![Vec::new(); n];
        for (i, list) in adjacency.iter().enumerate() {
            for e in list {
                reverse[e.to].push(Edge {
                    to: i,
                    weight: e.weight,
                });
            }
        }
        for (list, extra) in adjacency.iter_mut().zip(reverse) {
            let own = list.len();
            for e in extra {
                if list[..own].binary_search_by_key(&e.to, |x| x.to).is_err() {
                    list.push(e);
                }
            }
            list.sort_by_key(|e| e.to);
        }
    }

    Ok(KnnGraph {
        k,
        adjacency,
        symmetric: symmetrize,
    })
}
