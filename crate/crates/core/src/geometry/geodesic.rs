use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_knn_graph, euclidean, KnnGraph, PointSet};
use crate::error::{GamaError, Result};

/// Which notion of distance backs `d_g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeodesicMetric {
    /// Shortest paths on a symmetrized Euclidean k-NN graph.
    #[default]
    Graph,
    /// `-log` of a Gaussian kernel with median-heuristic bandwidth, i.e. `‖a-b‖² / 2σ²`.
    Kernel,
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest-path tree.
#[derive(Debug, Clone)]
pub struct PathTree {
    pub source: usize,
    /// `f64::INFINITY` for unreachable nodes.
    pub dist: Vec<f64>,
    pub pred: Vec<Option<usize>>,
    /// Nodes in the order they were settled; parents always precede children.
    pub order: Vec<usize>,
}

/// Dijkstra from `source` over the directed edges of `graph`.
pub fn shortest_path_tree(graph: &KnnGraph, source: usize) -> PathTree {
    let n = graph.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![None; n];
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapEntry {
        dist: 0.0,
        node: source,
    });
    while let Some(HeapEntry { dist: du, node: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        order.push(u);
        for e in graph.neighbors(u) {
            let cand = du + e.weight;
            if cand < dist[e.to] {
                dist[e.to] = cand;
                pred[e.to] = Some(u);
                heap.push(HeapEntry {
                    dist: cand,
                    node: e.to,
                });
            }
        }
    }
    PathTree {
        source,
        dist,
        pred,
        order,
    }
}

/// All-pairs graph geodesics with a finite surrogate for unreachable pairs.
#[derive(Debug, Clone)]
pub struct GeodesicIndex {
    n: usize,
    dist: Vec<f64>,
    disconnected_penalty: Option<f64>,
    unreachable_pairs: usize,
}

impl GeodesicIndex {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.dist[i * self.n..(i + 1) * self.n]
    }

    /// `Some(penalty)` when at least one pair was unreachable.
    pub fn disconnected_penalty(&self) -> Option<f64> {
        self.disconnected_penalty
    }

    pub fn unreachable_pairs(&self) -> usize {
        self.unreachable_pairs
    }
}

/// Shortest-path lengths between every pair of nodes (Dijkstra from each node).
///
/// Unreachable pairs are set to twice the largest finite distance in the matrix.
pub fn geodesic_distances(points: &PointSet, graph: &KnnGraph) -> Result<GeodesicIndex> {
    let n = graph.node_count();
    if n == 0 || graph.edge_count() == 0 {
        return Err(GamaError::param("geodesic distances need a nonempty graph"));
    }
    if n != points.len() {
        return Err(GamaError::param("graph was not built over this point set"));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| shortest_path_tree(graph, s).dist)
        .collect();
    let mut dist = rows.concat();
    let (penalty, unreachable_pairs) = fill_unreachable(&mut dist);
    Ok(GeodesicIndex {
        n,
        dist,
        disconnected_penalty: penalty,
        unreachable_pairs,
    })
}

fn fill_unreachable(values: &mut [f64]) -> (Option<f64>, usize) {
    let unreachable = values.iter().filter(|v| !v.is_finite()).count();
    if unreachable == 0 {
        return (None, 0);
    }
    let max_finite = values
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |a, &b| a.max(b));
    let penalty = 2.0 * max_finite;
    for v in values.iter_mut().filter(|v| !v.is_finite()) {
        *v = penalty;
    }
    (Some(penalty), unreachable)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossGeodesicOptions {
    pub k: usize,
    pub metric: GeodesicMetric,
    /// Keep the shortest-path trees so the distances can be differentiated.
    pub keep_paths: bool,
}

impl Default for CrossGeodesicOptions {
    fn default() -> Self {
        Self {
            k: super::DEFAULT_K,
            metric: GeodesicMetric::Graph,
            keep_paths: false,
        }
    }
}

#[derive(Debug, Clone)]
enum Provenance {
    Graph {
        joint: PointSet,
        trees: Option<Vec<PathTree>>,
    },
    Kernel {
        sigma: f64,
    },
}

/// Source-to-target distance matrix (`|S| x |T|`) plus what is needed to differentiate it.
#[derive(Debug, Clone)]
pub struct CrossDistances {
    pub dist: DMatrix<f64>,
    pub disconnected_penalty: Option<f64>,
    pub unreachable_pairs: usize,
    provenance: Provenance,
}

/// Distances from every source point to every target point.
///
/// With the graph metric a single symmetric k-NN graph is built over the union
/// (sources first, then targets) and shortest paths are taken from each source.
/// The effective `k` is capped at `|S| + |T| - 1`.
pub fn cross_geodesic(
    source: &PointSet,
    target: &PointSet,
    opts: &CrossGeodesicOptions,
) -> Result<CrossDistances> {
    if source.dim() != target.dim() {
        return Err(GamaError::param(format!(
            "embedding dimension mismatch: {} vs {}",
            source.dim(),
            target.dim()
        )));
    }
    let ns = source.len();
    let nt = target.len();
    match opts.metric {
        GeodesicMetric::Graph => {
            let joint = source.concat(target)?;
            let k = opts.k.min(joint.len() - 1).max(1);
            let graph = build_knn_graph(&joint, k, true)?;
            let trees: Vec<PathTree> = (0..ns)
                .into_par_iter()
                .map(|s| shortest_path_tree(&graph, s))
                .collect();
            let mut flat = Vec::with_capacity(ns * nt);
            for tree in &trees {
                flat.extend_from_slice(&tree.dist[ns..]);
            }
            let unreachable = flat.iter().filter(|v| !v.is_finite()).count();
            let penalty = if unreachable > 0 {
                let max_finite = flat
                    .iter()
                    .filter(|v| v.is_finite())
                    .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let base = if max_finite.is_finite() {
                    max_finite
                } else {
                    // no source reaches any target: bound by the farthest straight-line pair
                    source
                        .rows()
                        .flat_map(|a| target.rows().map(move |b| euclidean(a, b)))
                        .fold(0.0f64, f64::max)
                };
                let p = 2.0 * base;
                for v in flat.iter_mut().filter(|v| !v.is_finite()) {
                    *v = p;
                }
                Some(p)
            } else {
                None
            };
            Ok(CrossDistances {
                dist: DMatrix::from_row_slice(ns, nt, &flat),
                disconnected_penalty: penalty,
                unreachable_pairs: unreachable,
                provenance: Provenance::Graph {
                    joint,
                    trees: opts.keep_paths.then_some(trees),
                },
            })
        }
        GeodesicMetric::Kernel => {
            let joint = source.concat(target)?;
            let sigma = median_pairwise_distance(&joint);
            let denom = 2.0 * sigma * sigma;
            let dist = DMatrix::from_fn(ns, nt, |i, j| {
                let e = euclidean(source.row(i), target.row(j));
                if denom > 0.0 {
                    e * e / denom
                } else {
                    0.0
                }
            });
            Ok(CrossDistances {
                dist,
                disconnected_penalty: None,
                unreachable_pairs: 0,
                provenance: Provenance::Kernel { sigma },
            })
        }
    }
}

fn median_pairwise_distance(points: &PointSet) -> f64 {
    let n = points.len();
    let mut all = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            all.push(euclidean(points.row(i), points.row(j)));
        }
    }
    if all.is_empty() {
        return 0.0;
    }
    let mid = all.len() / 2;
    let (_, m, _) = all.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

impl CrossDistances {
    pub fn kernel_bandwidth(&self) -> Option<f64> {
        match self.provenance {
            Provenance::Kernel { sigma } => Some(sigma),
            Provenance::Graph { .. } => None,
        }
    }

    /// Pulls `∂L/∂dist` back onto the source and target embeddings.
    ///
    /// Graph distances are differentiated with the shortest paths held fixed:
    /// each path length is a sum of Euclidean edge lengths, so every edge on a
    /// used path receives the accumulated weight of the pairs routed through it.
    /// Penalized (unreachable) pairs and the kernel bandwidth are constants.
    /// Returns row-major `(|S| x e, |T| x e)` gradients.
    pub fn backprop(
        &self,
        source: &PointSet,
        target: &PointSet,
        grad: &DMatrix<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let ns = source.len();
        let nt = target.len();
        let e = source.dim();
        if grad.shape() != (ns, nt) || self.dist.shape() != (ns, nt) {
            return Err(GamaError::param("gradient shape does not match distance matrix"));
        }
        let mut gs = vec![0.0; ns * e];
        let mut gt = vec![0.0; nt * e];
        match &self.provenance {
            Provenance::Kernel { sigma } => {
                if *sigma > 0.0 {
                    let inv = 1.0 / (sigma * sigma);
                    for i in 0..ns {
                        for j in 0..nt {
                            let w = grad[(i, j)] * inv;
                            if w == 0.0 {
                                continue;
                            }
                            let (a, b) = (source.row(i), target.row(j));
                            for c in 0..e {
                                let diff = w * (a[c] - b[c]);
                                gs[i * e + c] += diff;
                                gt[j * e + c] -= diff;
                            }
                        }
                    }
                }
            }
            Provenance::Graph { joint, trees } => {
                let trees = trees.as_ref().ok_or_else(|| {
                    GamaError::param("cross distances were computed without keep_paths")
                })?;
                let n = joint.len();
                let mut joint_grad = vec![0.0; n * e];
                let mut acc = vec![0.0; n];
                for (s, tree) in trees.iter().enumerate() {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for t in 0..nt {
                        if tree.dist[ns + t].is_finite() {
                            acc[ns + t] += grad[(s, t)];
                        }
                    }
                    for &v in tree.order.iter().rev() {
                        let Some(p) = tree.pred[v] else { continue };
                        let w = acc[v];
                        if w == 0.0 {
                            continue;
                        }
                        acc[p] += w;
                        let (xv, xp) = (joint.row(v), joint.row(p));
                        let len = euclidean(xv, xp);
                        if len > 0.0 {
                            for c in 0..e {
                                let g = w * (xv[c] - xp[c]) / len;
                                joint_grad[v * e + c] += g;
                                joint_grad[p * e + c] -= g;
                            }
                        }
                    }
                }
                gs.copy_from_slice(&joint_grad[..ns * e]);
                gt.copy_from_slice(&joint_grad[ns * e..]);
            }
        }
        Ok((gs, gt))
    }
}
