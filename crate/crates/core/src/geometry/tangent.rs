use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{KnnGraph, PointSet};
use crate::error::{GamaError, Result};

/// How many principal directions make up the tangent space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TangentDim {
    /// Exactly `m` directions; the neighborhood must have rank at least `m`.
    Fixed(usize),
    /// Smallest `m` whose retained variance fraction reaches the threshold.
    Variance(f64),
}

impl Default for TangentDim {
    fn default() -> Self {
        TangentDim::Variance(0.9)
    }
}

/// Orthonormal basis of the estimated tangent space at a base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentFrame {
    pub base: DVector<f64>,
    /// `d x m`, orthonormal columns.
    pub basis: DMatrix<f64>,
    pub explained_variance: f64,
}

impl TangentFrame {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn tangent_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// A frame from an arbitrary basis; columns are orthonormalized by QR.
    pub fn from_basis(base: DVector<f64>, basis: DMatrix<f64>) -> Result<Self> {
        if basis.nrows() != base.len() || basis.ncols() == 0 || basis.ncols() > basis.nrows() {
            return Err(GamaError::param("basis shape does not match base point"));
        }
        let q = basis.qr().q();
        Ok(Self {
            base,
            basis: q,
            explained_variance: 1.0,
        })
    }
}

/// PCA tangent frame at `index`, using the node and its out-neighbors in `graph`.
///
/// The neighborhood is centered at its own mean. Columns are sorted by
/// decreasing variance, and each column's first non-negligible component is
/// made positive.
pub fn estimate_tangent(
    points: &PointSet,
    graph: &KnnGraph,
    index: usize,
    dim: TangentDim,
) -> Result<TangentFrame> {
    if graph.node_count() != points.len() {
        return Err(GamaError::param("graph and point set sizes differ"));
    }
    if index >= points.len() {
        return Err(GamaError::param(format!("node {index} out of range")));
    }
    let d = points.dim();
    let members: Vec<usize> = std::iter::once(index)
        .chain(graph.neighbors(index).iter().map(|e| e.to))
        .collect();
    let neighbor_count = members.len() - 1;
    if neighbor_count < 1 {
        return Err(GamaError::Geometry(format!(
            "node {index} has fewer than 2 points in its neighborhood"
        )));
    }

    let rows = members.len();
    let mut local = DMatrix::<f64>::zeros(rows, d);
    for (r, &m) in members.iter().enumerate() {
        for (c, v) in points.row(m).iter().enumerate() {
            local[(r, c)] = *v;
        }
    }
    let mean = local.row_mean();
    for mut row in local.row_iter_mut() {
        row -= &mean;
    }

    let svd = local.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let variances: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    let total: f64 = variances.iter().sum();

    let scale = points.row(index).iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let top = variances.first().copied().unwrap_or(0.0);
    if !(top.sqrt() > 1e-12 * scale) {
        return Err(GamaError::DegenerateNeighborhood {
            node: index,
            reason: "zero total variance".into(),
        });
    }
    let rank = variances
        .iter()
        .take_while(|v| v.sqrt() > 1e-10 * top.sqrt())
        .count();
    let cap = neighbor_count.min(d);

    let m = match dim {
        TangentDim::Fixed(m) => {
            if m == 0 || m > d {
                return Err(GamaError::param(format!("tangent dimension {m} invalid for d = {d}")));
            }
            if m > rank {
                return Err(GamaError::DegenerateNeighborhood {
                    node: index,
                    reason: format!("neighborhood rank {rank} < requested dimension {m}"),
                });
            }
            m
        }
        TangentDim::Variance(threshold) => {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(GamaError::param("variance threshold must lie in (0, 1]"));
            }
            let mut acc = 0.0;
            let mut m = 0;
            for v in &variances {
                acc += v;
                m += 1;
                if acc / total >= threshold - 1e-12 {
                    break;
                }
            }
            m.min(rank).min(cap).max(1)
        }
    };

    let mut basis = DMatrix::<f64>::zeros(d, m);
    for (col, &src) in order.iter().take(m).enumerate() {
        let mut v: DVector<f64> = v_t.row(src).transpose();
        let flip = v
            .iter()
            .find(|c| c.abs() > 1e-12)
            .is_some_and(|c| *c < 0.0);
        if flip {
            v.neg_mut();
        }
        basis.set_column(col, &v);
    }
    let retained: f64 = variances.iter().take(m).sum();

    Ok(TangentFrame {
        base: DVector::from_column_slice(points.row(index)),
        basis,
        explained_variance: (retained / total).clamp(0.0, 1.0),
    })
}

/// Frames for every node; failures are reported per node rather than aborting.
pub fn estimate_all_tangents(
    points: &PointSet,
    graph: &KnnGraph,
    dim: TangentDim,
) -> Vec<Result<TangentFrame>> {
    (0..points.len())
        .into_par_iter()
        .map(|i| estimate_tangent(points, graph, i, dim))
        .collect()
}

/// Orthogonal projection `B Bᵀ v` onto the frame's tangent space.
pub fn project_tangent(frame: &TangentFrame, v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != frame.dim() {
        return Err(GamaError::param(format!(
            "vector of length {} does not match frame dimension {}",
            v.len(),
            frame.dim()
        )));
    }
    let coeffs = frame.basis.tr_mul(v);
    Ok(&frame.basis * coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_knn_graph, Edge};

    fn star(points: &PointSet, center: usize) -> KnnGraph {
        let n = points.len();
        let mut adj = vec![Vec::new(); n];
        adj[center] = (0..n)
            .filter(|&j| j != center)
            .map(|j| Edge {
                to: j,
                weight: super::super::euclidean(points.row(center), points.row(j)),
            })
            .collect();
        KnnGraph::from_adjacency(n - 1, adj, false).unwrap()
    }

    #[test]
    fn exact_line() {
        let pts = PointSet::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let g = star(&pts, 0);
        let f = estimate_tangent(&pts, &g, 0, TangentDim::Fixed(1)).unwrap();
        assert_eq!(f.tangent_dim(), 1);
        assert!((f.basis[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(f.basis[(1, 0)].abs() < 1e-12);
        assert!((f.explained_variance - 1.0).abs() < 1e-12);

        // the variance rule lands on the same single direction
        let f = estimate_tangent(&pts, &g, 0, TangentDim::default()).unwrap();
        assert_eq!(f.tangent_dim(), 1);
    }

    #[test]
    fn circle_tangent_at_one_zero() {
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let t = i as f64 * std::f64::consts::FRAC_PI_4;
                vec![t.cos(), t.sin()]
            })
            .collect();
        let pts = PointSet::from_rows(&rows).unwrap();
        let g = build_knn_graph(&pts, 2, false).unwrap();
        let f = estimate_tangent(&pts, &g, 0, TangentDim::Fixed(1)).unwrap();
        let angle = f.basis[(0, 0)].abs().atan2(f.basis[(1, 0)].abs());
        assert!(angle < 1e-2, "angular error {angle}");
    }

    #[test]
    fn rank_one_neighborhood_rejects_two_dims() {
        let pts = PointSet::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let g = star(&pts, 0);
        let err = estimate_tangent(&pts, &g, 0, TangentDim::Fixed(2)).unwrap_err();
        assert!(matches!(err, GamaError::DegenerateNeighborhood { .. }));
    }

    #[test]
    fn identical_neighbors_are_degenerate() {
        let pts = PointSet::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let g = star(&pts, 0);
        let err = estimate_tangent(&pts, &g, 0, TangentDim::default()).unwrap_err();
        assert!(matches!(err, GamaError::DegenerateNeighborhood { .. }));
    }

    #[test]
    fn isolated_node_is_geometry_error() {
        let pts = PointSet::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let g = KnnGraph::from_adjacency(1, vec![vec![], vec![]], false).unwrap();
        assert!(matches!(
            estimate_tangent(&pts, &g, 0, TangentDim::Fixed(1)),
            Err(GamaError::Geometry(_))
        ));
    }

    #[test]
    fn axis_projection() {
        let f = TangentFrame::from_basis(
            DVector::zeros(2),
            DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        let p = project_tangent(&f, &DVector::from_vec(vec![3.0, 4.0])).unwrap();
        assert!((p[0] - 3.0).abs() < 1e-15 && p[1].abs() < 1e-15);
        assert!(project_tangent(&f, &DVector::zeros(3)).is_err());
    }
}
