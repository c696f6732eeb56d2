//! Local manifold geometry: k-NN graphs, PCA tangent frames and graph geodesics.
//!
//! Everything here is a pure function over immutable inputs. Per-node work
//! (neighbor search, shortest-path trees) is spread over the rayon pool, and
//! the output is assembled in node order so parallel and sequential results
//! are bit-identical.

mod geodesic;
mod knn;
mod tangent;

pub use geodesic::{
    cross_geodesic, geodesic_distances, shortest_path_tree, CrossDistances, CrossGeodesicOptions,
    GeodesicIndex, GeodesicMetric, PathTree,
};
pub use knn::{build_knn_graph, Edge, KnnGraph};
pub use tangent::{estimate_all_tangents, estimate_tangent, project_tangent, TangentDim, TangentFrame};

use crate::error::{GamaError, Result};

/// Default neighbor count for graph construction.
pub const DEFAULT_K: usize = 10;

/// Row-major matrix of `n` points in `d` dimensions, each carrying a stable id.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    n: usize,
    d: usize,
    data: Vec<f64>,
    ids: Vec<usize>,
}

impl PointSet {
    /// Builds a point set from row-major data; ids are `0..n`.
    pub fn new(data: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(GamaError::param("point dimension must be at least 1"));
        }
        if data.is_empty() || !data.len().is_multiple_of(d) {
            return Err(GamaError::param(format!(
                "point buffer of length {} is not a nonempty multiple of d = {d}",
                data.len()
            )));
        }
        let n = data.len() / d;
        Self::with_ids(data, d, (0..n).collect())
    }

    pub fn with_ids(data: Vec<f64>, d: usize, ids: Vec<usize>) -> Result<Self> {
        if d == 0 || data.is_empty() || !data.len().is_multiple_of(d) {
            return Err(GamaError::param("point buffer shape is inconsistent"));
        }
        let n = data.len() / d;
        if ids.len() != n {
            return Err(GamaError::param(format!(
                "{} ids supplied for {n} points",
                ids.len()
            )));
        }
        let mut seen = ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(GamaError::param("point ids must be unique"));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(GamaError::Data(format!(
                "non-finite coordinate at point {} (dimension {})",
                pos / d,
                pos % d
            )));
        }
        Ok(Self { n, d, data, ids })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(GamaError::param("rows have differing lengths"));
        }
        Self::new(rows.concat(), d)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Stacks `self` on top of `other`; ids of `other` are shifted past the largest id here.
    pub fn concat(&self, other: &PointSet) -> Result<PointSet> {
        if self.d != other.d {
            return Err(GamaError::param(format!(
                "dimension mismatch: {} vs {}",
                self.d, other.d
            )));
        }
        let offset = self.ids.iter().max().map_or(0, |m| m + 1);
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        let mut ids = self.ids.clone();
        ids.extend(other.ids.iter().map(|i| i + offset));
        Ok(PointSet {
            n: self.n + other.n,
            d: self.d,
            data,
            ids,
        })
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
