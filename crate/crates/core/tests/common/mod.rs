//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use gama::geometry::{KnnGraph, PointSet, TangentFrame};
use gama::losses::LossWeights;
use gama::model::{Activation, NetParams, NetSpec};
use gama::objective::{Objective, ObjectiveBatch};
use gama::geometry::GeodesicMetric;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    gaussian_matrix(rng, d, 1).column(0).into_owned()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PointSet {
    let m = gaussian_matrix(rng, d, n);
    PointSet::new(m.as_slice().to_vec(), d).unwrap()
}

/// A random frame: `m` Gaussian directions in `R^d`, orthonormalized.
pub fn random_frame(rng: &mut ChaCha8Rng, d: usize, m: usize) -> TangentFrame {
    let base = gaussian_vector(rng, d);
    TangentFrame::from_basis(base, gaussian_matrix(rng, d, m)).unwrap()
}

/// Projector onto the column span of `a` by least squares: `A (AᵀA)⁻¹ Aᵀ v`.
pub fn least_squares_projection(a: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let ata = a.transpose() * a;
    let coef = ata.cholesky().expect("full column rank").solve(&(a.transpose() * v));
    a * coef
}

/// Projector matrix `Q Qᵀ` from a Householder QR of `a`.
pub fn qr_projector(a: &DMatrix<f64>) -> DMatrix<f64> {
    let q = a.clone().qr().q();
    &q * q.transpose()
}

/// For each point, its `k` nearest others as `(index, distance)`, found by
/// sorting the full distance row; ties go to the lower index.
pub fn brute_force_knn(points: &PointSet, k: usize) -> Vec<Vec<(usize, f64)>> {
    (0..points.len())
        .map(|i| {
            let mut row: Vec<(usize, f64)> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| (j, dist(points.row(i), points.row(j))))
                .collect();
            row.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            row.truncate(k);
            row.sort_by_key(|e| e.0);
            row
        })
        .collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// All-pairs shortest paths over the directed adjacency of `graph`.
pub fn floyd_warshall(graph: &KnnGraph) -> Vec<Vec<f64>> {
    let n = graph.node_count();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
        for e in graph.neighbors(i) {
            row[e.to] = row[e.to].min(e.weight);
        }
    }
    for m in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][m] + d[m][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

pub fn rotation(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    gaussian_matrix(rng, d, d).qr().q()
}

/// A small tanh or relu classifier with random widths.
pub fn random_net(rng: &mut ChaCha8Rng) -> (NetSpec, NetParams) {
    let input = rng.random_range(2..5);
    let h1 = rng.random_range(3..7);
    let h2 = rng.random_range(2..5);
    let classes = rng.random_range(2..5);
    let act = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
    let spec = NetSpec::classifier(input, &[h1, h2], classes, act).unwrap();
    let mut params = NetParams::init(&spec, rng.random());
    // nonzero biases keep relu pre-activations off the kink at exactly zero
    for layer in &mut params.layers {
        layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
    }
    (spec, params)
}

/// Central differences of `f` with respect to every parameter.
pub fn finite_difference(params: &NetParams, h: f64, mut f: impl FnMut(&NetParams) -> f64) -> Vec<f64> {
    let mut work = params.clone();
    let mut out = Vec::new();
    let sizes: Vec<usize> = work.blocks().map(|b| b.len()).collect();
    for (bi, len) in sizes.into_iter().enumerate() {
        for k in 0..len {
            let orig = work.blocks_mut().nth(bi).unwrap()[k];
            work.blocks_mut().nth(bi).unwrap()[k] = orig + h;
            let up = f(&work);
            work.blocks_mut().nth(bi).unwrap()[k] = orig - h;
            let down = f(&work);
            work.blocks_mut().nth(bi).unwrap()[k] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

pub fn flatten(p: &NetParams) -> Vec<f64> {
    p.blocks().flat_map(|b| b.iter().copied()).collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Owned inputs for an [`ObjectiveBatch`].
pub struct BatchData {
    pub source: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub source_on: DMatrix<f64>,
    pub source_off: DMatrix<f64>,
    pub target: DMatrix<f64>,
}

impl BatchData {
    pub fn random(rng: &mut ChaCha8Rng, spec: &NetSpec, n: usize, nt: usize) -> Self {
        let d = spec.input_dim();
        let source = gaussian_matrix(rng, d, n);
        let source_on = &source + gaussian_matrix(rng, d, n) * 0.3;
        let source_off = &source + gaussian_matrix(rng, d, n) * 0.3;
        let labels = (0..n).map(|_| rng.random_range(0..spec.classes())).collect();
        let target = gaussian_matrix(rng, d, nt) * 1.5;
        Self {
            source,
            labels,
            source_on,
            source_off,
            target,
        }
    }

    pub fn batch(&self, with_target: bool) -> ObjectiveBatch<'_> {
        ObjectiveBatch {
            source: &self.source,
            labels: &self.labels,
            source_on: &self.source_on,
            source_off: &self.source_off,
            target: with_target.then_some(&self.target),
        }
    }
}

pub fn objective(weights: LossWeights, k: usize, metric: GeodesicMetric) -> Objective {
    Objective {
        weights,
        geodesic_k: k,
        metric,
    }
}
