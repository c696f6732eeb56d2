//! Evaluation statistics: target accuracy, PGD robust accuracy, GeoAlign.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{GamaError, Result};
use crate::geometry::{cross_geodesic, CrossGeodesicOptions, GeodesicMetric, PointSet, DEFAULT_K};
use crate::losses::hard_alignment;
use crate::model::{forward_batch, predict, NetParams, NetSpec};
use crate::perturb::{pgd_attack_batch, AttackConfig};

/// Per-domain cap on points entering the GeoAlign graph.
pub const GEOALIGN_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeoAlignOptions {
    pub k: usize,
    pub metric: GeodesicMetric,
    pub cap: usize,
    pub seed: u64,
}

impl Default for GeoAlignOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            metric: GeodesicMetric::Graph,
            cap: GEOALIGN_CAP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent of target-test samples classified correctly.
    pub target_accuracy: f64,
    /// Percent correct both before and after the PGD attack.
    pub robust_accuracy: f64,
    pub geoalign: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub epsilon: f64,
    pub attack_steps: usize,
    pub target_test_size: usize,
}

/// Embeddings of the columns of `x`, as a point set.
pub fn embed(spec: &NetSpec, params: &NetParams, x: &DMatrix<f64>) -> Result<PointSet> {
    let cache = forward_batch(spec, params, x)?;
    let e = cache.embeddings();
    PointSet::new(e.as_slice().to_vec(), e.nrows())
}

fn subsample(points: &PointSet, cap: usize, rng: &mut ChaCha8Rng) -> Result<PointSet> {
    if points.len() <= cap {
        return Ok(points.clone());
    }
    let mut idx = sample(rng, points.len(), cap).into_vec();
    idx.sort_unstable();
    let data: Vec<f64> = idx.iter().flat_map(|&i| points.row(i).to_vec()).collect();
    PointSet::new(data, points.dim())
}

/// Mean over all points of both sets of the hard-min geodesic distance to the other set.
pub fn geoalign(source: &PointSet, target: &PointSet, opts: &GeoAlignOptions) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(GamaError::param("GeoAlign needs nonempty embedding sets"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let s = subsample(source, opts.cap, &mut rng)?;
    let t = subsample(target, opts.cap, &mut rng)?;
    let cross = cross_geodesic(
        &s,
        &t,
        &CrossGeodesicOptions {
            k: opts.k,
            metric: opts.metric,
            keep_paths: false,
        },
    )?;
    hard_alignment(&cross.dist)
}

/// Percent correct before and after attack: a sample counts as robust only if
/// its clean prediction is right and the attacked one is too.
pub fn robust_accuracy(
    spec: &NetSpec,
    params: &NetParams,
    x: &DMatrix<f64>,
    y: &[usize],
    atk: &AttackConfig,
) -> Result<f64> {
    if y.is_empty() {
        return Ok(0.0);
    }
    let clean = predict(spec, params, x)?;
    let adv = pgd_attack_batch(spec, params, x, y, atk, None)?;
    let attacked = predict(spec, params, &adv)?;
    let hits = (0..y.len())
        .filter(|&i| clean[i] == y[i] && attacked[i] == y[i])
        .count();
    Ok(100.0 * hits as f64 / y.len() as f64)
}

pub fn per_class_accuracy(pred: &[usize], y: &[usize], classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
            (!idx.is_empty()).then(|| {
                100.0 * idx.iter().filter(|&&i| pred[i] == c).count() as f64 / idx.len() as f64
            })
        })
        .collect()
}

/// Full evaluation of a trained model on a bundle. Reads the target-test labels.
pub fn evaluate(
    spec: &NetSpec,
    params: &NetParams,
    bundle: &DatasetBundle,
    atk: &AttackConfig,
    geo: &GeoAlignOptions,
) -> Result<MetricsReport> {
    if spec.input_dim() != bundle.dim() {
        return Err(GamaError::param(format!(
            "checkpoint expects {} features, dataset has {}",
            spec.input_dim(),
            bundle.dim()
        )));
    }
    if spec.classes() < bundle.classes() {
        return Err(GamaError::param("checkpoint has fewer classes than the dataset"));
    }
    let x = bundle.target_test_features();
    let y = bundle.target_test_labels();
    let pred = predict(spec, params, &x)?;
    let hits = pred.iter().zip(&y).filter(|(a, b)| a == b).count();
    let target_accuracy = 100.0 * hits as f64 / y.len() as f64;
    let robust = robust_accuracy(spec, params, &x, &y, atk)?;
    let source_emb = embed(spec, params, &bundle.all_source_features())?;
    let target_emb = embed(spec, params, &bundle.all_target_features())?;
    Ok(MetricsReport {
        target_accuracy,
        robust_accuracy: robust,
        geoalign: geoalign(&source_emb, &target_emb, geo)?,
        per_class_accuracy: per_class_accuracy(&pred, &y, bundle.classes()),
        epsilon: atk.epsilon,
        attack_steps: atk.steps,
        target_test_size: y.len(),
    })
}
