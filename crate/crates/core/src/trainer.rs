//! The training loop: per mini-batch, estimate local geometry on the source
//! batch, split input gradients into on-/off-manifold parts, build perturbed
//! copies, evaluate every loss term, and take one optimizer step.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{columns, labels, DatasetBundle, Sample};
use crate::error::{GamaError, Result};
use crate::geometry::{
    build_knn_graph, estimate_all_tangents, GeodesicMetric, PointSet, TangentDim, TangentFrame, DEFAULT_K,
};
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::{
    autoencoder_residual, input_gradients, predict, Activation, Autoencoder, AutoencoderTraining, Checkpoint,
    NetParams, NetSpec,
};
use crate::objective::{Objective, ObjectiveBatch};
use crate::optim::{Optimizer, OptimizerKind};
use crate::perturb::{decompose, decompose_along_residual, make_perturbed, PerturbConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldRefresh {
    /// Rebuild the k-NN graph and tangent frames on every source batch.
    #[default]
    PerBatch,
    /// Frames over the whole source training set, computed once and reused.
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldEstimator {
    #[default]
    Pca,
    Autoencoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// No target labels; model selection on source validation accuracy.
    #[default]
    Uda,
    /// Labeled target shots join the supervised set; selection on target test accuracy.
    Fsda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Index into the layer widths; `None` picks the last hidden layer.
    pub embedding_layer: Option<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            activation: Activation::Tanh,
            embedding_layer: None,
        }
    }
}

impl NetworkConfig {
    pub fn spec(&self, input: usize, classes: usize) -> Result<NetSpec> {
        let mut spec = NetSpec::classifier(input, &self.hidden, classes, self.activation)?;
        if let Some(e) = self.embedding_layer {
            spec.embedding_layer = e;
            spec.validate()?;
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size_source: usize,
    pub batch_size_target: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub protocol: Protocol,
    pub manifold_refresh: ManifoldRefresh,
    pub manifold_estimator: ManifoldEstimator,
    pub autoencoder: AutoencoderTraining,
    /// Neighbors for tangent estimation and for the alignment graph.
    pub k: usize,
    pub tangent: TangentDim,
    pub metric: GeodesicMetric,
    pub weights: LossWeights,
    pub perturb: PerturbConfig,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size_source: 64,
            batch_size_target: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            seed: 0,
            protocol: Protocol::Uda,
            manifold_refresh: ManifoldRefresh::PerBatch,
            manifold_estimator: ManifoldEstimator::Pca,
            autoencoder: AutoencoderTraining::default(),
            k: DEFAULT_K,
            tangent: TangentDim::default(),
            metric: GeodesicMetric::Graph,
            weights: LossWeights::default(),
            perturb: PerturbConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size_source == 0 || self.batch_size_target == 0 {
            return Err(GamaError::param("batch sizes must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(GamaError::param("learning rate must be finite and nonnegative"));
        }
        if self.k == 0 {
            return Err(GamaError::param("k must be positive"));
        }
        self.weights.validate()?;
        self.perturb.validate()
    }

    /// Plain supervised training: no auxiliary terms, no perturbation.
    pub fn source_only(mut self) -> Self {
        self.weights.lambda_on = 0.0;
        self.weights.lambda_off = 0.0;
        self.weights.lambda_geom = 0.0;
        self.perturb.alpha = 0.0;
        self.perturb.beta = 0.0;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-mean loss terms over the epoch.
    pub mean: LossBreakdown,
    /// Accuracy (percent) used for checkpoint selection.
    pub selection_accuracy: f64,
    pub skipped_on: usize,
    pub skipped_off: usize,
    /// Mean fraction of neighborhood variance captured by the tangent frames
    /// used this epoch; `None` when no frames were estimated.
    pub mean_explained_variance: Option<f64>,
}

/// Everything the optimizer loop mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub spec: NetSpec,
    pub params: NetParams,
    optimizer: Optimizer,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<LossBreakdown>,
    pub epochs: Vec<EpochRecord>,
    pub best: Option<(usize, f64, NetParams)>,
    rng: ChaCha8Rng,
    target_order: Vec<usize>,
    target_cursor: usize,
    frame_cache: Option<Vec<Option<TangentFrame>>>,
    autoencoder: Option<Autoencoder>,
}

impl TrainState {
    pub fn init(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.network.spec(bundle.dim(), bundle.classes())?;
        let params = NetParams::init(&spec, cfg.seed);
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(7);
        Ok(Self {
            spec,
            params,
            optimizer,
            step: 0,
            epoch: 0,
            history: Vec::new(),
            epochs: Vec::new(),
            best: None,
            rng,
            target_order: Vec::new(),
            target_cursor: 0,
            frame_cache: None,
            autoencoder: None,
        })
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            params: self.params.clone(),
            seed,
        }
    }

    /// Selected parameters (falls back to the current ones before any selection).
    pub fn best_params(&self) -> &NetParams {
        self.best.as_ref().map_or(&self.params, |b| &b.2)
    }

    /// Loss history as CSV with header `step,cls,on,off,geom,total`.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from(LossBreakdown::CSV_HEADER);
        out.push('\n');
        for (i, row) in self.history.iter().enumerate() {
            out.push_str(&row.csv_row(i as u64 + 1));
            out.push('\n');
        }
        out
    }
}

fn labeled_pool(bundle: &DatasetBundle, cfg: &TrainConfig) -> Vec<Sample> {
    let mut pool = bundle.source_train.clone();
    if cfg.protocol == Protocol::Fsda {
        pool.extend(bundle.target_shots.iter().cloned());
    }
    pool
}

fn target_pool(bundle: &DatasetBundle) -> DMatrix<f64> {
    let all: Vec<Sample> = bundle
        .target_shots
        .iter()
        .chain(&bundle.target_train)
        .cloned()
        .collect();
    columns(&all, bundle.dim())
}

fn points_of(x: &DMatrix<f64>) -> Result<PointSet> {
    PointSet::new(x.as_slice().to_vec(), x.nrows())
}

/// Tangent frames for every column of `x`; `None` where the neighborhood is degenerate.
fn frames_for(x: &DMatrix<f64>, cfg: &TrainConfig) -> Result<Vec<Option<TangentFrame>>> {
    let n = x.ncols();
    if n < 2 {
        return Ok(vec![None; n]);
    }
    let pts = points_of(x)?;
    let k = cfg.k.min(n - 1);
    let graph = build_knn_graph(&pts, k, false)?;
    Ok(estimate_all_tangents(&pts, &graph, cfg.tangent)
        .into_iter()
        .map(|r| r.ok())
        .collect())
}

pub fn accuracy(spec: &NetSpec, params: &NetParams, x: &DMatrix<f64>, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(spec, params, x)?;
    let hits = pred.iter().zip(y).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / y.len() as f64)
}

/// Builds `(x_on, x_off)` for a labeled batch and counts skipped components.
fn perturb_batch(
    state: &TrainState,
    cfg: &TrainConfig,
    xb: &DMatrix<f64>,
    yb: &[usize],
    frames: Option<Vec<Option<TangentFrame>>>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, usize, usize)> {
    let n = xb.ncols();
    let mut x_on = xb.clone();
    let mut x_off = xb.clone();
    if cfg.perturb.alpha == 0.0 && cfg.perturb.beta == 0.0 {
        return Ok((x_on, x_off, 0, 0));
    }
    let grads = input_gradients(&state.spec, &state.params, xb, yb)?;
    let (mut skipped_on, mut skipped_off) = (0, 0);
    for i in 0..n {
        let x: DVector<f64> = xb.column(i).into_owned();
        let g: DVector<f64> = grads.column(i).into_owned();
        let split = match cfg.manifold_estimator {
            ManifoldEstimator::Pca => match frames.as_ref().and_then(|f| f[i].as_ref()) {
                Some(frame) => Some(decompose(frame, &g)?),
                None => None,
            },
            ManifoldEstimator::Autoencoder => {
                let ae = state.autoencoder.as_ref().expect("autoencoder fitted before training");
                let r = autoencoder_residual(ae, x.as_slice())?;
                Some(decompose_along_residual(&r, &g, cfg.perturb.zero_norm_tol)?)
            }
        };
        let Some((on, off)) = split else {
            skipped_on += 1;
            skipped_off += 1;
            continue;
        };
        let pair = make_perturbed(&x, on, off, &cfg.perturb);
        skipped_on += usize::from(pair.skipped_on);
        skipped_off += usize::from(pair.skipped_off);
        x_on.set_column(i, &pair.x_on);
        x_off.set_column(i, &pair.x_off);
    }
    Ok((x_on, x_off, skipped_on, skipped_off))
}

fn next_target_batch(state: &mut TrainState, pool: &DMatrix<f64>, size: usize) -> Option<DMatrix<f64>> {
    let n = pool.ncols();
    if n == 0 {
        return None;
    }
    let mut idx = Vec::with_capacity(size.min(n));
    while idx.len() < size.min(n) {
        if state.target_cursor >= state.target_order.len() {
            state.target_order = (0..n).collect();
            state.target_order.shuffle(&mut state.rng);
            state.target_cursor = 0;
        }
        idx.push(state.target_order[state.target_cursor]);
        state.target_cursor += 1;
    }
    Some(pool.select_columns(&idx))
}

/// One pass over the labeled pool, pairing each batch with the next target batch.
///
/// On a non-finite loss or parameter update the parameters are rolled back to
/// the last good step and a [`GamaError::Diverged`] is returned.
pub fn train_epoch(state: &mut TrainState, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<()> {
    let pool = labeled_pool(bundle, cfg);
    let x_all = columns(&pool, bundle.dim());
    let y_all = labels(&pool);
    let targets = target_pool(bundle);
    let objective = Objective {
        weights: cfg.weights,
        geodesic_k: cfg.k,
        metric: cfg.metric,
    };

    if cfg.manifold_estimator == ManifoldEstimator::Autoencoder && state.autoencoder.is_none() {
        let mut ae = Autoencoder::init(bundle.dim(), &cfg.autoencoder, cfg.seed ^ 0xae)?;
        ae.fit(&x_all, &cfg.autoencoder, cfg.seed ^ 0xae)?;
        state.autoencoder = Some(ae);
    }
    let needs_frames = cfg.manifold_estimator == ManifoldEstimator::Pca
        && (cfg.perturb.alpha > 0.0 || cfg.perturb.beta > 0.0);
    if needs_frames && cfg.manifold_refresh == ManifoldRefresh::PerEpoch && state.frame_cache.is_none() {
        // input-space geometry does not change between epochs
        state.frame_cache = Some(frames_for(&x_all, cfg)?);
    }

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut state.rng);
    let mut sum = LossBreakdown::default();
    let mut batches = 0usize;
    let (mut skipped_on, mut skipped_off) = (0, 0);
    let (mut ev_sum, mut ev_count) = (0.0, 0usize);

    for chunk in order.chunks(cfg.batch_size_source) {
        let xb = x_all.select_columns(chunk);
        let yb: Vec<usize> = chunk.iter().map(|&i| y_all[i]).collect();
        let frames = if !needs_frames {
            None
        } else {
            match (&state.frame_cache, cfg.manifold_refresh) {
                (Some(cache), ManifoldRefresh::PerEpoch) => {
                    Some(chunk.iter().map(|&i| cache[i].clone()).collect())
                }
                _ => Some(frames_for(&xb, cfg)?),
            }
        };
        for f in frames.iter().flatten().flatten() {
            ev_sum += f.explained_variance;
            ev_count += 1;
        }
        let (x_on, x_off, s_on, s_off) = perturb_batch(state, cfg, &xb, &yb, frames)?;
        skipped_on += s_on;
        skipped_off += s_off;
        let tb = next_target_batch(state, &targets, cfg.batch_size_target);
        let batch = ObjectiveBatch {
            source: &xb,
            labels: &yb,
            source_on: &x_on,
            source_off: &x_off,
            target: tb.as_ref(),
        };
        let step = state.step + 1;
        let eval = objective
            .evaluate(&state.spec, &state.params, &batch, true)
            .map_err(|e| match e {
                GamaError::Numeric { term, detail } => GamaError::Diverged {
                    step,
                    detail: format!("{term}: {detail}"),
                },
                other => other,
            })?;
        let grad = eval.grad.expect("gradient requested");
        let last_good = state.params.clone();
        state.optimizer.step(&mut state.params, &grad);
        if !state.params.is_finite() {
            state.params = last_good;
            return Err(GamaError::Diverged {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
        state.step = step;
        state.history.push(eval.breakdown);
        let b = eval.breakdown;
        sum.cls += b.cls;
        sum.on += b.on;
        sum.off += b.off;
        sum.geom += b.geom;
        sum.total += b.total;
        batches += 1;
    }

    state.epoch += 1;
    let scale = 1.0 / batches.max(1) as f64;
    let mean = LossBreakdown {
        cls: sum.cls * scale,
        on: sum.on * scale,
        off: sum.off * scale,
        geom: sum.geom * scale,
        total: sum.total * scale,
    };
    let selection_accuracy = selection_score(state, bundle, cfg)?;
    state.epochs.push(EpochRecord {
        epoch: state.epoch,
        mean,
        selection_accuracy,
        skipped_on,
        skipped_off,
        mean_explained_variance: (ev_count > 0).then(|| ev_sum / ev_count as f64),
    });
    let better = state.best.as_ref().is_none_or(|b| selection_accuracy >= b.1);
    if better {
        state.best = Some((state.epoch, selection_accuracy, state.params.clone()));
    }
    Ok(())
}

/// Source-validation accuracy (UDA) or target-test accuracy (FSDA).
fn selection_score(state: &TrainState, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<f64> {
    match cfg.protocol {
        Protocol::Uda => {
            let val = if bundle.source_val.is_empty() {
                &bundle.source_train
            } else {
                &bundle.source_val
            };
            accuracy(&state.spec, &state.params, &columns(val, bundle.dim()), &labels(val))
        }
        Protocol::Fsda => accuracy(
            &state.spec,
            &state.params,
            &bundle.target_test_features(),
            &bundle.target_test_labels(),
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub seed: u64,
    pub epochs_run: usize,
    pub steps: u64,
    /// 0 and `None` when no epoch ran.
    pub best_epoch: usize,
    pub best_selection_accuracy: Option<f64>,
    pub selection: String,
    pub target_label_reads: usize,
    pub wall_time_s: f64,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub state: TrainState,
    /// Parameters chosen by the selection rule.
    pub best: Checkpoint,
    pub report: FitReport,
}

/// Runs `cfg.epochs` epochs and keeps the best checkpoint.
///
/// On divergence the error is returned together with the state holding the
/// last good parameters.
pub fn fit_with_state(bundle: &DatasetBundle, cfg: &TrainConfig) -> std::result::Result<Fit, (GamaError, Option<Box<TrainState>>)> {
    let start = Instant::now();
    let reads_before = bundle.target_label_reads();
    let mut state = TrainState::init(bundle, cfg).map_err(|e| (e, None))?;
    for _ in 0..cfg.epochs {
        if let Err(e) = train_epoch(&mut state, bundle, cfg) {
            return Err((e, Some(Box::new(state))));
        }
    }
    let (best_epoch, best_score) = state.best.as_ref().map_or((0, None), |b| (b.0, Some(b.1)));
    let report = FitReport {
        seed: cfg.seed,
        epochs_run: state.epoch,
        steps: state.step,
        best_epoch,
        best_selection_accuracy: best_score,
        selection: match cfg.protocol {
            Protocol::Uda => "source_val".into(),
            Protocol::Fsda => "target_test".into(),
        },
        target_label_reads: bundle.target_label_reads() - reads_before,
        wall_time_s: start.elapsed().as_secs_f64(),
        epochs: state.epochs.clone(),
    };
    let best = Checkpoint {
        spec: state.spec.clone(),
        params: state.best_params().clone(),
        seed: cfg.seed,
    };
    Ok(Fit { state, best, report })
}

pub fn fit(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<Fit> {
    fit_with_state(bundle, cfg).map_err(|(e, _)| e)
}
