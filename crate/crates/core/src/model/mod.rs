//! Small feed-forward networks with hand-written reverse-mode gradients.
//!
//! Batches are stored column-wise (`features x samples`). A forward pass keeps
//! every pre-activation so [`backward`] can take upstream gradients at both the
//! logits and the embedding layer, which is all the composite objective needs.

mod autoencoder;
mod checkpoint;

pub use autoencoder::{autoencoder_residual, Autoencoder, AutoencoderTraining};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GamaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

/// Layer widths (input first, classes last), hidden activation, and the
/// layer whose activation is used as the embedding `φ(x)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub embedding_layer: usize,
}

impl NetSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, embedding_layer: usize) -> Result<Self> {
        let spec = Self {
            layer_widths,
            activation,
            embedding_layer,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Hidden layers between `input` and `classes`; embedding is the last hidden layer.
    pub fn classifier(input: usize, hidden: &[usize], classes: usize, activation: Activation) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let embedding_layer = widths.len() - 2;
        Self::new(widths, activation, embedding_layer)
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.layer_widths.len();
        if len < 2 {
            return Err(GamaError::param("a network needs at least input and output widths"));
        }
        if self.layer_widths.contains(&0) {
            return Err(GamaError::param("layer widths must be positive"));
        }
        let penultimate = len - 2;
        let interior = self.embedding_layer > 0 && self.embedding_layer < len - 1;
        if !(interior || self.embedding_layer == penultimate) {
            return Err(GamaError::param(format!(
                "embedding layer {} must be a hidden layer or the penultimate layer",
                self.embedding_layer
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    pub fn embedding_dim(&self) -> usize {
        self.layer_widths[self.embedding_layer]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Weights and biases for every affine layer. Also used as the gradient and
/// optimizer-moment container, since those share the shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layers: Vec<Layer>,
}

impl NetParams {
    pub fn zeros(spec: &NetSpec) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Layer {
                weight: DMatrix::zeros(w[1], w[0]),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        Self { layers }
    }

    /// Glorot-uniform weights `U(-s, s)`, `s = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(spec: &NetSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(spec);
        for layer in &mut params.layers {
            let (fan_out, fan_in) = layer.weight.shape();
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            // fill row-major so the draw order matches the checkpoint layout
            for r in 0..fan_out {
                for c in 0..fan_in {
                    layer.weight[(r, c)] = rng.random_range(-s..s);
                }
            }
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn check_shape(&self, spec: &NetSpec) -> Result<()> {
        if self.layers.len() != spec.num_layers() {
            return Err(GamaError::param(format!(
                "{} parameter layers for a {}-layer spec",
                self.layers.len(),
                spec.num_layers()
            )));
        }
        for (i, (l, w)) in self.layers.iter().zip(spec.layer_widths.windows(2)).enumerate() {
            if l.weight.shape() != (w[1], w[0]) || l.bias.len() != w[1] {
                return Err(GamaError::param(format!("layer {i} has the wrong shape")));
            }
        }
        Ok(())
    }

    /// Parameter blocks in a fixed order: weight 0, bias 0, weight 1, ...
    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn num_params(&self) -> usize {
        self.blocks().map(<[f64]>::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &NetParams, scale: f64) {
        for (a, b) in self.blocks_mut().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.blocks()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Activations recorded by [`forward_batch`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `pre[l]` is the pre-activation of layer `l + 1`.
    pre: Vec<DMatrix<f64>>,
    /// `act[0]` is the input; `act[L]` the logits.
    act: Vec<DMatrix<f64>>,
    embedding_layer: usize,
}

impl ForwardCache {
    pub fn logits(&self) -> &DMatrix<f64> {
        self.act.last().expect("at least one layer")
    }

    pub fn embeddings(&self) -> &DMatrix<f64> {
        &self.act[self.embedding_layer]
    }

    pub fn input(&self) -> &DMatrix<f64> {
        &self.act[0]
    }

    /// Column-wise softmax of the logits.
    pub fn probs(&self) -> DMatrix<f64> {
        let mut p = self.logits().clone();
        for mut col in p.column_iter_mut() {
            let lsm = log_softmax(col.as_slice());
            for (v, l) in col.iter_mut().zip(lsm) {
                *v = l.exp();
            }
        }
        p
    }

    pub fn batch_size(&self) -> usize {
        self.act[0].ncols()
    }
}

/// Runs the network on a `d x n` batch.
pub fn forward_batch(spec: &NetSpec, params: &NetParams, x: &DMatrix<f64>) -> Result<ForwardCache> {
    params.check_shape(spec)?;
    if x.nrows() != spec.input_dim() {
        return Err(GamaError::param(format!(
            "input has {} features, network expects {}",
            x.nrows(),
            spec.input_dim()
        )));
    }
    let last = params.layers.len() - 1;
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut act = Vec::with_capacity(params.layers.len() + 1);
    act.push(x.clone());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = &layer.weight * act.last().expect("nonempty");
        for mut col in z.column_iter_mut() {
            col += &layer.bias;
        }
        let a = if l == last {
            z.clone()
        } else {
            z.map(|v| spec.activation.apply(v))
        };
        pre.push(z);
        act.push(a);
    }
    Ok(ForwardCache {
        pre,
        act,
        embedding_layer: spec.embedding_layer,
    })
}

/// Reverse pass. `dlogits` is `c x n`; `dembedding`, if given, is the upstream
/// gradient at the embedding layer's activation. Returns parameter gradients
/// (summed over the batch) and the input gradient (`d x n`).
pub fn backward(
    spec: &NetSpec,
    params: &NetParams,
    cache: &ForwardCache,
    dlogits: &DMatrix<f64>,
    dembedding: Option<&DMatrix<f64>>,
) -> Result<(NetParams, DMatrix<f64>)> {
    let n = cache.batch_size();
    if dlogits.shape() != (spec.classes(), n) {
        return Err(GamaError::param("logit gradient has the wrong shape"));
    }
    if let Some(de) = dembedding {
        if de.shape() != (spec.embedding_dim(), n) {
            return Err(GamaError::param("embedding gradient has the wrong shape"));
        }
    }
    let num = params.layers.len();
    let mut grads = params.zeros_like();
    // gradient w.r.t. act[num]
    let mut upstream = dlogits.clone();
    for l in (1..=num).rev() {
        if l == spec.embedding_layer {
            if let Some(de) = dembedding {
                upstream += de;
            }
        }
        let delta = if l == num {
            upstream
        } else {
            let z = &cache.pre[l - 1];
            let a = &cache.act[l];
            let mut d = upstream;
            for ((g, zv), av) in d.iter_mut().zip(z.iter()).zip(a.iter()) {
                *g *= spec.activation.derivative(*zv, *av);
            }
            d
        };
        let layer = &params.layers[l - 1];
        grads.layers[l - 1].weight = &delta * cache.act[l - 1].transpose();
        grads.layers[l - 1].bias = delta.column_sum();
        upstream = layer.weight.tr_mul(&delta);
    }
    if spec.embedding_layer == 0 {
        if let Some(de) = dembedding {
            upstream += de;
        }
    }
    Ok((grads, upstream))
}

/// Single-sample network output.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub logits: DVector<f64>,
    pub embedding: DVector<f64>,
    pub probs: DVector<f64>,
}

pub fn forward(spec: &NetSpec, params: &NetParams, x: &[f64]) -> Result<Output> {
    let cache = forward_batch(spec, params, &DMatrix::from_column_slice(x.len(), 1, x))?;
    Ok(Output {
        logits: cache.logits().column(0).into_owned(),
        embedding: cache.embeddings().column(0).into_owned(),
        probs: cache.probs().column(0).into_owned(),
    })
}

/// Numerically stable log-softmax (max logit subtracted first).
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

fn check_label(spec: &NetSpec, y: usize) -> Result<()> {
    if y >= spec.classes() {
        return Err(GamaError::param(format!(
            "label {y} out of range for {} classes",
            spec.classes()
        )));
    }
    Ok(())
}

/// Per-sample gradient of the cross-entropy loss with respect to the inputs.
///
/// Column `i` of the result is `∇_x ℓ(f(x_i), y_i)`.
pub fn input_gradients(
    spec: &NetSpec,
    params: &NetParams,
    x: &DMatrix<f64>,
    labels: &[usize],
) -> Result<DMatrix<f64>> {
    if labels.len() != x.ncols() {
        return Err(GamaError::param("one label per sample required"));
    }
    for &y in labels {
        check_label(spec, y)?;
    }
    let cache = forward_batch(spec, params, x)?;
    let mut dlogits = cache.probs();
    for (i, &y) in labels.iter().enumerate() {
        dlogits[(y, i)] -= 1.0;
    }
    let (_, dx) = backward(spec, params, &cache, &dlogits, None)?;
    Ok(dx)
}

/// `∇_x ℓ(f(x), y)` for the cross-entropy loss.
pub fn input_gradient(spec: &NetSpec, params: &NetParams, x: &[f64], y: usize) -> Result<DVector<f64>> {
    let g = input_gradients(spec, params, &DMatrix::from_column_slice(x.len(), 1, x), &[y])?;
    Ok(g.column(0).into_owned())
}

/// Predicted class per column (ties go to the lower class index).
pub fn predict(spec: &NetSpec, params: &NetParams, x: &DMatrix<f64>) -> Result<Vec<usize>> {
    let cache = forward_batch(spec, params, x)?;
    Ok(argmax_columns(cache.logits()))
}

pub(crate) fn argmax_columns(m: &DMatrix<f64>) -> Vec<usize> {
    m.column_iter()
        .map(|c| {
            let mut best = 0;
            for i in 1..c.len() {
                if c[i] > c[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
