//! The combined training objective and its parameter gradient.
//!
//! Perturbed inputs `x_on`/`x_off` are treated as fixed inputs: gradients flow
//! through the forward passes on them, not through their construction. Graph
//! geodesics are differentiated along their (fixed) shortest paths.

use nalgebra::DMatrix;

use crate::error::{GamaError, Result};
use crate::geometry::{cross_geodesic, CrossGeodesicOptions, GeodesicMetric, PointSet};
use crate::losses::{loss_geom_with_grad, loss_total, LossBreakdown, LossParts, LossWeights};
use crate::model::{backward, forward_batch, log_softmax, ForwardCache, NetParams, NetSpec};

/// One mini-batch worth of inputs, all stored column-wise (`d x n`).
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveBatch<'a> {
    pub source: &'a DMatrix<f64>,
    pub labels: &'a [usize],
    pub source_on: &'a DMatrix<f64>,
    pub source_off: &'a DMatrix<f64>,
    /// Unlabeled target inputs; `None` disables the alignment term.
    pub target: Option<&'a DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub geodesic_k: usize,
    pub metric: GeodesicMetric,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub grad: Option<NetParams>,
    /// Source/target pairs with no connecting path in the batch graph.
    pub unreachable_pairs: usize,
}

fn embeddings_as_points(cache: &ForwardCache) -> Result<PointSet> {
    let e = cache.embeddings();
    // column-major d x n is row-major n x d
    PointSet::new(e.as_slice().to_vec(), e.nrows())
}

fn finite(term: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GamaError::numeric(term, "non-finite network output"))
    }
}

impl Objective {
    /// Evaluates every term (means over the batch) and, if requested, the
    /// gradient of the total with respect to all parameters.
    pub fn evaluate(
        &self,
        spec: &NetSpec,
        params: &NetParams,
        batch: &ObjectiveBatch<'_>,
        with_grad: bool,
    ) -> Result<Evaluation> {
        self.weights.validate()?;
        let n = batch.source.ncols();
        if n == 0 {
            return Err(GamaError::param("empty source batch"));
        }
        if batch.labels.len() != n
            || batch.source_on.shape() != batch.source.shape()
            || batch.source_off.shape() != batch.source.shape()
        {
            return Err(GamaError::param("batch components have inconsistent shapes"));
        }
        let c = spec.classes();
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= c) {
            return Err(GamaError::param(format!("label {y} out of range for {c} classes")));
        }
        let w = &self.weights;
        let inv_n = 1.0 / n as f64;

        let fx = forward_batch(spec, params, batch.source)?;
        let fon = forward_batch(spec, params, batch.source_on)?;
        let foff = forward_batch(spec, params, batch.source_off)?;
        finite("cls", fx.logits())?;
        finite("on", fon.logits())?;
        finite("off", foff.logits())?;

        let mut d_x = DMatrix::zeros(c, n);
        let mut d_on = DMatrix::zeros(c, n);
        let mut d_off = DMatrix::zeros(c, n);
        let (mut cls, mut on, mut off) = (0.0, 0.0, 0.0);

        for i in 0..n {
            let lx: Vec<f64> = fx.logits().column(i).iter().copied().collect();
            let lon: Vec<f64> = fon.logits().column(i).iter().copied().collect();
            let loff: Vec<f64> = foff.logits().column(i).iter().copied().collect();
            let log_p = log_softmax(&lx);
            let log_q = log_softmax(&loff);
            let p: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
            let q: Vec<f64> = log_q.iter().map(|v| v.exp()).collect();
            let y = batch.labels[i];

            cls -= log_p[y];
            let r: Vec<f64> = log_p.iter().zip(&log_q).map(|(a, b)| a - b).collect();
            let kl: f64 = p.iter().zip(&r).map(|(pi, ri)| pi * ri).sum();
            let mut sq_on = 0.0;
            let mut sq_off = 0.0;
            for k in 0..c {
                sq_on += (lx[k] - lon[k]).powi(2);
                sq_off += (lx[k] - loff[k]).powi(2);
            }
            on += sq_on;
            off += kl.max(0.0) + sq_off;

            for k in 0..c {
                let onehot = if k == y { 1.0 } else { 0.0 };
                let g_on = 2.0 * (lx[k] - lon[k]);
                let g_off = 2.0 * (lx[k] - loff[k]);
                let g_kl_p = p[k] * (r[k] - kl);
                let g_kl_q = q[k] - p[k];
                d_x[(k, i)] = inv_n * ((p[k] - onehot) + w.lambda_on * g_on + w.lambda_off * (g_kl_p + g_off));
                d_on[(k, i)] = -inv_n * w.lambda_on * g_on;
                d_off[(k, i)] = inv_n * w.lambda_off * (g_kl_q - g_off);
            }
        }
        cls *= inv_n;
        on *= inv_n;
        off *= inv_n;

        let mut geom = 0.0;
        let mut unreachable_pairs = 0;
        let mut d_emb_source = None;
        let mut target_pass = None;
        if let Some(target) = batch.target.filter(|t| t.ncols() > 0) {
            let ft = forward_batch(spec, params, target)?;
            finite("geom", ft.embeddings())?;
            let src_pts = embeddings_as_points(&fx)?;
            let tgt_pts = embeddings_as_points(&ft)?;
            let opts = CrossGeodesicOptions {
                k: self.geodesic_k,
                metric: self.metric,
                keep_paths: with_grad && w.lambda_geom > 0.0,
            };
            let cross = cross_geodesic(&src_pts, &tgt_pts, &opts)?;
            unreachable_pairs = cross.unreachable_pairs;
            let (value, d_dist) = loss_geom_with_grad(&cross.dist, w.tau)?;
            geom = value;
            if with_grad && w.lambda_geom > 0.0 {
                let (gs, gt) = cross.backprop(&src_pts, &tgt_pts, &(d_dist * w.lambda_geom))?;
                let e = spec.embedding_dim();
                d_emb_source = Some(DMatrix::from_column_slice(e, n, &gs));
                target_pass = Some((ft, DMatrix::from_column_slice(e, target.ncols(), &gt)));
            }
        }

        let breakdown = loss_total(LossParts { cls, on, off, geom }, w)?;
        if !with_grad {
            return Ok(Evaluation {
                breakdown,
                grad: None,
                unreachable_pairs,
            });
        }

        let (mut grad, _) = backward(spec, params, &fx, &d_x, d_emb_source.as_ref())?;
        if w.lambda_on > 0.0 {
            let (g, _) = backward(spec, params, &fon, &d_on, None)?;
            grad.add_scaled(&g, 1.0);
        }
        if w.lambda_off > 0.0 {
            let (g, _) = backward(spec, params, &foff, &d_off, None)?;
            grad.add_scaled(&g, 1.0);
        }
        if let Some((ft, d_emb_target)) = target_pass {
            let zero = DMatrix::zeros(c, ft.batch_size());
            let (g, _) = backward(spec, params, &ft, &zero, Some(&d_emb_target))?;
            grad.add_scaled(&g, 1.0);
        }
        if !grad.is_finite() {
            return Err(GamaError::numeric("total", "non-finite parameter gradient"));
        }
        Ok(Evaluation {
            breakdown,
            grad: Some(grad),
            unreachable_pairs,
        })
    }
}

/// Gradient of the mean total loss over `batch` with respect to every parameter.
pub fn param_gradients(
    spec: &NetSpec,
    params: &NetParams,
    batch: &ObjectiveBatch<'_>,
    objective: &Objective,
) -> Result<(LossBreakdown, NetParams)> {
    let eval = objective.evaluate(spec, params, batch, true)?;
    Ok((eval.breakdown, eval.grad.expect("gradient requested")))
}
