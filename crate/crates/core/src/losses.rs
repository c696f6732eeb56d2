//! The four objective terms and their weighted sum.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GamaError, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_on: f64,
    pub lambda_off: f64,
    pub lambda_geom: f64,
    /// Softmin temperature, in embedding-distance units.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_on: 1.0,
            lambda_off: 0.5,
            lambda_geom: 0.1,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_on: 0.0,
            lambda_off: 0.0,
            lambda_geom: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ls = [self.lambda_on, self.lambda_off, self.lambda_geom];
        if ls.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(GamaError::param("loss weights must be finite and nonnegative"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(GamaError::param("softmin temperature must be positive"));
        }
        Ok(())
    }
}

/// Unweighted term values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub on: f64,
    pub off: f64,
    pub geom: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub on: f64,
    pub off: f64,
    pub geom: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,cls,on,off,geom,total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.cls, self.on, self.off, self.geom, self.total
        )
    }
}

/// `total = cls + λ_on·on + λ_off·off + λ_geom·geom`.
pub fn loss_total(parts: LossParts, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("cls", parts.cls), ("on", parts.on), ("off", parts.off), ("geom", parts.geom)] {
        if !v.is_finite() {
            return Err(GamaError::numeric(name, format!("term evaluated to {v}")));
        }
    }
    let total = parts.cls + w.lambda_on * parts.on + w.lambda_off * parts.off + w.lambda_geom * parts.geom;
    Ok(LossBreakdown {
        cls: parts.cls,
        on: parts.on,
        off: parts.off,
        geom: parts.geom,
        total,
    })
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(GamaError::param(format!("{what} is not a probability vector")));
    }
    Ok(())
}

/// `-ln p[y]`, with `p[y]` floored at [`PROB_FLOOR`].
pub fn loss_cls(probs: &[f64], y: usize) -> Result<f64> {
    check_simplex(probs, "probs")?;
    let p = probs
        .get(y)
        .ok_or_else(|| GamaError::param(format!("label {y} out of range for {} classes", probs.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Cross-entropy straight from logits via log-softmax.
pub fn cross_entropy_logits(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(GamaError::param(format!("label {y} out of range for {} classes", logits.len())));
    }
    Ok(-crate::model::log_softmax(logits)[y])
}

fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GamaError::param(format!(
            "output dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `‖f(x_on) - f(x)‖²` on logits.
pub fn loss_on(f_x: &[f64], f_xon: &[f64]) -> Result<f64> {
    squared_distance(f_x, f_xon)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffLoss {
    pub value: f64,
    pub kl: f64,
    pub squared: f64,
    /// Probabilities raised to the floor before taking logs.
    pub clamped: usize,
}

/// `KL(p ∥ q)` with both sides floored at [`PROB_FLOOR`]; returns the value and clamp count.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<(f64, usize)> {
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    if p.len() != q.len() {
        return Err(GamaError::param("distributions have different supports"));
    }
    let mut clamped = 0;
    let mut floor = |v: f64| {
        if v < PROB_FLOOR {
            clamped += 1;
            PROB_FLOOR
        } else {
            v
        }
    };
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let (pc, qc) = (floor(pi), floor(qi));
        kl += pc * (pc.ln() - qc.ln());
    }
    Ok((kl.max(0.0), clamped))
}

/// `KL(p_x ∥ p_xoff) + ‖f_x - f_xoff‖²`.
pub fn loss_off(p_x: &[f64], p_xoff: &[f64], f_x: &[f64], f_xoff: &[f64]) -> Result<OffLoss> {
    let (kl, clamped) = kl_divergence(p_x, p_xoff)?;
    let squared = squared_distance(f_x, f_xoff)?;
    Ok(OffLoss {
        value: kl + squared,
        kl,
        squared,
        clamped,
    })
}

/// `-τ ln Σ_j exp(-v_j/τ)`, evaluated around `min(v)` to stay finite.
pub fn softmin(v: &[f64], tau: f64) -> f64 {
    let m = v.iter().copied().fold(f64::INFINITY, f64::min);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|x| (-(x - m) / tau).exp()).sum();
    m - tau * s.ln()
}

/// `∂ softmin / ∂ v`: softmax of `-v/τ`.
pub fn softmin_weights(v: &[f64], tau: f64) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = v.iter().map(|x| (-(x - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Symmetric softmin alignment loss over a `|S| x |T|` distance matrix:
/// the mean over sources of the softmin across targets plus the mean over
/// targets of the softmin across sources.
pub fn loss_geom(dists: &DMatrix<f64>, tau: f64) -> Result<f64> {
    loss_geom_with_grad(dists, tau).map(|(v, _)| v)
}

/// [`loss_geom`] together with `∂L/∂dists`.
pub fn loss_geom_with_grad(dists: &DMatrix<f64>, tau: f64) -> Result<(f64, DMatrix<f64>)> {
    let (ns, nt) = dists.shape();
    if ns == 0 || nt == 0 {
        return Err(GamaError::param("alignment loss needs nonempty source and target sets"));
    }
    if !(tau > 0.0) {
        return Err(GamaError::param("softmin temperature must be positive"));
    }
    let mut grad = DMatrix::zeros(ns, nt);
    let mut forward = 0.0;
    for i in 0..ns {
        let row: Vec<f64> = dists.row(i).iter().copied().collect();
        forward += softmin(&row, tau);
        for (j, w) in softmin_weights(&row, tau).into_iter().enumerate() {
            grad[(i, j)] += w / ns as f64;
        }
    }
    let mut backward = 0.0;
    for j in 0..nt {
        let col: Vec<f64> = dists.column(j).iter().copied().collect();
        backward += softmin(&col, tau);
        for (i, w) in softmin_weights(&col, tau).into_iter().enumerate() {
            grad[(i, j)] += w / nt as f64;
        }
    }
    let value = forward / ns as f64 + backward / nt as f64;
    if !value.is_finite() {
        return Err(GamaError::numeric("geom", "alignment loss is not finite"));
    }
    Ok((value, grad))
}

/// Symmetric per-point mean of hard minimum distances (`(Σ_s min_t + Σ_t min_s) / (|S| + |T|)`).
pub fn hard_alignment(dists: &DMatrix<f64>) -> Result<f64> {
    let (ns, nt) = dists.shape();
    if ns == 0 || nt == 0 {
        return Err(GamaError::param("alignment needs nonempty source and target sets"));
    }
    let rows: f64 = dists.row_iter().map(|r| r.min()).sum();
    let cols: f64 = dists.column_iter().map(|c| c.min()).sum();
    Ok((rows + cols) / (ns + nt) as f64)
}
