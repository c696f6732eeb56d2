//! On-/off-manifold gradient decomposition, perturbed samples, and PGD.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GamaError, Result};
use crate::geometry::{project_tangent, TangentFrame};
use crate::model::{input_gradients, NetParams, NetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    /// On-manifold step length.
    pub alpha: f64,
    /// Off-manifold step length.
    pub beta: f64,
    /// Components with a smaller norm are treated as absent.
    pub zero_norm_tol: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            zero_norm_tol: 1e-12,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(GamaError::param("alpha and beta must be finite and nonnegative"));
        }
        if !(self.zero_norm_tol > 0.0) {
            return Err(GamaError::param("zero_norm_tol must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationPair {
    pub delta_on: DVector<f64>,
    pub delta_off: DVector<f64>,
    pub x_on: DVector<f64>,
    pub x_off: DVector<f64>,
    pub skipped_on: bool,
    pub skipped_off: bool,
}

/// Splits `grad` into its tangent-space projection and the orthogonal remainder.
pub fn decompose(frame: &TangentFrame, grad: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let on = project_tangent(frame, grad)?;
    let off = grad - &on;
    Ok((on, off))
}

/// Autoencoder variant: the off-manifold part is the component of `grad` along
/// the reconstruction residual; the rest counts as on-manifold.
pub fn decompose_along_residual(
    residual: &DVector<f64>,
    grad: &DVector<f64>,
    zero_norm_tol: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if residual.len() != grad.len() {
        return Err(GamaError::param("residual and gradient dimensions differ"));
    }
    let norm = residual.norm();
    if norm <= zero_norm_tol {
        return Ok((grad.clone(), DVector::zeros(grad.len())));
    }
    let dir = residual / norm;
    let off = &dir * dir.dot(grad);
    let on = grad - &off;
    Ok((on, off))
}

/// `x_on = x + α δ_on/‖δ_on‖`, `x_off = x + β δ_off/‖δ_off‖`; near-zero components are skipped.
pub fn make_perturbed(
    x: &DVector<f64>,
    delta_on: DVector<f64>,
    delta_off: DVector<f64>,
    cfg: &PerturbConfig,
) -> PerturbationPair {
    let step = |delta: &DVector<f64>, size: f64| -> Option<DVector<f64>> {
        let norm = delta.norm();
        (norm > cfg.zero_norm_tol).then(|| x + delta * (size / norm))
    };
    let on = step(&delta_on, cfg.alpha);
    let off = step(&delta_off, cfg.beta);
    PerturbationPair {
        skipped_on: on.is_none(),
        skipped_off: off.is_none(),
        x_on: on.unwrap_or_else(|| x.clone()),
        x_off: off.unwrap_or_else(|| x.clone()),
        delta_on,
        delta_off,
    }
}

/// ℓ∞ PGD settings. `epsilon = 0` is the null attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Seed for a uniform random start inside the ε-ball; `None` starts at `x`.
    #[serde(default)]
    pub random_start: Option<u64>,
}

impl AttackConfig {
    /// Ten steps of size `ε/4`, no random start.
    pub fn pgd(epsilon: f64) -> Self {
        Self {
            epsilon,
            steps: 10,
            step_size: epsilon / 4.0,
            random_start: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(GamaError::param("attack epsilon must be finite and nonnegative"));
        }
        if self.epsilon > 0.0 && (self.steps == 0 || !(self.step_size > 0.0)) {
            return Err(GamaError::param("attack needs steps >= 1 and a positive step size"));
        }
        Ok(())
    }
}

/// Batched PGD on a `d x n` input matrix. Columns are attacked independently.
///
/// Each step moves along the sign of the input gradient of the cross-entropy,
/// projects back onto the ε-ball around the clean input, then onto `bounds`.
pub fn pgd_attack_batch(
    spec: &NetSpec,
    params: &NetParams,
    x: &DMatrix<f64>,
    labels: &[usize],
    atk: &AttackConfig,
    bounds: Option<&[(f64, f64)]>,
) -> Result<DMatrix<f64>> {
    atk.validate()?;
    if let Some(b) = bounds {
        if b.len() != x.nrows() {
            return Err(GamaError::param("one clamp interval per input dimension required"));
        }
    }
    if atk.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let eps = atk.epsilon;
    let project = |adv: &mut DMatrix<f64>| {
        for c in 0..adv.ncols() {
            for r in 0..adv.nrows() {
                let orig = x[(r, c)];
                let mut v = orig + (adv[(r, c)] - orig).clamp(-eps, eps);
                if let Some(b) = bounds {
                    v = v.clamp(b[r].0, b[r].1);
                }
                adv[(r, c)] = v;
            }
        }
    };
    let mut adv = x.clone();
    if let Some(seed) = atk.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        adv.iter_mut().for_each(|v| *v += rng.random_range(-eps..=eps));
        project(&mut adv);
    }
    for _ in 0..atk.steps {
        let g = input_gradients(spec, params, &adv, labels)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(GamaError::numeric("pgd", "non-finite input gradient"));
        }
        for (a, gv) in adv.iter_mut().zip(g.iter()) {
            let s = if *gv > 0.0 {
                1.0
            } else if *gv < 0.0 {
                -1.0
            } else {
                0.0
            };
            *a += atk.step_size * s;
        }
        project(&mut adv);
    }
    Ok(adv)
}

pub fn pgd_attack(
    spec: &NetSpec,
    params: &NetParams,
    x: &[f64],
    y: usize,
    atk: &AttackConfig,
    bounds: Option<&[(f64, f64)]>,
) -> Result<DVector<f64>> {
    let xm = DMatrix::from_column_slice(x.len(), 1, x);
    let adv = pgd_attack_batch(spec, params, &xm, &[y], atk, bounds)?;
    Ok(adv.column(0).into_owned())
}
