use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward, forward_batch, Activation, NetParams, NetSpec};
use crate::error::{GamaError, Result};
use crate::optim::{Optimizer, OptimizerKind};

/// Encoder `E` and decoder `D`; both end in a linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder_spec: NetSpec,
    pub encoder: NetParams,
    pub decoder_spec: NetSpec,
    pub decoder: NetParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderTraining {
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for AutoencoderTraining {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            latent: 1,
            activation: Activation::Tanh,
            epochs: 300,
            learning_rate: 1e-2,
            batch_size: 32,
        }
    }
}

impl Autoencoder {
    pub fn new(encoder_spec: NetSpec, encoder: NetParams, decoder_spec: NetSpec, decoder: NetParams) -> Result<Self> {
        encoder.check_shape(&encoder_spec)?;
        decoder.check_shape(&decoder_spec)?;
        if encoder_spec.classes() != decoder_spec.input_dim() {
            return Err(GamaError::param("latent widths of encoder and decoder differ"));
        }
        if decoder_spec.classes() != encoder_spec.input_dim() {
            return Err(GamaError::param(
                "decoder output dimension must equal encoder input dimension",
            ));
        }
        Ok(Self {
            encoder_spec,
            encoder,
            decoder_spec,
            decoder,
        })
    }

    pub fn init(input: usize, cfg: &AutoencoderTraining, seed: u64) -> Result<Self> {
        let mut enc_w = vec![input];
        enc_w.extend_from_slice(&cfg.hidden);
        enc_w.push(cfg.latent);
        let mut dec_w = vec![cfg.latent];
        dec_w.extend(cfg.hidden.iter().rev());
        dec_w.push(input);
        let encoder_spec = NetSpec::new(enc_w.clone(), cfg.activation, enc_w.len() - 2)?;
        let decoder_spec = NetSpec::new(dec_w.clone(), cfg.activation, dec_w.len() - 2)?;
        let encoder = NetParams::init(&encoder_spec, seed);
        let decoder = NetParams::init(&decoder_spec, seed.wrapping_add(1));
        Self::new(encoder_spec, encoder, decoder_spec, decoder)
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_spec.input_dim()
    }

    /// `D(E(x))` for a `d x n` batch.
    pub fn reconstruct(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let enc = forward_batch(&self.encoder_spec, &self.encoder, x)?;
        let dec = forward_batch(&self.decoder_spec, &self.decoder, enc.logits())?;
        Ok(dec.logits().clone())
    }

    /// Mean squared reconstruction error per sample (sum over features).
    pub fn reconstruction_loss(&self, x: &DMatrix<f64>) -> Result<f64> {
        let r = self.reconstruct(x)?;
        Ok((x - r).norm_squared() / x.ncols() as f64)
    }

    /// Fits `D(E(x)) ≈ x` with Adam on mini-batches; returns the final loss.
    pub fn fit(&mut self, x: &DMatrix<f64>, cfg: &AutoencoderTraining, seed: u64) -> Result<f64> {
        if x.nrows() != self.input_dim() || x.ncols() == 0 {
            return Err(GamaError::param("training data shape does not match autoencoder"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = OptimizerKind::default();
        let mut opt_e = Optimizer::new(kind, cfg.learning_rate, &self.encoder);
        let mut opt_d = Optimizer::new(kind, cfg.learning_rate, &self.decoder);
        let n = x.ncols();
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let xb = x.select_columns(chunk);
                let enc = forward_batch(&self.encoder_spec, &self.encoder, &xb)?;
                let dec = forward_batch(&self.decoder_spec, &self.decoder, enc.logits())?;
                let scale = 2.0 / chunk.len() as f64;
                let dout = (dec.logits() - &xb) * scale;
                let (g_dec, dlatent) = backward(&self.decoder_spec, &self.decoder, &dec, &dout, None)?;
                let (g_enc, _) = backward(&self.encoder_spec, &self.encoder, &enc, &dlatent, None)?;
                opt_d.step(&mut self.decoder, &g_dec);
                opt_e.step(&mut self.encoder, &g_enc);
            }
        }
        let loss = self.reconstruction_loss(x)?;
        if !loss.is_finite() {
            return Err(GamaError::numeric("autoencoder", "reconstruction loss is not finite"));
        }
        Ok(loss)
    }
}

/// `x - D(E(x))`, the off-manifold residual of a single input.
pub fn autoencoder_residual(ae: &Autoencoder, x: &[f64]) -> Result<DVector<f64>> {
    if x.len() != ae.input_dim() {
        return Err(GamaError::param(format!(
            "input of length {} for an autoencoder over {} features",
            x.len(),
            ae.input_dim()
        )));
    }
    let xm = DMatrix::from_column_slice(x.len(), 1, x);
    let r = ae.reconstruct(&xm)?;
    Ok((xm - r).column(0).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn linear_map(d: usize, w: DMatrix<f64>) -> (NetSpec, NetParams) {
        let spec = NetSpec::new(vec![d, d], Activation::Tanh, 0).unwrap();
        let mut p = NetParams::zeros(&spec);
        p.layers[0].weight = w;
        (spec, p)
    }

    #[test]
    fn identity_autoencoder_has_zero_residual() {
        let (es, ep) = linear_map(3, DMatrix::identity(3, 3));
        let (ds, dp) = linear_map(3, DMatrix::identity(3, 3));
        let ae = Autoencoder::new(es, ep, ds, dp).unwrap();
        let r = autoencoder_residual(&ae, &[1.5, -2.0, 0.25]).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_decoder_returns_input() {
        let (es, ep) = linear_map(2, DMatrix::identity(2, 2));
        let (ds, dp) = linear_map(2, DMatrix::zeros(2, 2));
        let ae = Autoencoder::new(es, ep, ds, dp).unwrap();
        let r = autoencoder_residual(&ae, &[0.7, -0.1]).unwrap();
        assert_eq!(r.as_slice(), &[0.7, -0.1]);
        assert!(autoencoder_residual(&ae, &[1.0]).is_err());
    }

    #[test]
    fn trained_on_a_line_flags_off_line_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<f64> = (0..200)
            .flat_map(|_| [rng.random_range(0.0..1.0), 0.0])
            .collect();
        let data = DMatrix::from_column_slice(2, 200, &xs);
        let cfg = AutoencoderTraining::default();
        let mut ae = Autoencoder::init(2, &cfg, 9).unwrap();
        ae.fit(&data, &cfg, 9).unwrap();
        let off = autoencoder_residual(&ae, &[0.0, 1.0]).unwrap().norm();
        let on = autoencoder_residual(&ae, &[0.5, 0.0]).unwrap().norm();
        assert!(off > on, "off-line residual {off} vs on-line {on}");
        assert!(on < 0.05, "on-line residual {on}");
    }
}
