//! Geometry-aware manifold alignment for domain adaptation.
//!
//! The crate estimates local manifold structure with k-NN graphs and PCA
//! tangent frames, splits input-loss gradients into on- and off-manifold
//! components, aligns source and target embeddings with a softmin over graph
//! geodesics, and trains small feed-forward classifiers on the combined
//! objective. Synthetic domain-shift generators and the evaluation metrics
//! (target accuracy, PGD robust accuracy, GeoAlign) live alongside.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod perturb;
pub mod trainer;

pub use error::{GamaError, Result};
