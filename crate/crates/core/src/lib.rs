//! Differentially private (sliced) Wasserstein gradients.
//!
//! The crate computes the exact gradient of the squared 2-Wasserstein
//! distance between 1D empirical measures through quantile couplings, chains
//! it through small models with clipped activations and Jacobians so that its
//! sensitivity is bounded, calibrates Gaussian noise with a Gaussian-DP
//! accountant, and trains fairness-penalized models with DP-SGD.
//!
//! Module map:
//!
//! | module | contents |
//! |---|---|
//! | [`transport`] | rank permutations, quantile coupling, `W_2^2` and its gradient |
//! | [`sliced`] | random directions, Monte-Carlo sliced distance |
//! | [`models`] | identity, sigmoid classifier, two-layer perceptron, autoencoder |
//! | [`dp_gradient`] | clipping, clipped Wasserstein gradient, SP/EO objectives |
//! | [`sensitivity`] | closed-form bounds, empirical audit, `W_p` counterexample |
//! | [`privacy`] | Gaussian mechanism, GDP, subsampling, accountant, calibration |
//! | [`data`] | biased synthetic data, class partitions, CSV persistence |
//! | [`train`] | DP-SGD loop, fairness metrics, run artifacts |

pub mod data;
pub mod dp_gradient;
pub mod error;
pub mod models;
pub mod privacy;
pub mod rng;
pub mod sensitivity;
pub mod sliced;
pub mod train;
pub mod transport;

pub use error::{Error, Result};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
