//! Few-shot GNSS interference classification with uncertainty-guided
//! quadruplet mining.
//!
//! The crate is organised bottom-up:
//!
//! - [`siggen`] synthesizes IQ snapshots for the eleven class archetypes.
//! - [`spectro`] turns snapshots into 8-bit log-magnitude spectrogram images.
//! - [`nn`] is a small convolutional embedding network with exact gradients.
//! - [`losses`] holds cross-entropy plus contrastive, triplet and quadruplet losses.
//! - [`uncertainty`] runs deep ensembles and splits predictive variance into
//!   aleatoric and epistemic parts.
//! - [`fsl`] builds episodes, prototypes, similarity maps and the training loop.
//! - [`metrics`] covers confusion matrices, F-beta scores and exact t-SNE.

pub mod corpus;
pub mod error;
pub mod fsl;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod seed;
pub mod siggen;
pub mod spectro;
pub mod uncertainty;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Number of labelled classes: three backgrounds and eight interference types.
pub const NUM_CLASSES: usize = 11;
