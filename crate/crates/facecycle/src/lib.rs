//! Unsupervised disentanglement of facial expression and identity factors
//! through cycle-consistent reconstruction.
//!
//! Two latent factors are learned from unlabeled face videos. The expression
//! factor is modeled as an optical-flow field between a face and its neutral
//! face; removing it (de-expression) warps perceptual features toward the
//! neutral face, and re-applying the inverted flow (re-expression)
//! reconstructs the original. The identity factor is modeled as per-channel
//! feature statistics; removing it (de-identity) renormalizes a neutral
//! face's features toward a global mean face, and re-identity restores them.
//! Training enforces that two faces of one person share a neutral face and
//! that all neutral faces share a mean face.
//!
//! Crate layout follows the pipeline:
//! - [`dataset`]: corpus scanning, image loading, pair sampling
//! - [`warpflow`]: differentiable warping, flow inversion and rescaling
//! - [`nets`]: encoders, decoders, modulation MLPs, frozen feature backbone
//! - [`losses`]: cycle, perceptual/Gram and margin objectives
//! - [`train`]: the two-stage training procedure
//! - [`evalsuite`]: linear probes and cosine-similarity verification
//! - [`apps`]: frontalization, translation and inspection entry points

pub mod autograd;
pub mod config;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod nets;
pub mod nn;
pub mod train;
pub mod warpflow;

pub use error::{FaceCycleError, Result};
