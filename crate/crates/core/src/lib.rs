//! Kernel-modulation multimodal meta-learning (KM-MAML) for undersampled
//! image reconstruction.
//!
//! A context encoder embeds each undersampled input, per-layer hypernetworks
//! turn the embedding into low-rank modulation matrices, and those matrices
//! rescale every convolution kernel of a U-shaped base reconstruction
//! network. Training is bi-level: the hypernetworks adapt per task in an
//! inner loop while the base network and hypernetwork initialization are
//! meta-learned in the outer loop. Joint training, MAML and a scalar
//! modulation (MMAML) baseline share the same machinery.
//!
//! Module map:
//! - [`numerics`]: dense tensors, reverse-mode differentiation, unitary DFT,
//!   finite-difference gradient oracle.
//! - [`tasks`]: sampling masks, retrospective undersampling, phantoms, task
//!   construction and raster IO.
//! - [`model`]: context encoder, hypernetworks, kernel modulation, base
//!   network, k-space data fidelity.
//! - [`meta`]: training strategies, inner-loop adaptation, fine-tuning and
//!   evaluation.
//! - [`metrics`]: PSNR, SSIM, linear CKA and the layer-wise CKA profile.
//! - [`cli`]: run configuration, checkpoints and the command-line surface.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod tasks;

pub use error::{Error, Result};
