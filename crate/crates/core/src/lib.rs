//! Cluster-aware contrastive learning for unsupervised out-of-distribution
//! detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: a small reverse-mode tape over dense `f64` matrices.
//! * [`model`]: the MLP encoder (embedding layer) and projection head.
//! * [`losses`]: NT-Xent, the self-supervised loss, the cluster center and
//!   cluster instance losses, and their weighted combination.
//! * [`clustering`]: spherical k-means, concentrations and the refit schedule.
//! * [`scoring`]: reference-bank OOD scores and exact AUROC.
//! * [`harness`]: synthetic data, augmentation, training, evaluation,
//!   checkpoints, reports and ablation sweeps.
//!
//! Data-parallel loops (assignment, scoring, sweeps) go through [`par`],
//! which uses rayon when the `parallel` feature is enabled and plain
//! iteration otherwise. Results are identical either way.

pub mod autodiff;
pub mod clustering;
mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod par;
pub mod scoring;

pub use error::{CclError, Result};
