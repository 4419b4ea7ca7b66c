//! Deep incomplete multi-view clustering with hierarchical imputation and
//! energy-based intra-cluster alignment.
//!
//! The library trains one autoencoder per view plus a shared cluster
//! predictor on data where each sample may be missing from some views.
//! Missing soft assignments are imputed from the most similar available
//! view, missing latent features from cluster prototypes, and two
//! alignment losses (an energy flatness term within clusters and a
//! label-aware contrastive term across views) are optimized jointly with
//! reconstruction. Everything is deterministic given a seed.
//!
//! Module map:
//! - [`diffnet`]: matrices, reverse-mode tape, MLPs, Adam, checkpoints
//! - [`datasets`]: CSV-loaded multi-view data, masks, synthetic generation
//! - [`model`]: the per-view networks bundled with save/load
//! - [`imputation`]: similarity ranking and two-stage completion (values)
//! - [`losses`]: loss graphs built on the tape
//! - [`pipeline`]: one batch end to end, shared by training and checking
//! - [`trainer`]: pretrain/finetune loops, artifacts, exact resume
//! - [`metrics`]: clustering accuracy, NMI, purity

pub mod datasets;
pub mod diffnet;
pub mod error;
pub mod imputation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
