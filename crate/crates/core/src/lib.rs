//! Multi-view variational autoencoder that splits each view's latent code
//! into a view-private block and a shared block fused across views with a
//! product of Gaussian experts, trained with a KL term decomposed into
//! mutual information, total correlation and dimension-wise KL.
//!
//! The crate also contains the synthetic tone corpus the model is studied
//! on, the log-mel front end, the training loop and the evaluation suite
//! (latent/factor mutual information and linear probes).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod backbone;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod objective;
pub mod synthesis;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
