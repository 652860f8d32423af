//! Domain adaptation with dual correction of feature and label noise.
//!
//! A labeled, noisy source domain and an unlabeled, shifted target domain
//! share one feature generator. Each epoch runs two tasks:
//!
//! * source to target: pseudo-label the target with the source head, correct
//!   the pseudo-labels with [`nic`], and train the target head with a
//!   weak/strong consistency term;
//! * target to source: correct source features and labels with [`nic`], then
//!   train the generator and source head so both heads classify the corrected
//!   source data.
//!
//! [`datagen`] produces the synthetic domain pairs and corruption, [`model`]
//! holds the network and its gradients, [`trainer`] runs the loop, and
//! [`eval`] scores everything against the hidden ground truth. The `dualcan`
//! binary wraps the same pipeline behind `gen`, `train`, `sweep`, `ablate`
//! and `report`.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod nic;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
