//! Scalable Gaussian-process approximations for disease-prevalence mapping.
//!
//! Four model families share one contract ([`model::FittedModel`]): exact and
//! Vecchia Gaussian processes with a boosted intercept ([`gpcore`]), a
//! distance-feature quantile forest ([`sprf`]), fixed-rank kriging with a
//! Laplace-approximated binomial likelihood ([`frk`]), and a lattice GMRF with
//! empirical-Bayes Laplace inference ([`lgm`]). [`simkit`] generates synthetic
//! surveys and [`evalkit`] runs spatially blocked cross-validation.

pub mod cart;
pub mod covfn;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod frk;
pub mod geodata;
pub mod gpcore;
pub mod lgm;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod simkit;
pub mod sprf;

pub use error::{Error, Result};
