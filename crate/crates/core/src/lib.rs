//! Uncertainty quantification for small feed-forward networks.
//!
//! The crate bundles the pieces needed to train probabilistic regressors
//! and classifiers, wrap them with distribution-free conformal guarantees,
//! and score the results: a dense-tensor autodiff core, an MLP with
//! dropout and layer freezing, seeded training loops, a catalog of UQ
//! methods (mean-variance estimation, evidential regression, quantile
//! regression, deep ensembles, MC dropout, SWAG, variational inference,
//! last-layer Laplace), split-conformal calibration, and an evaluation
//! stack (proper scoring, calibration error, coverage, selective
//! prediction). A config-driven harness exposes everything through run
//! and benchmark entry points backed by the `uqkit` CLI.

pub mod classification;
pub mod conformal;
pub mod data;
pub mod harness;
pub mod jsonnum;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod regression;
pub mod rng;
pub mod special;
pub mod tape;
pub mod tensor;
pub mod train;
