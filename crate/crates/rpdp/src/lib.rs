//! Desk-scale simulator and privacy-accounting toolkit for cross-silo
//! federated learning with record-level personalized differential privacy.
//!
//! The pieces, bottom up:
//!
//! - [`accountant`]: RDP of the (subsampled) Gaussian mechanism,
//!   composition, client-sampling amplification, and RDP→DP conversion.
//! - [`oracle`]: an independent quadrature oracle for the same divergence,
//!   used to validate the accountant.
//! - [`scf`]: simulate ε*(q), fit ε* ≈ e^{a·q+b} + c, and invert it into a
//!   constant-time budget→probability estimator; plus a binary-search
//!   comparator.
//! - [`sampling`]: deterministic seed-derived streams and Poisson
//!   selection for both sampling stages.
//! - [`ledger`]: per-record budget accounting with round prechecks and
//!   realized-cost charging.
//! - [`prefs`]: personalized privacy-budget distributions.
//! - [`datagen`]: synthetic federated benchmarks, CSV ingestion, and
//!   IID/non-IID partitioning.
//! - [`flsim`]: the FedAvg + DP-SGD engine with two-stage sampling and the
//!   uniform baselines.
//! - [`config`] / [`commands`]: the TOML experiment schema and the CLI
//!   subcommand implementations.

pub mod accountant;
pub mod commands;
pub mod config;
pub mod datagen;
pub mod error;
pub mod flsim;
pub mod ledger;
mod math;
pub mod oracle;
pub mod prefs;
pub mod sampling;
pub mod scf;

pub use error::{Error, Result};
