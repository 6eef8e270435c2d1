//! Quantify how much the predictable part of a labeled dataset varies across
//! latent sub-populations, and find the sub-population structure that makes
//! the variation largest.
//!
//! The core quantity is an information-theoretic score built from a
//! *predictive family* (a restricted model class such as linear-Gaussian
//! regressors or linear softmax classifiers). For a candidate soft assignment
//! of samples to `K` environments, the score compares how much the family
//! learns about the target inside each environment against how much it learns
//! from the pooled data. Splits that only shuffle noise score zero; splits
//! that separate genuinely different predictive mechanisms score high.
//!
//! Modules, bottom up:
//!
//! - [`dataset`]: in-memory tabular datasets, CSV I/O, and four synthetic
//!   generators with known ground-truth sub-populations.
//! - [`families`]: the predictive families, their losses and gradients, and
//!   weighted fitting (closed form where available, gradient descent
//!   otherwise).
//! - [`vinfo`]: empirical entropies under a family and the heterogeneity
//!   score of a dataset given a soft environment assignment.
//! - [`im`]: the bi-level optimizer that searches over assignments by
//!   projected gradient descent on a relaxed objective, with a truncated
//!   hypergradient for the inner fits.
//! - [`oracles`]: analytical approximations with error bounds for two
//!   structured generation processes, a brute-force enumerator for tiny
//!   instances, and finite-difference gradient checks.
//! - [`ood`]: downstream out-of-distribution trainers (ERM, sub-population
//!   balancing, IRM, IGA) that consume discovered environments, plus a
//!   K-means baseline and a benchmark table harness.
//! - [`pac`]: a finite-sample deviation bound for the score and a Monte-Carlo
//!   Rademacher-complexity estimate to feed it.
//!
//! All entropies and scores are in nats. All randomness flows through
//! explicitly seeded ChaCha8 generators; every public entry point that draws
//! random numbers takes a seed, and repeated calls with the same seed are
//! bit-identical. Computation is single-threaded and summation order is
//! fixed, so results are reproducible across runs and machines.

pub mod dataset;
pub mod error;
pub mod families;
pub mod im;
pub mod ood;
pub mod oracles;
pub mod pac;
pub mod vinfo;

pub(crate) mod linalg;

pub use error::{Error, Result};
