//! Adaptive Bayesian sum-of-trees estimation of covariate-dependent power
//! spectra for panels of stationary time series.
//!
//! The pipeline is:
//!
//! 1. [`panel`]: load a panel of equal-length series with mixed-type
//!    covariates, demean it and compute periodograms.
//! 2. [`spectrum`]: the cosine-spline model of a terminal node's log
//!    spectrum, its Whittle likelihood and the node-level M-H/Gibbs updates.
//! 3. [`tree`]: split rules, cutpoint grids, the depth-penalised tree prior
//!    and splitting proportions (uniform or sparse Dirichlet).
//! 4. [`sampler`]: Bayesian backfitting over `M` trees with reversible-jump
//!    BIRTH/DEATH/CHANGE moves.
//! 5. [`analysis`]: posterior spectra, accumulated local effects (ALE),
//!    LF/HF band ratios and variable-inclusion probabilities.
//!
//! [`simgen`] generates the AR simulation settings together with their
//! analytic spectra, and [`config`]/[`io`] provide the file formats used by
//! the `spectree` command-line tool.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod matrix;
pub mod panel;
pub mod rng;
pub mod sampler;
pub mod simgen;
pub mod spectrum;
pub mod tree;

pub use error::{Error, Result};
pub use matrix::RowMatrix;
