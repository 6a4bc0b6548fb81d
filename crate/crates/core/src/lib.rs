//! Bayesian history matching for expensive simulators.
//!
//! The crate finds the region of a simulator's input space whose outputs are
//! consistent with observations once emulator uncertainty, model discrepancy
//! and observation error are accounted for. Work proceeds in waves: design
//! runs inside the current non-implausible region, fit one Bayes linear
//! emulator per output, score candidate inputs by implausibility, and cut.
//!
//! Module map:
//!
//! * [`space`]: parameter ranges and the `[-1, 1]` coordinate maps
//! * [`design`]: Latin hypercubes, maximin refinement, constrained sampling
//! * [`simulators`]: simulator trait, synthetic stand-in, external adapter
//! * [`emulator`]: regression trend, residual process, Bayes linear update
//! * [`budget`]: discrepancy and observation-error covariances
//! * [`implausibility`]: univariate, ranked and multivariate measures
//! * [`wave`]: the wave chain, region membership, volume estimates, harvest
//! * [`diagnostics`]: held-out validation and regression summaries
//! * [`projection`]: minimized-implausibility and optical-depth grids
//! * [`campaign`]: configuration, campaign directories, run tables

pub mod budget;
pub mod campaign;
pub mod design;
pub mod diagnostics;
pub mod emulator;
pub mod error;
pub mod implausibility;
pub mod io;
pub mod linalg;
pub mod projection;
pub mod runs;
pub mod seed;
pub mod simulators;
pub mod space;
pub mod wave;

pub use error::{Error, Result};
