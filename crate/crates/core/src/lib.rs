//! Score tests of homogeneity (all variance components zero) for generalized
//! linear mixed models.
//!
//! The pipeline is: fit the model without random effects ([`nullfit`]),
//! evaluate the pairwise-correlation, overdispersion and combined score
//! statistics over a grid of covariance shapes ([`scorestats`]), take the
//! one-sided supremum, and calibrate it with a multiplier resampling scheme
//! conditional on the data ([`resample`]). [`simharness`] generates data from
//! the standard simulation models and estimates size and power.

pub mod covparam;
pub mod data;
pub mod error;
pub mod expfam;
pub mod nullfit;
pub mod pipeline;
pub mod resample;
pub mod scorestats;
pub mod simharness;

pub use covparam::{GammaPoint, GridSpec, NuisanceGrid, WMatrix};
pub use data::Dataset;
pub use error::{Error, Result};
pub use expfam::{FamilyKind, FamilySpec};
pub use nullfit::{fit_null, NullFit};
pub use pipeline::{run_test, TestConfig, TestReport};
pub use resample::{p_values, run_resampling, NullReplicates, PValues};
pub use scorestats::{compute_profile, sup_statistics, ScoreContext, ScoreProfile, SupStatistics};
pub use simharness::{estimate_rates, RateTable, SimConfig};
