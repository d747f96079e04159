//! Simulation and maximum pseudo-likelihood estimation for stationary
//! pairwise-interaction Gibbs point processes in the plane: Poisson,
//! Strauss and Lennard-Jones (finite or infinite range).
//!
//! The usual flow is
//!
//! 1. [`simulate`] a pattern, or read one with [`io::read_pattern`];
//! 2. choose an estimation window inside the observation window eroded by
//!    the interaction range ([`estimation_window`]);
//! 3. [`fit_mple`] over a [`ParameterBox`], which also returns the sandwich
//!    covariance and normal confidence intervals for finite-range models;
//! 4. check the fit with [`gnz_residuals`].

pub mod error;
pub mod experiment;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod models;
pub mod pseudolik;
pub mod sampler;

pub use error::{Error, ErrorClass, Result};
pub use experiment::{run_experiment, ExperimentPlan, ExperimentReport, SideSummary};
pub use geometry::{
    build_partition, dilate, erode, estimation_window, largest_admissible_subwindow, CellPartition,
    Configuration, Point, SpatialGrid, Window,
};
pub use inference::{
    confidence_intervals, fit_mple, sandwich_cov, sigma_hat, ConfidenceIntervals, FitOptions,
    FitResult,
};
pub use models::{
    grad_local_energy, hess_local_energy, local_energy, pair_potential, tail_bound, ModelSpec,
    PairSums, ParameterBox, Theta,
};
pub use pseudolik::{
    grad_log_pl, hess_log_pl, log_pl, u_n, u_n1, u_n2, PseudoLikelihood, QuadratureScheme,
    ScoreBreakdown,
};
pub use sampler::{gnz_residual, gnz_residuals, simulate, ChainStats, SamplerConfig, TestFunction};
