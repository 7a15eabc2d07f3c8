//! Heteroskedastic Gaussian-process emulation and uncertainty attribution
//! for stochastic simulators.
//!
//! The crate covers the full workflow for simulators whose seed-to-seed
//! noise varies over the input space:
//!
//! - [`kernel`]: anisotropic Matérn-3/2 correlation and its derivatives;
//! - [`gp`]: replication-aware homoskedastic GP core (collapse to unique
//!   design points, kriging, marginal likelihood, MLE);
//! - [`hetgp`]: the joint mean/dispersion emulator with latent log-variance
//!   smoothing;
//! - [`design`]: Latin hypercube initialization and IMSPE-driven sequential
//!   batches that may replicate existing locations;
//! - [`sa`]: Sobol' indices on the emulated mean, the seed-variable total
//!   effect, relative dispersion indices, and bootstrap intervals;
//! - [`diagnostics`]: pivoted-Cholesky errors, RMSE, and coverage curves;
//! - [`testbench`]: built-in stochastic simulators with known structure.
//!
//! All GP computation happens on inputs scaled to the unit hypercube via
//! [`domain::Domain`]; every randomized routine takes an explicit seed and
//! is bitwise reproducible.

pub mod design;
pub mod diagnostics;
pub mod domain;
pub mod error;
pub mod gp;
pub mod hetgp;
pub mod kernel;
pub mod ledger;
pub mod linalg;
pub mod opt;
pub mod rng;
pub mod sa;
pub mod stats;
pub mod testbench;

pub use domain::Domain;
pub use error::{Error, Result};
pub use gp::{collapse_replicates, fit_gp, GPFit, GPHypers, GpBounds, ReplicatedDesign};
pub use hetgp::{fit_hetgp, smooth_latent, FitOptions, JointFit, JointPrediction, LatentNoise};
pub use kernel::{cov_matrix, cross_cov, matern32, matern32_grad_theta, KernelConfig, LengthScales};
pub use ledger::{RunLedger, RunRow, RunStatus};
pub use sa::{bootstrap_sobol, seed_total_effect, sobol_dispersion, sobol_mean, SobolEstimate};
pub use testbench::{simulator_by_descriptor, Simulator};
