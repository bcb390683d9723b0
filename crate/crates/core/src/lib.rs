//! Bayesian triangular transport maps for spatial fields.
//!
//! Each variable, in a maximin ordering of the locations, is regressed on its
//! nearest previously ordered neighbors with a conjugate Gaussian-process
//! prior. The resulting posterior map is triangular and invertible in closed
//! form, giving densities, samples, conditional simulations and Gaussianizing
//! transforms.

pub mod apply;
pub mod dpm;
pub mod error;
pub mod eval;
pub mod fit;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod optim;
pub mod ordering;
pub mod scenarios;
pub mod special;

pub use apply::{conditional_sample, forward, gp_predict, inverse, logpdf, sample, Coefficients};
pub use dpm::{dpm_conditional_logpdf, dpm_gibbs, dpm_logpdf, dpm_logpdf_batch, dpm_sample, DpmChain, DpmConfig, DpmState, DpmTheta, Nig, RowState};
pub use error::{Error, Result};
pub use eval::{baseline_exp_cov, baseline_samp_tap, coef_diagnostics, kl_estimate, log_score, CoefDiagnostics, GaussianModel, KlEstimate, LogDensity, ScoreReport};
pub use fit::{fit_map, fit_row, fit_with_hyper, fit_with_ordering, integrated_loglik, FitConfig, FittedMap, FittedRow};
pub use kernel::{kernel_eval, row_prior, Hyper, RowPrior, Smoothness, Theta};
pub use ordering::{correlation_distance, maximin_order, nearest_neighbors, Locations, OrderConfig, Ordering};
