//! Covariate-adjusted generalized latent factor models.
//!
//! The crate fits models of the form
//!
//! ```text
//! w_ij = γ_jᵀ U_i + β_jᵀ X_i,     Y_ij ~ p(· | w_ij)
//! ```
//!
//! by joint maximum likelihood, maps the unconstrained estimate to the unique
//! representative that has centered, orthogonalized factors and minimal-ℓ1
//! covariate effects, and computes sandwich standard errors, Wald tests and
//! confidence intervals for covariate (DIF) effects, loadings and factors.
//!
//! Module map:
//!
//! * [`model`]: data, parameters and per-cell log-likelihoods.
//! * [`estimation`]: alternating block-Newton maximization with box constraints.
//! * [`identification`]: ℓ1 rotation, scaling and canonical finalization.
//! * [`inference`]: covariance estimators and tests.
//! * [`simulation`]: data-generating process and replicated studies.
//! * [`cli_io`]: file formats and command implementations behind the `glfm` binary.

pub mod cli_io;
pub mod error;
pub mod estimation;
pub mod identification;
pub mod inference;
mod linalg;
pub mod model;
pub mod par;
pub mod simulation;
pub mod special;

pub use error::{Error, Result};
pub use estimation::{fit_joint_mle, FitConfig, RawFit};
pub use identification::{finalize, fit_canonical, CanonicalFit, TransformPair};
pub use inference::{infer, InferenceReport};

pub use model::{Dataset, FamilyKind, LinkFamily, LoglikTriple, ParameterSet};
pub use par::Execution;
pub use simulation::{run_study, SimConfig, StudyReport};

