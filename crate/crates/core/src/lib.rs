//! Panel econometrics for count outcomes with an endogenous regressor.
//!
//! The centre of the crate is the two-step control-function estimator in
//! [`cfiv`]: a within regression of the endogenous variable on excluded
//! instruments ([`linfe`]) whose residuals enter a conditional fixed-effects
//! Poisson model ([`poissonfe`]), where a robust Wald test on their
//! coefficient tests idiosyncratic endogeneity. Around it sit abnormal-value
//! event studies ([`eventstudy`]), Kaplan-Meier curves ([`survival`]), system
//! GMM for dynamic linear panels ([`dyngmm`]) and a synthetic data generator
//! with a Monte Carlo harness ([`dgp`]).

pub mod cfiv;
pub mod dgp;
pub mod dyngmm;
pub mod error;
pub mod eventstudy;
pub mod exec;
pub mod inference;
pub mod linalg;
pub mod linfe;
pub mod panel;
pub mod poissonfe;
pub mod report;
pub mod survival;

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, ErrorKind, Result};
pub use exec::Execution;
pub use inference::{wald_test, Coefficients, Covariance, WaldResult};
pub use panel::{load_panel, FeatureSpec, Panel};
