//! Generalized latent factor models for multivariate longitudinal data.
//!
//! Responses `y_ijt` of `N` persons on `J` items over `T` time points follow
//! exponential-family distributions with natural parameter
//! `η_ijt = γ_jt + a_jᵀθ_i + β_jᵀx_i`, plus optional time-dependent
//! covariates, time-varying loadings and coefficients, or linear-in-time
//! intercepts. Persons' factors `θ_i` and every item parameter are estimated
//! jointly by alternating projected Newton steps.
//!
//! The crate covers estimation ([`estimator`]), SVD starting values
//! ([`init`]), identifiability transforms ([`normalize`]), choice of the
//! number of factors ([`selection`]), Wald and permutation inference with
//! FDR control ([`inference`]), next-period prediction and recommendation
//! ([`predict`]) and a simulation harness ([`simulate`]).

pub mod error;
pub mod estimator;
pub mod family;
pub mod inference;
pub mod init;
mod linalg;
pub mod model;
pub mod normalize;
pub mod predict;
pub mod selection;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
pub use estimator::{fit, prox, FitOptions, FitResult};
pub use family::{family_b, Family};
pub use inference::InferenceReport;
pub use init::{random_init, svd_init, InitOptions};
pub use model::{
    build_design_row, joint_loglik, predict_natural_params, Dataset, DesignRow, Layout, ModelSpec,
    ParameterSet, Variant,
};
pub use normalize::{normalize_beta_only, normalize_full};
pub use predict::{RecommendationConfig, Strategy};
pub use selection::{select_k, SelectOptions, SelectionResult};
pub use simulate::{MetricReport, SimConfig, SimTruth};
