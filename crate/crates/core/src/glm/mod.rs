//! Weighted logistic regression with design construction, natural splines
//! and cluster-robust covariance.

mod design;
mod fit;
mod spline;

pub use design::{DesignSpec, Frame, Term};
pub use fit::{
    cluster_sandwich_covariance, expit, fit_logistic, log_likelihood, logit, score, FitOptions, FittedGlm,
};
pub use spline::{default_knots, quantile_sorted, spline_basis};
