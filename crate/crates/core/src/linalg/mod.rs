//! Dense linear algebra and the classical estimators built on it.

mod classify;
mod kmeans;
mod matrix;
mod pca;
mod ridge;
pub mod stats;
mod svd;

pub use classify::{
    auc, fit_standardizer, logistic_fit, logistic_objective, sigmoid, softplus, standardize,
    LogisticModel, Standardizer, LOGISTIC_GRAD_TOL, STD_FLOOR,
};
pub use kmeans::{kmeans, KMeans};
pub use matrix::{cholesky_solve, dot, Matrix};
pub use pca::{pca, Pca};
pub use ridge::{ridge_fit, RidgeFit};
pub use svd::{svd, Svd};
