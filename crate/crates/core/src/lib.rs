//! Semi-parametric empirical best prediction of small-area proportions.
//!
//! The area random intercept of a mixed logistic model is left unspecified and
//! estimated by a discrete mixing distribution (NPML via EM). On top of the
//! fit the crate provides predictions of area proportions, an analytic MSE
//! with a second-order bias correction, Gaussian-effect baselines and a
//! simulation harness.

pub mod baselines;
pub mod em;
pub mod error;
pub mod glm;
pub mod gof;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod model;
pub mod mse;
pub mod predict;
pub mod quadrature;
pub mod seed;
pub mod sim;

pub use em::{fit, select_g, Criterion, EmConfig, FitResult};
pub use error::{Error, Result};
pub use inference::{CovarianceKind, InformationMatrices};
pub use model::{AreaSample, Dataset, MixtureParams, PopulationCrossTab, UnitRecord};
pub use mse::{mse_report, AreaMse, MseOptions};
pub use predict::{predict_areas, AreaPrediction};
