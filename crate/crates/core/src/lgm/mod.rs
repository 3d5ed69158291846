//! Replicate latent Gaussian model with exact Gaussian-likelihood inference
//! over a numerically integrated hyperparameter posterior.

mod data;
mod explore;
mod model;
mod summary;

pub use data::{Observation, ObservationSet, Station};
pub use explore::{
    ccd_points, density_summary, explore_density, explore_hyperposterior, restat, Design, DesignPoint, ExploreOptions,
    GridPoint, HyperPosterior, Marginal, Strategy, QUANTILE_LEVELS,
};
pub use model::{ModelOptions, Moments, PointStats, ReplicateModel, SpatialSetup, Target};
pub use summary::{
    cached_predictions, fitted_observations, mixture_marginal, posterior_marginals, predict, FitSummary, Prediction,
    SCHEMA_VERSION,
};
