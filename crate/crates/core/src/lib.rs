//! Poisson factor models for forecasting and within-day updating of
//! arrival-rate profiles, with square-root staffing, simulation generators
//! and a rolling evaluation harness.

pub mod aml;
pub mod error;
pub mod eval;
pub mod glm;
pub mod io;
pub mod linalg;
pub mod model;
pub mod scores;
pub mod simgen;
pub mod staffing;
pub mod stats;
pub mod update;

pub use aml::{deviance_reduction_table, fit_factor_model, AmlConfig, DevianceReductionTable};
pub use error::{Error, Result};
pub use model::{
    apply_factor_model, poisson_deviance, poisson_loglik, CountMatrix, FactorModel, Link,
    Normalization, RateProfile, Weekday,
};
pub use scores::{fit_score_model, forecast_rates, forecast_scores, RateForecast, ScoreForecastModel};
pub use staffing::{staffing_level, StaffingParams, StaffingPlan};
pub use update::{penalized_update, PartialDay, PenalizedUpdateConfig, UpdatedForecast};
