//! Probabilistic coherent forecasting for hierarchical time series.
//!
//! A shared network maps normalized input windows to a Gaussian mixture over
//! all series and horizon steps; samples from the mixture are reconciled onto
//! the coherent subspace and scored with sCRPS.

pub mod ablation;
pub mod error;
pub mod evaluate;
pub mod forecast;
pub mod forecaster;
pub mod hierarchy;
pub mod mixture;
pub mod pipeline;
pub mod reconcile;
pub mod scaling;

pub use error::{Error, Result};
pub use evaluate::{default_q_grid, evaluate, quantile_loss, relmse, scrps, EvaluationReport, LevelMetrics};
pub use forecast::{ForecastSet, ForecastSummary};
pub use hierarchy::{HierarchySpec, SummingMatrix};
pub use mixture::MixtureParams;
pub use reconcile::{build_projection, reconcile_samples, ProjectionMatrix, ReconciledSamples, Strategy};
pub use scaling::{RevinAffine, ScalerKind, ScalerStats};
