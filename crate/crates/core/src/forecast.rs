//! Reconciled sample forecasts and their quantile summaries.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::quantiles_from_samples;
use crate::reconcile::{ReconciledSamples, Strategy};

/// Per-series, per-horizon reconciled samples plus derived quantiles.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet {
    pub series_ids: Vec<String>,
    pub strategy: Strategy,
    pub seed: u64,
    pub q_grid: Vec<f64>,
    /// `(n_samples, N_i, h)`
    pub samples: Array3<f64>,
    /// `(N_i, h, n_q)`
    pub quantiles: Array3<f64>,
}

impl ForecastSet {
    pub fn from_samples(series_ids: Vec<String>, samples: ReconciledSamples, q_grid: &[f64]) -> Result<Self> {
        if series_ids.len() != samples.data.dim().1 {
            return Err(Error::shape(format!(
                "{} ids for {} series",
                series_ids.len(),
                samples.data.dim().1
            )));
        }
        let quantiles = quantiles_from_samples(samples.data.view(), q_grid)?;
        Ok(Self {
            series_ids,
            strategy: samples.strategy,
            seed: samples.seed,
            q_grid: q_grid.to_vec(),
            samples: samples.data,
            quantiles,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.dim().0
    }

    pub fn n_series(&self) -> usize {
        self.samples.dim().1
    }

    pub fn horizon(&self) -> usize {
        self.samples.dim().2
    }

    /// Sample mean, `N_i × h`. Coherent whenever the samples are.
    pub fn mean(&self) -> Array2<f64> {
        self.samples.mean_axis(Axis(0)).expect("at least one sample")
    }

    pub fn summary(&self) -> ForecastSummary {
        let mean = self.mean();
        ForecastSummary {
            strategy: self.strategy,
            seed: self.seed,
            n_samples: self.n_samples(),
            horizon: self.horizon(),
            q_grid: self.q_grid.clone(),
            series: self
                .series_ids
                .iter()
                .enumerate()
                .map(|(i, id)| SeriesForecast {
                    id: id.clone(),
                    mean: mean.row(i).to_vec(),
                    quantiles: self.quantiles.index_axis(Axis(0), i).outer_iter().map(|q| q.to_vec()).collect(),
                })
                .collect(),
        }
    }
}

/// JSON form of a forecast: means and quantiles per series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSummary {
    pub strategy: Strategy,
    pub seed: u64,
    pub n_samples: usize,
    pub horizon: usize,
    pub q_grid: Vec<f64>,
    pub series: Vec<SeriesForecast>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesForecast {
    pub id: String,
    pub mean: Vec<f64>,
    /// `quantiles[τ][j]` is the `q_grid[j]` quantile at horizon step `τ`.
    pub quantiles: Vec<Vec<f64>>,
}
