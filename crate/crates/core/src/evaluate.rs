//! Probabilistic and point accuracy metrics.
//!
//! sCRPS over a set of series `I` and horizon steps is
//!
//! ```text
//! sCRPS = (2 / |I|) · Σ_{i,τ} ∫ QL_q(y_{i,τ}) dq / Σ_{i,τ} |y_{i,τ}|
//! ```
//!
//! with the quantile integral approximated by the mean quantile loss over a
//! grid of levels (99 equispaced levels by default). The denominator sums
//! over both series and horizon.

use std::fmt::Write as _;

use ndarray::{ArrayView2, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::ForecastSet;
use crate::hierarchy::HierarchySpec;
use crate::mixture::validate_q_grid;
use crate::reconcile::Strategy;

pub const DEFAULT_N_QUANTILES: usize = 99;

/// `k / (n + 1)` for `k = 1..=n`; `n = 99` gives `0.01, …, 0.99`.
pub fn q_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|k| k as f64 / (n + 1) as f64).collect()
}

pub fn default_q_grid() -> Vec<f64> {
    q_grid(DEFAULT_N_QUANTILES)
}

/// Pinball loss `q max(y - y_q, 0) + (1 - q) max(y_q - y, 0)`.
pub fn quantile_loss(y: f64, y_q: f64, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("quantile level {q} outside (0, 1)")));
    }
    Ok(pinball(y, y_q, q))
}

#[inline]
fn pinball(y: f64, y_q: f64, q: f64) -> f64 {
    q * (y - y_q).max(0.0) + (1.0 - q) * (y_q - y).max(0.0)
}

/// Grid approximation of `∫ QL_q dq`: the mean pinball loss over `q_grid`.
pub fn quantile_integral(quantiles: &[f64], y: f64, q_grid: &[f64]) -> Result<f64> {
    validate_q_grid(q_grid)?;
    if quantiles.len() != q_grid.len() {
        return Err(Error::shape(format!(
            "{} quantiles for a grid of {}",
            quantiles.len(),
            q_grid.len()
        )));
    }
    Ok(integral_unchecked(quantiles.iter().copied(), y, q_grid))
}

fn integral_unchecked(quantiles: impl Iterator<Item = f64>, y: f64, q_grid: &[f64]) -> f64 {
    quantiles.zip(q_grid).map(|(yq, &q)| pinball(y, yq, q)).sum::<f64>() / q_grid.len() as f64
}

/// sCRPS restricted to `series`, from `(N_i, h, n_q)` quantiles and `N_i × h` targets.
pub fn scrps_from_quantiles(
    quantiles: ArrayView3<'_, f64>,
    q_grid: &[f64],
    y_true: ArrayView2<'_, f64>,
    series: &[usize],
) -> Result<f64> {
    validate_q_grid(q_grid)?;
    let (n_i, h, n_q) = quantiles.dim();
    if y_true.dim() != (n_i, h) || n_q != q_grid.len() {
        return Err(Error::shape(format!(
            "quantiles {:?} do not match targets {:?} and grid of {}",
            quantiles.dim(),
            y_true.dim(),
            q_grid.len()
        )));
    }
    if series.is_empty() {
        return Err(Error::invalid("sCRPS needs at least one series"));
    }
    if let Some(&bad) = series.iter().find(|&&i| i >= n_i) {
        return Err(Error::shape(format!("series index {bad} out of range")));
    }
    if y_true.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sCRPS targets".into()));
    }
    let per_series: Vec<(f64, f64)> = series
        .par_iter()
        .map(|&i| {
            (0..h).fold((0.0, 0.0), |(num, den), t| {
                let y = y_true[[i, t]];
                let qs = quantiles.slice(ndarray::s![i, t, ..]);
                (num + integral_unchecked(qs.iter().copied(), y, q_grid), den + y.abs())
            })
        })
        .collect();
    let (num, den) = per_series.iter().fold((0.0, 0.0), |(n, d), (a, b)| (n + a, d + b));
    if den <= 0.0 {
        return Err(Error::invalid("sCRPS denominator Σ|y| is zero"));
    }
    Ok(2.0 / series.len() as f64 * num / den)
}

/// sCRPS of a forecast over all of its series.
pub fn scrps(forecast: &ForecastSet, y_true: ArrayView2<'_, f64>) -> Result<f64> {
    let all: Vec<usize> = (0..forecast.n_series()).collect();
    scrps_from_quantiles(forecast.quantiles.view(), &forecast.q_grid, y_true, &all)
}

fn mse_over(y: &ArrayView2<'_, f64>, f: &ArrayView2<'_, f64>, series: &[usize]) -> f64 {
    let h = y.ncols();
    let sum: f64 = series
        .iter()
        .flat_map(|&i| (0..h).map(move |t| (i, t)))
        .map(|(i, t)| (y[[i, t]] - f[[i, t]]).powi(2))
        .sum();
    sum / (series.len() * h) as f64
}

fn relmse_over(
    y_true: ArrayView2<'_, f64>,
    y_hat: ArrayView2<'_, f64>,
    y_naive: ArrayView2<'_, f64>,
    series: &[usize],
) -> Result<f64> {
    if y_hat.dim() != y_true.dim() || y_naive.dim() != y_true.dim() {
        return Err(Error::shape(format!(
            "relMSE inputs disagree: {:?}, {:?}, {:?}",
            y_true.dim(),
            y_hat.dim(),
            y_naive.dim()
        )));
    }
    if series.is_empty() || y_true.ncols() == 0 {
        return Err(Error::invalid("relMSE needs at least one observation"));
    }
    let naive = mse_over(&y_true, &y_naive, series);
    if !(naive > 0.0) {
        return Err(Error::invalid("relMSE undefined: naive forecast is perfect"));
    }
    Ok(mse_over(&y_true, &y_hat, series) / naive)
}

/// `MSE(y, ŷ) / MSE(y, y̌)` over all series and horizons.
pub fn relmse(y_true: ArrayView2<'_, f64>, y_hat: ArrayView2<'_, f64>, y_naive: ArrayView2<'_, f64>) -> Result<f64> {
    let all: Vec<usize> = (0..y_true.nrows()).collect();
    relmse_over(y_true, y_hat, y_naive, &all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: u32,
    pub n_series: usize,
    pub scrps: f64,
    pub relmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scrps: f64,
    pub relmse: f64,
    pub levels: Vec<LevelMetrics>,
    pub strategy: Strategy,
    pub n_samples: usize,
    pub seed: u64,
    pub q_grid: Vec<f64>,
}

impl EvaluationReport {
    /// Aligned-column text rendering.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>8} {:>12} {:>12}", "level", "series", "sCRPS", "relMSE");
        for l in &self.levels {
            let _ = writeln!(out, "{:<10} {:>8} {:>12.6} {:>12.6}", l.level, l.n_series, l.scrps, l.relmse);
        }
        let n: usize = self.levels.iter().map(|l| l.n_series).sum();
        let _ = writeln!(out, "{:<10} {:>8} {:>12.6} {:>12.6}", "overall", n, self.scrps, self.relmse);
        out
    }
}

/// Overall and per-level sCRPS / relMSE. The point forecast is the sample mean.
pub fn evaluate(
    forecast: &ForecastSet,
    y_true: ArrayView2<'_, f64>,
    spec: &HierarchySpec,
    y_naive: ArrayView2<'_, f64>,
) -> Result<EvaluationReport> {
    if forecast.n_series() != spec.n_series() {
        return Err(Error::shape(format!(
            "forecast has {} series, hierarchy has {}",
            forecast.n_series(),
            spec.n_series()
        )));
    }
    let y_hat = forecast.mean();
    let all: Vec<usize> = (0..spec.n_series()).collect();
    let q = forecast.quantiles.view();
    let scrps_all = scrps_from_quantiles(q, &forecast.q_grid, y_true, &all)?;
    let relmse_all = relmse_over(y_true, y_hat.view(), y_naive, &all)?;
    let levels = spec
        .level_groups()
        .into_iter()
        .map(|(level, idx)| {
            Ok(LevelMetrics {
                level,
                n_series: idx.len(),
                scrps: scrps_from_quantiles(q, &forecast.q_grid, y_true, &idx)?,
                relmse: relmse_over(y_true, y_hat.view(), y_naive, &idx)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport {
        scrps: scrps_all,
        relmse: relmse_all,
        levels,
        strategy: forecast.strategy,
        n_samples: forecast.n_samples(),
        seed: forecast.seed,
        q_grid: forecast.q_grid.clone(),
    })
}
