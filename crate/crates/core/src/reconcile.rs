//! Reconciliation projections `P` and the coherent map `ỹ = S P ŷ`.
//!
//! Point forecasts and sample clouds are reconciled the same way: every
//! `N_i` vector is collapsed to the bottom level by `P` and re-aggregated by
//! `S`. Applying this to samples drawn from a base distribution yields a
//! coherent empirical distribution (bootstrap reconciliation).

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{HierarchySpec, SummingMatrix};

/// Tolerance on `Σ p = 1` for top-down proportions.
pub const PROPORTION_TOL: f64 = 1e-10;

/// Normal matrices with reciprocal condition number below this are singular.
pub const MIN_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    BottomUp,
    TopDown,
    #[serde(rename = "mintrace_ols")]
    MinTraceOls,
    #[serde(rename = "mintrace_wls")]
    MinTraceWls,
}

impl Strategy {
    pub const ALL: [Strategy; 4] =
        [Strategy::BottomUp, Strategy::TopDown, Strategy::MinTraceOls, Strategy::MinTraceWls];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::BottomUp => "bottom_up",
            Strategy::TopDown => "top_down",
            Strategy::MinTraceOls => "mintrace_ols",
            Strategy::MinTraceWls => "mintrace_wls",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown reconciler {s:?}")))
    }
}

/// MinTrace weighting.
#[derive(Debug, Clone, PartialEq)]
pub enum MinTraceWeights {
    /// `W = I`.
    Ols,
    /// `W = diag(residual_variances)`, one strictly positive entry per series.
    Wls(Vec<f64>),
}

/// An `N_b × N_i` reconciliation matrix with its strategy tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    data: Array2<f64>,
    strategy: Strategy,
}

impl ProjectionMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn n_bottom(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_series(&self) -> usize {
        self.data.ncols()
    }
}

/// `P = [0 | I]`.
pub fn bottom_up_projection(spec: &HierarchySpec) -> ProjectionMatrix {
    let (n_a, n_b) = (spec.n_aggregate(), spec.n_bottom());
    let mut data = Array2::zeros((n_b, n_a + n_b));
    for b in 0..n_b {
        data[[b, n_a + b]] = 1.0;
    }
    ProjectionMatrix { data, strategy: Strategy::BottomUp }
}

/// `P = [p | 0]`: the total (series 0) is split by `proportions`.
pub fn top_down_projection(spec: &HierarchySpec, proportions: &[f64]) -> Result<ProjectionMatrix> {
    let n_b = spec.n_bottom();
    if proportions.len() != n_b {
        return Err(Error::shape(format!(
            "expected {n_b} proportions, got {}",
            proportions.len()
        )));
    }
    match spec.aggregates().first() {
        Some(top) if top.children.len() == n_b => {}
        _ => {
            return Err(Error::invalid(
                "top-down reconciliation needs the total as the first series",
            ))
        }
    }
    if let Some(p) = proportions.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid(format!("negative or non-finite proportion {p}")));
    }
    let total: f64 = proportions.iter().sum();
    if (total - 1.0).abs() > PROPORTION_TOL {
        return Err(Error::invalid(format!("proportions must sum to 1, got {total}")));
    }
    let mut data = Array2::zeros((n_b, spec.n_series()));
    data.column_mut(0).assign(&ArrayView1::from(proportions));
    Ok(ProjectionMatrix { data, strategy: Strategy::TopDown })
}

/// Average historical shares `p_b = mean_t y_{b,t} / Σ_b' y_{b',t}` from an `N_b × T` history.
pub fn historical_proportions(spec: &HierarchySpec, y_history: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if y_history.nrows() != spec.n_bottom() {
        return Err(Error::shape(format!(
            "history has {} rows, hierarchy has {} bottoms",
            y_history.nrows(),
            spec.n_bottom()
        )));
    }
    let t_len = y_history.ncols();
    if t_len == 0 {
        return Err(Error::invalid("history is empty"));
    }
    let mut acc = vec![0.0; spec.n_bottom()];
    for (t, col) in y_history.axis_iter(Axis(1)).enumerate() {
        let total = col.sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Data(format!("time step {t} has non-positive total {total}")));
        }
        for (a, v) in acc.iter_mut().zip(col.iter()) {
            *a += v / total;
        }
    }
    Ok(acc.into_iter().map(|a| a / t_len as f64).collect())
}

/// Trace-minimizing projection `P = (Sᵀ W⁻¹ S)⁻¹ Sᵀ W⁻¹`.
pub fn min_trace_projection(spec: &HierarchySpec, weights: &MinTraceWeights) -> Result<ProjectionMatrix> {
    let s = spec.summing_matrix();
    let (n_i, n_b) = (s.n_series(), s.n_bottom());
    let (inv_w, strategy) = match weights {
        MinTraceWeights::Ols => (vec![1.0; n_i], Strategy::MinTraceOls),
        MinTraceWeights::Wls(var) => {
            if var.len() != n_i {
                return Err(Error::shape(format!(
                    "expected {n_i} residual variances, got {}",
                    var.len()
                )));
            }
            if let Some(v) = var.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                return Err(Error::invalid(format!("residual variance must be positive, got {v}")));
            }
            (var.iter().map(|v| 1.0 / v).collect(), Strategy::MinTraceWls)
        }
    };

    let s = s.view();
    // R = Sᵀ W⁻¹ and M = R S
    let r = DMatrix::from_fn(n_b, n_i, |b, i| s[[i, b]] * inv_w[i]);
    let s_mat = DMatrix::from_fn(n_i, n_b, |i, b| s[[i, b]]);
    let normal = &r * &s_mat;

    let lu = normal.clone().full_piv_lu();
    let inverse = lu
        .try_inverse()
        .ok_or_else(|| Error::Singular("Sᵀ W⁻¹ S is not invertible".into()))?;
    let rcond = 1.0 / (one_norm(&normal) * one_norm(&inverse));
    if !(rcond >= MIN_RCOND) {
        return Err(Error::Singular(format!("Sᵀ W⁻¹ S has reciprocal condition {rcond:e}")));
    }
    let p = inverse * r;
    let data = Array2::from_shape_fn((n_b, n_i), |(b, i)| p[(b, i)]);
    Ok(ProjectionMatrix { data, strategy })
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn check_conformal(s: &SummingMatrix, p: &ProjectionMatrix) -> Result<()> {
    if s.n_bottom() != p.n_bottom() || s.n_series() != p.n_series() {
        return Err(Error::shape(format!(
            "S is {}x{} but P is {}x{}",
            s.n_series(),
            s.n_bottom(),
            p.n_bottom(),
            p.n_series()
        )));
    }
    Ok(())
}

/// Maps one `N_i` vector through `S P`, writing into `out`.
///
/// The bottom vector is formed first and aggregated row by row in column
/// order, so aggregate entries are exactly the floating-point sums of the
/// bottom entries.
fn reconcile_vector(s: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>, y: &[f64], bottom: &mut [f64], out: &mut [f64]) {
    for (b, row) in p.outer_iter().enumerate() {
        bottom[b] = row.iter().zip(y).map(|(w, v)| w * v).sum();
    }
    for (i, row) in s.outer_iter().enumerate() {
        let mut acc = 0.0;
        for (&w, &v) in row.iter().zip(bottom.iter()) {
            if w != 0.0 {
                acc += w * v;
            }
        }
        out[i] = acc;
    }
}

/// Reconciles point forecasts: `y_hat` is `N_i × h`, one column per horizon.
pub fn reconcile_points(s: &SummingMatrix, p: &ProjectionMatrix, y_hat: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_conformal(s, p)?;
    if y_hat.nrows() != s.n_series() {
        return Err(Error::shape(format!(
            "expected {} rows, got {}",
            s.n_series(),
            y_hat.nrows()
        )));
    }
    let mut out = Array2::zeros(y_hat.raw_dim());
    let mut bottom = vec![0.0; s.n_bottom()];
    let mut buf = vec![0.0; s.n_series()];
    for (tau, col) in y_hat.axis_iter(Axis(1)).enumerate() {
        let y: Vec<f64> = col.to_vec();
        reconcile_vector(s.view(), p.view(), &y, &mut bottom, &mut buf);
        out.column_mut(tau).assign(&ArrayView1::from(&buf[..]));
    }
    Ok(out)
}

/// Vector form of [`reconcile_points`].
pub fn reconcile_point(s: &SummingMatrix, p: &ProjectionMatrix, y_hat: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let col = y_hat.insert_axis(Axis(1));
    Ok(reconcile_points(s, p, col)?.column(0).to_owned())
}

/// Coherent samples of shape `(n_samples, N_i, horizon)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconciledSamples {
    pub data: Array3<f64>,
    pub strategy: Strategy,
    pub seed: u64,
}

impl ReconciledSamples {
    /// Largest coherence violation relative to `1 + max|sample|` over all slices.
    pub fn max_relative_violation(&self, spec: &HierarchySpec) -> Result<f64> {
        max_relative_violation(spec, self.data.view())
    }
}

pub(crate) fn max_relative_violation(spec: &HierarchySpec, data: ArrayView3<'_, f64>) -> Result<f64> {
    let mut worst = 0.0f64;
    for sample in data.outer_iter() {
        for col in sample.axis_iter(Axis(1)) {
            let scale = 1.0 + col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            worst = worst.max(spec.coherence_residual(col)? / scale);
        }
    }
    Ok(worst)
}

/// Bootstrap reconciliation: maps every `N_i` slice of `base` (`n × N_i × h`) through `S P`.
pub fn reconcile_samples(
    s: &SummingMatrix,
    p: &ProjectionMatrix,
    base: ArrayView3<'_, f64>,
    seed: u64,
) -> Result<ReconciledSamples> {
    check_conformal(s, p)?;
    let (n, n_i, h) = base.dim();
    if n_i != s.n_series() {
        return Err(Error::shape(format!("samples have {n_i} series, S has {}", s.n_series())));
    }
    if base.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("base samples contain non-finite values".into()));
    }
    let base = base.as_standard_layout();
    let src = base.as_slice().expect("standard layout");
    let mut data = vec![0.0; n * n_i * h];
    let (s_view, p_view) = (s.view(), p.view());
    data.par_chunks_mut((n_i * h).max(1))
        .zip(src.par_chunks((n_i * h).max(1)))
        .for_each(|(dst, src)| {
            let mut bottom = vec![0.0; s_view.ncols()];
            let mut y = vec![0.0; n_i];
            let mut out = vec![0.0; n_i];
            for tau in 0..h {
                for i in 0..n_i {
                    y[i] = src[i * h + tau];
                }
                reconcile_vector(s_view, p_view, &y, &mut bottom, &mut out);
                for i in 0..n_i {
                    dst[i * h + tau] = out[i];
                }
            }
        });
    let data = Array3::from_shape_vec((n, n_i, h), data).expect("shape matches buffer");
    Ok(ReconciledSamples { data, strategy: p.strategy(), seed })
}

/// Builds the projection for `strategy` from the inputs it needs.
///
/// `bottom_history` (`N_b × T`) feeds top-down proportions; `residual_variances`
/// (`N_i`) feeds MinTrace WLS.
pub fn build_projection(
    spec: &HierarchySpec,
    strategy: Strategy,
    bottom_history: Option<ArrayView2<'_, f64>>,
    residual_variances: Option<&[f64]>,
) -> Result<ProjectionMatrix> {
    match strategy {
        Strategy::BottomUp => Ok(bottom_up_projection(spec)),
        Strategy::TopDown => {
            let hist = bottom_history
                .ok_or_else(|| Error::invalid("top-down reconciliation needs a bottom-level history"))?;
            top_down_projection(spec, &historical_proportions(spec, hist)?)
        }
        Strategy::MinTraceOls => min_trace_projection(spec, &MinTraceWeights::Ols),
        Strategy::MinTraceWls => {
            let var = residual_variances
                .ok_or_else(|| Error::invalid("MinTrace WLS needs residual variances"))?;
            min_trace_projection(spec, &MinTraceWeights::Wls(var.to_vec()))
        }
    }
}
