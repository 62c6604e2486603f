//! Multivariate Gaussian mixture forecast distribution.
//!
//! A single latent component index `κ` is shared by every series and horizon:
//!
//! ```text
//! p(y) = Σ_κ w_κ Π_{ι,τ} N(y_{ι,τ} | μ_{ι,κ,τ}, σ_{ι,κ,τ})
//! ```
//!
//! so series are conditionally independent given `κ` while the spread of the
//! component means induces a rank `N_k - 1` cross-series covariance. `σ` is a
//! standard deviation throughout. All densities are evaluated in log space.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Scales below this are raised to it when parameters are constructed.
pub const MIN_SCALE: f64 = 1e-6;

/// Tolerance on `Σ w = 1`.
pub const WEIGHT_TOL: f64 = 1e-10;

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8; // 0.5 * ln(2π)

#[inline]
pub(crate) fn gaussian_logpdf(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    -HALF_LN_TAU - sigma.ln() - 0.5 * z * z
}

/// `log Σ exp(x)`, with an empty or all `-inf` input giving `-inf`.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mixture weights plus `(series, component, horizon)` locations and scales.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    weights: Vec<f64>,
    locations: Array3<f64>,
    scales: Array3<f64>,
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, locations: Array3<f64>, mut scales: Array3<f64>) -> Result<Self> {
        let n_k = weights.len();
        if n_k == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if locations.dim() != scales.dim() {
            return Err(Error::shape(format!(
                "locations {:?} and scales {:?} differ",
                locations.dim(),
                scales.dim()
            )));
        }
        if locations.dim().1 != n_k {
            return Err(Error::shape(format!(
                "{} weights but {} components in locations",
                n_k,
                locations.dim().1
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        if locations.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("mixture locations".into()));
        }
        if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("mixture scales must be finite and positive"));
        }
        scales.mapv_inplace(|s| s.max(MIN_SCALE));
        Ok(Self { weights, locations, scales })
    }

    pub fn n_series(&self) -> usize {
        self.locations.dim().0
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn horizon(&self) -> usize {
        self.locations.dim().2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn locations(&self) -> ArrayView3<'_, f64> {
        self.locations.view()
    }

    pub fn scales(&self) -> ArrayView3<'_, f64> {
        self.scales.view()
    }

    /// The mixture restricted to the listed series (same weights).
    pub fn restrict(&self, series: &[usize]) -> Result<Self> {
        if let Some(&bad) = series.iter().find(|&&i| i >= self.n_series()) {
            return Err(Error::shape(format!("series index {bad} out of range")));
        }
        Ok(Self {
            weights: self.weights.clone(),
            locations: self.locations.select(Axis(0), series),
            scales: self.scales.select(Axis(0), series),
        })
    }

    fn check_target(&self, y: &ArrayView2<'_, f64>) -> Result<()> {
        if y.dim() != (self.n_series(), self.horizon()) {
            return Err(Error::shape(format!(
                "target is {:?}, mixture covers {:?}",
                y.dim(),
                (self.n_series(), self.horizon())
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("target values".into()));
        }
        Ok(())
    }

    /// Per-component joint log-likelihood `log w_κ + Σ_{ι,τ} log N(y | μ, σ)`.
    pub fn component_log_likelihoods(&self, y: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check_target(&y)?;
        let mut out: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        for ((i, k, t), &mu) in self.locations.indexed_iter() {
            out[k] += gaussian_logpdf(y[[i, t]], mu, self.scales[[i, k, t]]);
        }
        Ok(out)
    }

    /// Negative log of the joint mixture density at `y` (`N_i × h`).
    pub fn joint_nll(&self, y: ArrayView2<'_, f64>) -> Result<f64> {
        let ll = self.component_log_likelihoods(y)?;
        let nll = -log_sum_exp(&ll);
        if !nll.is_finite() {
            return Err(Error::NonFinite(format!("joint negative log-likelihood is {nll}")));
        }
        Ok(nll)
    }

    /// Composite NLL: sum of joint NLLs over the blocks of a partition of the series.
    pub fn composite_nll(&self, y: ArrayView2<'_, f64>, batches: &[Vec<usize>]) -> Result<f64> {
        self.check_target(&y)?;
        check_partition(batches, self.n_series())?;
        let mut total = 0.0;
        for batch in batches {
            let part = self.restrict(batch)?;
            total += part.joint_nll(y.select(Axis(0), batch).view())?;
        }
        Ok(total)
    }

    /// Composite NLL with every series in its own block.
    pub fn univariate_nll(&self, y: ArrayView2<'_, f64>) -> Result<f64> {
        let singletons: Vec<Vec<usize>> = (0..self.n_series()).map(|i| vec![i]).collect();
        self.composite_nll(y, &singletons)
    }

    /// Log density of the `(series, horizon)` marginal, a univariate mixture.
    pub fn marginal_logpdf(&self, series: usize, horizon: usize, y: f64) -> Result<f64> {
        if series >= self.n_series() || horizon >= self.horizon() {
            return Err(Error::shape(format!(
                "index ({series}, {horizon}) out of range for {:?}",
                (self.n_series(), self.horizon())
            )));
        }
        let terms: Vec<f64> = (0..self.n_components())
            .map(|k| {
                self.weights[k].ln()
                    + gaussian_logpdf(y, self.locations[[series, k, horizon]], self.scales[[series, k, horizon]])
            })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Mixture mean `Σ_κ w_κ μ_κ` as an `N_i × h` array.
    pub fn mean(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_series(), self.horizon()));
        for (k, &w) in self.weights.iter().enumerate() {
            out.scaled_add(w, &self.locations.slice(s![.., k, ..]));
        }
        out
    }

    /// Rank `≤ N_k - 1` spread term `Σ_κ w_κ (μ_κ - μ̄)(μ_κ - μ̄)ᵀ` at horizon `tau`.
    pub fn mean_spread(&self, tau: usize) -> Array2<f64> {
        let n = self.n_series();
        let mu = self.locations.slice(s![.., .., tau]);
        let bar = mu.dot(&ndarray::ArrayView1::from(&self.weights[..]));
        let mut out = Array2::zeros((n, n));
        for (k, &w) in self.weights.iter().enumerate() {
            let d = &mu.column(k) - &bar;
            for i in 0..n {
                for j in 0..n {
                    out[[i, j]] += w * d[i] * d[j];
                }
            }
        }
        out
    }

    /// Cross-series covariance at horizon `tau`: `diag(Σ_κ w_κ σ²) + mean_spread`.
    pub fn covariance(&self, tau: usize) -> Array2<f64> {
        let mut out = self.mean_spread(tau);
        for i in 0..self.n_series() {
            out[[i, i]] += self
                .weights
                .iter()
                .enumerate()
                .map(|(k, w)| w * self.scales[[i, k, tau]].powi(2))
                .sum::<f64>();
        }
        out
    }

    /// Ancestral sampling into an `(n, N_i, h)` array.
    ///
    /// One component is drawn per sample and shared across all series and
    /// horizons. The output depends only on `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Array3<f64>> {
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n_i, _, h) = self.locations.dim();
        let cumulative: Vec<f64> = self
            .weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        let total = *cumulative.last().expect("non-empty weights");
        let mut out = Array3::zeros((n, n_i, h));
        for mut slab in out.outer_iter_mut() {
            let u: f64 = rng.random::<f64>() * total;
            let k = cumulative
                .iter()
                .position(|&c| u < c)
                .unwrap_or(cumulative.len() - 1);
            for ((i, t), v) in slab.indexed_iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = self.locations[[i, k, t]] + self.scales[[i, k, t]] * z;
            }
        }
        Ok(out)
    }
}

/// Composite NLL over explicitly supplied per-block parameters and targets.
///
/// `batches` must partition `0..n_series`; block `b` pairs `params_by_batch[b]`
/// (covering `batches[b].len()` series) with `y_by_batch[b]`.
pub fn composite_nll(
    params_by_batch: &[MixtureParams],
    y_by_batch: &[ArrayView2<'_, f64>],
    batches: &[Vec<usize>],
    n_series: usize,
) -> Result<f64> {
    if params_by_batch.len() != batches.len() || y_by_batch.len() != batches.len() {
        return Err(Error::shape("one parameter set and target per batch is required"));
    }
    check_partition(batches, n_series)?;
    let mut total = 0.0;
    for ((params, y), batch) in params_by_batch.iter().zip(y_by_batch).zip(batches) {
        if params.n_series() != batch.len() {
            return Err(Error::shape(format!(
                "batch of {} series paired with parameters for {}",
                batch.len(),
                params.n_series()
            )));
        }
        total += params.joint_nll(y.view())?;
    }
    Ok(total)
}

fn check_partition(batches: &[Vec<usize>], n_series: usize) -> Result<()> {
    let mut seen = vec![false; n_series];
    for &i in batches.iter().flatten() {
        if i >= n_series {
            return Err(Error::invalid(format!("batch index {i} out of range")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid(format!("series {i} appears in more than one batch")));
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!("series {missing} is in no batch")));
    }
    Ok(())
}

/// Empirical quantiles of `(n, N_i, h)` samples, returned as `(N_i, h, n_q)`.
///
/// Uses linear interpolation between order statistics at position `q (n - 1)`.
pub fn quantiles_from_samples(samples: ArrayView3<'_, f64>, q_grid: &[f64]) -> Result<Array3<f64>> {
    let (n, n_i, h) = samples.dim();
    if n == 0 {
        return Err(Error::invalid("no samples to take quantiles from"));
    }
    validate_q_grid(q_grid)?;
    let mut out = Array3::zeros((n_i, h, q_grid.len()));
    let mut buf = vec![0.0; n];
    for i in 0..n_i {
        for t in 0..h {
            for (dst, v) in buf.iter_mut().zip(samples.slice(s![.., i, t])) {
                *dst = *v;
            }
            buf.sort_unstable_by(f64::total_cmp);
            for (j, &q) in q_grid.iter().enumerate() {
                out[[i, t, j]] = interpolate_sorted(&buf, q);
            }
        }
    }
    Ok(out)
}

pub(crate) fn interpolate_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn validate_q_grid(q_grid: &[f64]) -> Result<()> {
    if q_grid.is_empty() {
        return Err(Error::invalid("quantile grid is empty"));
    }
    if q_grid.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
        return Err(Error::invalid("quantile levels must lie in (0, 1)"));
    }
    if q_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("quantile grid must be ascending"));
    }
    Ok(())
}
