//! Temporal normalization of input windows and inverse recomposition of
//! mixture output parameters.
//!
//! Statistics are computed per `(series, channel)` over the time axis of the
//! input window only. The network works in the normalized space; its outputs
//! are mapped back by `μ = b ω_μ + a`, `σ = b ω_σ`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::MixtureParams;

/// Scales below this are treated as degenerate and replaced by 1.
pub const DEGENERATE_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalerKind {
    MinMax,
    Standard,
    Robust,
    Revin,
}

impl ScalerKind {
    pub const ALL: [ScalerKind; 4] = [ScalerKind::MinMax, ScalerKind::Standard, ScalerKind::Robust, ScalerKind::Revin];

    pub fn as_str(self) -> &'static str {
        match self {
            ScalerKind::MinMax => "minmax",
            ScalerKind::Standard => "standard",
            ScalerKind::Robust => "robust",
            ScalerKind::Revin => "revin",
        }
    }
}

impl fmt::Display for ScalerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScalerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScalerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scaler {s:?}")))
    }
}

/// Learnable affine applied after standardization by the `revin` scaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevinAffine {
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
}

impl RevinAffine {
    pub fn identity(n_channels: usize) -> Self {
        Self { lambda: vec![1.0; n_channels], beta: vec![0.0; n_channels] }
    }
}

/// Per-`(series, channel)` shift `a` and strictly positive scale `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerStats {
    pub kind: ScalerKind,
    pub shift: Array2<f64>,
    pub scale: Array2<f64>,
}

impl ScalerStats {
    pub fn n_series(&self) -> usize {
        self.shift.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.shift.ncols()
    }
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn median(values: &[f64]) -> f64 {
    let mut buf = values.to_vec();
    buf.sort_unstable_by(f64::total_cmp);
    median_of_sorted(&buf)
}

/// Shift and scale of a single window. `revin` uses the standard statistics.
pub fn fit_window(values: &[f64], kind: ScalerKind) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("cannot fit a scaler on an empty window"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("scaler input".into()));
    }
    let n = values.len() as f64;
    let (a, b) = match kind {
        ScalerKind::MinMax => {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi - lo)
        }
        ScalerKind::Standard | ScalerKind::Revin => {
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        }
        ScalerKind::Robust => {
            let med = median(values);
            let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
            (med, median(&dev))
        }
    };
    Ok((a, if b < DEGENERATE_SCALE { 1.0 } else { b }))
}

/// Fits statistics over the time axis of `x` (`series × t × channel`).
pub fn fit_scaler(x: ArrayView3<'_, f64>, kind: ScalerKind) -> Result<ScalerStats> {
    let (n_s, t, n_c) = x.dim();
    if t == 0 {
        return Err(Error::invalid("scaler history has no time steps"));
    }
    let mut shift = Array2::zeros((n_s, n_c));
    let mut scale = Array2::zeros((n_s, n_c));
    for s in 0..n_s {
        for c in 0..n_c {
            let window: Vec<f64> = x.slice(ndarray::s![s, .., c]).to_vec();
            let (a, b) = fit_window(&window, kind)?;
            shift[[s, c]] = a;
            scale[[s, c]] = b;
        }
    }
    Ok(ScalerStats { kind, shift, scale })
}

fn check_shape(x: &ArrayView3<'_, f64>, stats: &ScalerStats) -> Result<()> {
    let (n_s, _, n_c) = x.dim();
    if (n_s, n_c) != stats.shift.dim() {
        return Err(Error::shape(format!(
            "input has {n_s} series × {n_c} channels, stats cover {:?}",
            stats.shift.dim()
        )));
    }
    Ok(())
}

fn revin_for(stats: &ScalerStats, revin: Option<&RevinAffine>) -> Result<RevinAffine> {
    let affine = match (stats.kind, revin) {
        (ScalerKind::Revin, Some(r)) => r.clone(),
        _ => RevinAffine::identity(stats.n_channels()),
    };
    if affine.lambda.len() != stats.n_channels() || affine.beta.len() != stats.n_channels() {
        return Err(Error::shape("revin affine must have one λ, β pair per channel"));
    }
    Ok(affine)
}

/// `(x - a) / b`, followed by `λ (·) + β` for `revin` stats.
pub fn normalize(x: ArrayView3<'_, f64>, stats: &ScalerStats, revin: Option<&RevinAffine>) -> Result<Array3<f64>> {
    check_shape(&x, stats)?;
    let affine = revin_for(stats, revin)?;
    let mut out = x.to_owned();
    for ((s, _, c), v) in out.indexed_iter_mut() {
        *v = affine.lambda[c] * (*v - stats.shift[[s, c]]) / stats.scale[[s, c]] + affine.beta[c];
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(x: ArrayView3<'_, f64>, stats: &ScalerStats, revin: Option<&RevinAffine>) -> Result<Array3<f64>> {
    check_shape(&x, stats)?;
    let affine = revin_for(stats, revin)?;
    let mut out = x.to_owned();
    for ((s, _, c), v) in out.indexed_iter_mut() {
        *v = stats.scale[[s, c]] * (*v - affine.beta[c]) / affine.lambda[c] + stats.shift[[s, c]];
    }
    Ok(out)
}

/// Maps normalized-space mixture parameters back to data units.
///
/// Series `i` of `omega` uses the statistics of series `i`, channel
/// `channel`. Locations become `b ω + a` and scales `b ω_σ`; for `revin` the
/// affine is inverted first (`(ω - β) / λ` for locations, `ω_σ / |λ|` for
/// scales). Weights are unchanged.
pub fn denormalize_mixture(
    omega: &MixtureParams,
    stats: &ScalerStats,
    channel: usize,
    revin: Option<&RevinAffine>,
) -> Result<MixtureParams> {
    if omega.n_series() != stats.n_series() || channel >= stats.n_channels() {
        return Err(Error::shape(format!(
            "mixture covers {} series, stats cover {} series × {} channels",
            omega.n_series(),
            stats.n_series(),
            stats.n_channels()
        )));
    }
    let affine = revin_for(stats, revin)?;
    let (lam, beta) = (affine.lambda[channel], affine.beta[channel]);
    let mut loc = omega.locations().to_owned();
    let mut scl = omega.scales().to_owned();
    for ((i, _, _), v) in loc.indexed_iter_mut() {
        *v = stats.scale[[i, channel]] * ((*v - beta) / lam) + stats.shift[[i, channel]];
    }
    for ((i, _, _), v) in scl.indexed_iter_mut() {
        *v = stats.scale[[i, channel]] * (*v / lam.abs());
    }
    MixtureParams::new(omega.weights().to_vec(), loc, scl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::*;

    fn series(vals: &[f64]) -> Array3<f64> {
        Array::from_shape_vec((1, vals.len(), 1), vals.to_vec()).unwrap()
    }

    #[test]
    fn robust_example() {
        let x = series(&[1., 2., 3., 4., 100.]);
        let stats = fit_scaler(x.view(), ScalerKind::Robust).unwrap();
        assert_eq!((stats.shift[[0, 0]], stats.scale[[0, 0]]), (3.0, 1.0));
        let z = normalize(x.view(), &stats, None).unwrap();
        assert_eq!(z.into_raw_vec_and_offset().0, vec![-2., -1., 0., 1., 97.]);
        let five = normalize(series(&[5.0]).view(), &stats, None).unwrap();
        assert_eq!(five[[0, 0, 0]], 2.0);
    }

    #[test]
    fn standard_on_unit_sequence_is_identity() {
        let x = series(&[1., -1., 1., -1.]);
        let stats = fit_scaler(x.view(), ScalerKind::Standard).unwrap();
        assert!(stats.shift[[0, 0]].abs() < 1e-12 && (stats.scale[[0, 0]] - 1.0).abs() < 1e-12);
        let z = normalize(x.view(), &stats, None).unwrap();
        assert!((&z - &x).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn degenerate_minmax_maps_to_zero() {
        let x = series(&[4.0; 6]);
        let stats = fit_scaler(x.view(), ScalerKind::MinMax).unwrap();
        assert_eq!((stats.shift[[0, 0]], stats.scale[[0, 0]]), (4.0, 1.0));
        assert!(normalize(x.view(), &stats, None).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn minmax_endpoints() {
        let x = series(&[3., -2., 7., 0.5]);
        let stats = fit_scaler(x.view(), ScalerKind::MinMax).unwrap();
        let z = normalize(series(&[-2., 7.]).view(), &stats, None).unwrap();
        assert_eq!((z[[0, 0, 0]], z[[0, 1, 0]]), (0.0, 1.0));
        let at_shift = normalize(series(&[-2.0; 3]).view(), &stats, None).unwrap();
        assert!(at_shift.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stats_are_per_series_and_channel() {
        let x = Array::from_shape_fn((2, 5, 2), |(s, t, c)| (s * 10 + c * 100) as f64 + t as f64);
        let stats = fit_scaler(x.view(), ScalerKind::Standard).unwrap();
        assert_eq!(stats.shift, array![[2.0, 102.0], [12.0, 112.0]]);
        assert!(stats.scale.iter().all(|&b| (b - 2f64.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_scaler(series(&[1.0, f64::NAN]).view(), ScalerKind::Robust).is_err());
        assert!(fit_scaler(Array3::zeros((1, 0, 1)).view(), ScalerKind::Robust).is_err());
        let stats = fit_scaler(series(&[1.0, 2.0]).view(), ScalerKind::Robust).unwrap();
        assert!(normalize(Array3::zeros((2, 3, 1)).view(), &stats, None).is_err());
    }

    fn single(mu: f64, sigma: f64) -> MixtureParams {
        MixtureParams::new(vec![1.0], array![[[mu]]], array![[[sigma]]]).unwrap()
    }

    fn stats_of(a: f64, b: f64, kind: ScalerKind) -> ScalerStats {
        ScalerStats { kind, shift: array![[a]], scale: array![[b]] }
    }

    #[test]
    fn denormalize_examples() {
        let id = denormalize_mixture(&single(0.3, 1.7), &stats_of(0.0, 1.0, ScalerKind::Robust), 0, None).unwrap();
        assert_eq!((id.locations()[[0, 0, 0]], id.scales()[[0, 0, 0]]), (0.3, 1.7));

        let out = denormalize_mixture(&single(1.0, 0.5), &stats_of(10.0, 2.0, ScalerKind::Standard), 0, None).unwrap();
        assert_eq!((out.locations()[[0, 0, 0]], out.scales()[[0, 0, 0]]), (12.0, 1.0));

        // fit-then-normalize a Gaussian's parameters and map them back
        let (mu, sigma) = (42.5, 3.25);
        let x = series(&[40.0, 41.0, 45.0, 47.0, 39.5]);
        let stats = fit_scaler(x.view(), ScalerKind::Robust).unwrap();
        let (a, b) = (stats.shift[[0, 0]], stats.scale[[0, 0]]);
        let back = denormalize_mixture(&single((mu - a) / b, sigma / b), &stats, 0, None).unwrap();
        assert!((back.locations()[[0, 0, 0]] - mu).abs() < 1e-12);
        assert!((back.scales()[[0, 0, 0]] - sigma).abs() < 1e-12);
    }

    #[test]
    fn revin_affine_is_inverted() {
        let stats = stats_of(5.0, 2.0, ScalerKind::Revin);
        let affine = RevinAffine { lambda: vec![-0.5], beta: vec![0.25] };
        let out = denormalize_mixture(&single(1.25, 0.5), &stats, 0, Some(&affine)).unwrap();
        // ω' = (1.25 - 0.25) / -0.5 = -2, σ' = 0.5 / 0.5 = 1
        assert_eq!(out.locations()[[0, 0, 0]], 2.0 * -2.0 + 5.0);
        assert_eq!(out.scales()[[0, 0, 0]], 2.0);
        // the affine is ignored for non-revin stats
        let plain = denormalize_mixture(&single(1.25, 0.5), &stats_of(5.0, 2.0, ScalerKind::Standard), 0, Some(&affine))
            .unwrap();
        assert_eq!(plain.locations()[[0, 0, 0]], 7.5);
    }

    #[test]
    fn robust_ignores_single_outlier() {
        let clean = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0];
        let mut dirty = clean;
        dirty[5] *= 1e6;
        let (a0, b0) = fit_window(&clean, ScalerKind::Robust).unwrap();
        let (a1, b1) = fit_window(&dirty, ScalerKind::Robust).unwrap();
        assert!((a0 - a1).abs() < 1e-12 && (b0 - b1).abs() < 1e-12);
        let (_, m0) = fit_window(&clean, ScalerKind::MinMax).unwrap();
        let (_, m1) = fit_window(&dirty, ScalerKind::MinMax).unwrap();
        assert!(m1 > 1e5 * m0);
    }

    fn arb_kind() -> impl Strategy<Value = ScalerKind> {
        prop::sample::select(ScalerKind::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn normalize_round_trips(
            vals in prop::collection::vec(-1e4f64..1e4, 1..40),
            kind in arb_kind(),
            lambda in 0.2f64..3.0,
            beta in -2.0f64..2.0,
        ) {
            let x = series(&vals);
            let stats = fit_scaler(x.view(), kind).unwrap();
            let affine = RevinAffine { lambda: vec![lambda], beta: vec![beta] };
            let z = normalize(x.view(), &stats, Some(&affine)).unwrap();
            let back = denormalize(z.view(), &stats, Some(&affine)).unwrap();
            let scale = 1.0 + stats.shift[[0, 0]].abs() + vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (x, y) in x.iter().zip(back.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * scale, "{x} vs {y}");
            }
        }

        #[test]
        fn affine_equivariance(
            vals in prop::collection::vec(-100.0f64..100.0, 5..30),
            c in 0.01f64..100.0,
            d in -1e3f64..1e3,
            robust in any::<bool>(),
            omega_mu in -3.0f64..3.0,
            omega_sigma in 0.1f64..3.0,
        ) {
            let kind = if robust { ScalerKind::Robust } else { ScalerKind::Standard };
            let x = series(&vals);
            let shifted: Vec<f64> = vals.iter().map(|v| c * v + d).collect();
            let xs = series(&shifted);
            let s0 = fit_scaler(x.view(), kind).unwrap();
            let s1 = fit_scaler(xs.view(), kind).unwrap();
            prop_assume!(s0.scale[[0, 0]] > 1e-6);
            let z0 = normalize(x.view(), &s0, None).unwrap();
            let z1 = normalize(xs.view(), &s1, None).unwrap();
            let zmax = 1.0 + z0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            // cancellation in c·x + d bounds how exactly the normalized inputs agree
            let tol = 1e-12 * zmax * (1.0 + d.abs() / (c * s0.scale[[0, 0]]));
            prop_assert!(z0.iter().zip(z1.iter()).all(|(a, b)| (a - b).abs() <= tol));

            let omega = single(omega_mu, omega_sigma);
            let p0 = denormalize_mixture(&omega, &s0, 0, None).unwrap();
            let p1 = denormalize_mixture(&omega, &s1, 0, None).unwrap();
            let (mu0, mu1) = (p0.locations()[[0, 0, 0]], p1.locations()[[0, 0, 0]]);
            let (sg0, sg1) = (p0.scales()[[0, 0, 0]], p1.scales()[[0, 0, 0]]);
            prop_assert!((mu1 - (c * mu0 + d)).abs() <= 1e-9 * (1.0 + mu1.abs()));
            prop_assert!((sg1 - c * sg0).abs() <= 1e-9 * (1.0 + sg1.abs()));
        }
    }
}
