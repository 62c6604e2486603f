//! Deterministic fixtures shared by the benches.

use hicofore_core::forecaster::{Architecture, ParameterSet};
use hicofore_core::hierarchy::example_hierarchy;
use hicofore_core::{HierarchySpec, MixtureParams};
use ndarray::{Array2, Array3};

/// Smooth, seed-free pseudo-values in `[-1, 1]`.
fn wave(i: usize) -> f64 {
    (i as f64 * 0.618_033_988_7).sin()
}

/// The seven-series example hierarchy.
pub fn hierarchy() -> HierarchySpec {
    example_hierarchy()
}

pub fn mixture(n_series: usize, k: usize, h: usize) -> MixtureParams {
    let weights = vec![1.0 / k as f64; k];
    let loc = Array3::from_shape_fn((n_series, k, h), |(i, c, t)| 50.0 + 10.0 * wave(i * 131 + c * 17 + t));
    let scale = Array3::from_shape_fn((n_series, k, h), |(i, c, t)| 1.5 + wave(i * 7 + c * 3 + t));
    MixtureParams::new(weights, loc, scale).expect("fixture mixture is valid")
}

pub fn network(arch: Architecture) -> ParameterSet {
    let mut p = ParameterSet::zeros(arch).expect("fixture architecture is valid");
    for (j, v) in p.values.iter_mut().enumerate() {
        *v += 0.1 * wave(j);
    }
    p
}

/// `rows × len` windows around a level of 40.
pub fn windows(rows: usize, len: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, len), |(r, t)| 40.0 + 5.0 * wave(r * 1000 + t))
}
