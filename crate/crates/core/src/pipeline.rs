//! Panel data ingestion, train/validation/test splits, synthetic generators
//! and noise injection.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::HierarchySpec;

/// Relative tolerance for aggregate rows read from file.
pub const AGGREGATE_TOL: f64 = 1e-6;

/// `N_i × T` observations in hierarchy order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub ids: Vec<String>,
    /// Time labels as read (`ds` column), one per column of `values`.
    pub ds: Vec<String>,
    pub values: Array2<f64>,
}

impl PanelDataset {
    /// Builds a coherent dataset from bottom-level rows (`N_b × T`).
    pub fn from_bottom(spec: &HierarchySpec, bottom: ArrayView2<'_, f64>, ds: Vec<String>) -> Result<Self> {
        if bottom.nrows() != spec.n_bottom() || ds.len() != bottom.ncols() {
            return Err(Error::shape(format!(
                "bottom block {:?} for {} bottoms and {} time labels",
                bottom.dim(),
                spec.n_bottom(),
                ds.len()
            )));
        }
        if bottom.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("panel values".into()));
        }
        Ok(Self { ids: spec.series_ids(), ds, values: spec.aggregate_columns(bottom)? })
    }

    pub fn n_series(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn bottom<'a>(&'a self, spec: &HierarchySpec) -> ArrayView2<'a, f64> {
        self.values.slice(s![spec.n_aggregate().., ..])
    }

    /// Largest `coherence_residual / (1 + max|y|)` over time.
    pub fn max_relative_violation(&self, spec: &HierarchySpec) -> Result<f64> {
        let mut worst = 0.0f64;
        for col in self.values.columns() {
            let scale = 1.0 + col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            worst = worst.max(spec.coherence_residual(col)? / scale);
        }
        Ok(worst)
    }

    /// Last value before `origin`, repeated over `h` steps.
    pub fn naive_forecast(&self, origin: usize, h: usize) -> Result<Array2<f64>> {
        if origin == 0 || origin > self.len() {
            return Err(Error::invalid(format!("naive forecast origin {origin} outside 1..={}", self.len())));
        }
        let last = self.values.column(origin - 1);
        Ok(Array2::from_shape_fn((self.n_series(), h), |(i, _)| last[i]))
    }
}

#[derive(Debug, Deserialize)]
struct Row {
    unique_id: String,
    ds: String,
    y: Option<f64>,
}

fn sort_time_labels(labels: &mut [String]) {
    if labels.iter().all(|l| l.trim().parse::<i64>().is_ok()) {
        labels.sort_by_key(|l| l.trim().parse::<i64>().expect("checked integer"));
    } else {
        labels.sort();
    }
}

/// Reads a `unique_id,ds,y` long-format panel.
///
/// Bottom series are required. Aggregate rows are optional; when present they
/// are checked against the recomputed sums.
pub fn read_panel<R: Read>(reader: R, spec: &HierarchySpec) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let index: HashMap<String, usize> = spec.series_ids().into_iter().enumerate().map(|(i, id)| (id, i)).collect();
    let mut by_series: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); spec.n_series()];
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        let &i = index
            .get(&row.unique_id)
            .ok_or_else(|| Error::Data(format!("unknown series {:?}", row.unique_id)))?;
        let y = row
            .y
            .ok_or_else(|| Error::Data(format!("missing value for {:?} at {}", row.unique_id, row.ds)))?;
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("{} at {}", row.unique_id, row.ds)));
        }
        if by_series[i].insert(row.ds.clone(), y).is_some() {
            return Err(Error::Data(format!("duplicate row for {:?} at {}", row.unique_id, row.ds)));
        }
    }
    let n_a = spec.n_aggregate();
    let first_bottom = &by_series[n_a];
    if first_bottom.is_empty() {
        return Err(Error::Data(format!("missing series {:?}", spec.bottom_ids()[0])));
    }
    let mut ds: Vec<String> = first_bottom.keys().cloned().collect();
    sort_time_labels(&mut ds);
    let ids = spec.series_ids();
    for (i, rows) in by_series.iter().enumerate() {
        if rows.is_empty() {
            if i >= n_a {
                return Err(Error::Data(format!("missing series {:?}", ids[i])));
            }
            continue;
        }
        if rows.len() != ds.len() || !ds.iter().all(|d| rows.contains_key(d)) {
            return Err(Error::Data(format!(
                "series {:?} has {} observations on a different time index than {:?} ({})",
                ids[i],
                rows.len(),
                ids[n_a],
                ds.len()
            )));
        }
    }
    let bottom = Array2::from_shape_fn((spec.n_bottom(), ds.len()), |(b, t)| by_series[n_a + b][&ds[t]]);
    let dataset = PanelDataset::from_bottom(spec, bottom.view(), ds)?;
    for (i, rows) in by_series.iter().enumerate().take(n_a) {
        for (t, d) in dataset.ds.iter().enumerate() {
            let Some(&given) = rows.get(d) else { continue };
            let expected = dataset.values[[i, t]];
            if (given - expected).abs() > AGGREGATE_TOL * expected.abs().max(1.0) {
                return Err(Error::Data(format!(
                    "incoherent input data: {:?} at {d} is {given}, children sum to {expected}",
                    ids[i]
                )));
            }
        }
    }
    Ok(dataset)
}

pub fn load_panel(path: impl AsRef<Path>, spec: &HierarchySpec) -> Result<PanelDataset> {
    read_panel(std::fs::File::open(path)?, spec)
}

/// Writes every series in long format, aggregates included.
pub fn write_panel_to<W: Write>(writer: W, dataset: &PanelDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unique_id", "ds", "y"])?;
    for (i, id) in dataset.ids.iter().enumerate() {
        for (t, d) in dataset.ds.iter().enumerate() {
            w.write_record([id.as_str(), d.as_str(), &dataset.values[[i, t]].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_panel(path: impl AsRef<Path>, dataset: &PanelDataset) -> Result<()> {
    write_panel_to(std::fs::File::create(path)?, dataset)
}

/// Train `[0, T-2H)`, validation `[T-2H, T-H)`, test `[T-H, T)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn make_split(t: usize, h: usize) -> Result<SplitPlan> {
    if h == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if t < 3 * h {
        return Err(Error::invalid(format!("series length {t} is shorter than 3 × horizon ({})", 3 * h)));
    }
    Ok(SplitPlan { train: 0..t - 2 * h, val: t - 2 * h..t - h, test: t - h..t })
}

/// Parameters of the level + trend + seasonal + correlated-noise generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_bottom: usize,
    pub length: usize,
    /// Pairwise noise correlation, in `[0, 1)`.
    pub rho: f64,
    pub level: f64,
    pub trend: f64,
    pub seasonal_amplitude: f64,
    pub period: usize,
    pub noise_std: f64,
    /// Adds a middle level grouping consecutive bottom pairs.
    pub pairs: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_bottom: 4,
            length: 240,
            rho: 0.3,
            level: 50.0,
            trend: 0.0,
            seasonal_amplitude: 5.0,
            period: 12,
            noise_std: 1.0,
            pairs: true,
            seed: 0,
        }
    }
}

/// Total over all bottoms, plus pair groups when `pairs` is set and there are at least four bottoms.
fn synth_spec(n_bottom: usize, pairs: bool) -> Result<HierarchySpec> {
    let bottom_ids = (0..n_bottom).map(|b| format!("b{b}")).collect();
    let mut aggregates = vec![("Total".to_string(), 0, (0..n_bottom).collect::<Vec<_>>())];
    let grouped = pairs && n_bottom >= 4;
    if grouped {
        for (g, start) in (0..n_bottom).step_by(2).enumerate() {
            aggregates.push((format!("G{g}"), 1, (start..(start + 2).min(n_bottom)).collect()));
        }
    }
    HierarchySpec::new(bottom_ids, aggregates, if grouped { 2 } else { 1 })
}

fn integer_labels(t: usize) -> Vec<String> {
    (0..t).map(|i| i.to_string()).collect()
}

pub fn synth_hierarchy(config: &SynthConfig) -> Result<(HierarchySpec, PanelDataset)> {
    if config.n_bottom < 2 {
        return Err(Error::invalid("synthetic hierarchy needs at least two bottom series"));
    }
    if !(0.0..1.0).contains(&config.rho) {
        return Err(Error::invalid(format!("correlation {} outside [0, 1)", config.rho)));
    }
    if config.length == 0 || config.period == 0 {
        return Err(Error::invalid("length and period must be positive"));
    }
    let spec = synth_spec(config.n_bottom, config.pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (shared, own) = (config.rho.sqrt(), (1.0 - config.rho).sqrt());
    let n_b = config.n_bottom;
    let mut bottom = Array2::zeros((n_b, config.length));
    for t in 0..config.length {
        let z0: f64 = rng.sample(StandardNormal);
        for b in 0..n_b {
            let z: f64 = rng.sample(StandardNormal);
            let level = config.level * (1.0 + b as f64 / n_b as f64);
            let phase = 2.0 * std::f64::consts::PI * (t as f64 / config.period as f64 + b as f64 / n_b as f64);
            bottom[[b, t]] = level
                + config.trend * t as f64
                + config.seasonal_amplitude * phase.sin()
                + config.noise_std * (shared * z0 + own * z);
        }
    }
    let ds = integer_labels(config.length);
    let data = PanelDataset::from_bottom(&spec, bottom.view(), ds)?;
    Ok((spec, data))
}

/// Parameters of the shared-regime generator: at every step one of two
/// regimes is drawn independently and moves every bottom series by the same
/// multiple of its own level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub length: usize,
    pub level: f64,
    /// Relative shift per unit of regime offset.
    pub spread: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self { length: 400, level: 20.0, spread: 0.1, noise_std: 0.3, seed: 0 }
    }
}

/// Offset of each regime in units of `spread`.
pub const REGIME_OFFSETS: [f64; 2] = [-1.0, 1.0];

/// Level of bottom series `b` in the regime generator.
pub fn regime_level(config: &RegimeConfig, b: usize) -> f64 {
    config.level * (1.0 + 0.25 * b as f64)
}

/// Four bottoms, two pair groups and a total. Over any window of `h`
/// consecutive steps the panel is an equally weighted Gaussian mixture with
/// `2^h` components, one per regime path.
pub fn synth_regimes(config: &RegimeConfig) -> Result<(HierarchySpec, PanelDataset)> {
    if config.length == 0 {
        return Err(Error::invalid("length must be positive"));
    }
    let spec = synth_spec(4, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut bottom = Array2::zeros((4, config.length));
    for t in 0..config.length {
        let shift = config.spread * REGIME_OFFSETS[rng.random_range(0..2)];
        for b in 0..4 {
            let z: f64 = rng.sample(StandardNormal);
            bottom[[b, t]] = regime_level(config, b) * (1.0 + shift) + config.noise_std * z;
        }
    }
    let data = PanelDataset::from_bottom(&spec, bottom.view(), integer_labels(config.length))?;
    Ok((spec, data))
}

/// Multiplies a Bernoulli(`p`) subset of bottom observations in `[0, train_end)`
/// by factors drawn log-uniformly from `[0.1, 10]`, then recomputes aggregates.
pub fn inject_noise(
    dataset: &PanelDataset,
    spec: &HierarchySpec,
    train_end: usize,
    p: f64,
    seed: u64,
) -> Result<PanelDataset> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("noise fraction {p} outside [0, 1]")));
    }
    if train_end > dataset.len() {
        return Err(Error::invalid(format!("train end {train_end} beyond series length {}", dataset.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bottom = dataset.bottom(spec).to_owned();
    let (lo, hi) = (0.1f64.ln(), 10.0f64.ln());
    for mut row in bottom.rows_mut() {
        for v in row.slice_mut(s![..train_end]).iter_mut() {
            if rng.random_bool(p) {
                *v *= rng.random_range(lo..=hi).exp();
            }
        }
    }
    let mut out = PanelDataset::from_bottom(spec, bottom.view(), dataset.ds.clone())?;
    // Outside the training range the original values are kept verbatim.
    out.values.slice_mut(s![.., train_end..]).assign(&dataset.values.slice(s![.., train_end..]));
    Ok(out)
}
