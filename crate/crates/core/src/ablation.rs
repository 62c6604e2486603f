//! Validation-sCRPS sweeps over one training factor.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{train, TrainConfig};
use crate::hierarchy::HierarchySpec;
use crate::pipeline::{inject_noise, make_split, PanelDataset};
use crate::reconcile::Strategy;
use crate::scaling::ScalerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Mixture,
    Scaler,
    Reconciler,
}

impl Factor {
    pub fn as_str(self) -> &'static str {
        match self {
            Factor::Mixture => "mixture",
            Factor::Scaler => "scaler",
            Factor::Reconciler => "reconciler",
        }
    }

    /// Grid used when none is given.
    pub fn default_grid(self) -> Vec<String> {
        match self {
            Factor::Mixture => [1, 4, 10, 32].iter().map(|k| k.to_string()).collect(),
            Factor::Scaler => ScalerKind::ALL.iter().map(|k| k.to_string()).collect(),
            Factor::Reconciler => Strategy::ALL.iter().map(|k| k.to_string()).collect(),
        }
    }

    /// `base` with this factor set to `value`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut c = base.clone();
        match self {
            Factor::Mixture => {
                c.n_components = value
                    .parse()
                    .map_err(|_| Error::invalid(format!("mixture size {value:?} is not a positive integer")))?
            }
            Factor::Scaler => c.scaler = value.parse()?,
            Factor::Reconciler => c.reconciler = value.parse()?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture" => Ok(Factor::Mixture),
            "scaler" => Ok(Factor::Scaler),
            "reconciler" => Ok(Factor::Reconciler),
            other => Err(Error::invalid(format!("unknown ablation factor {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub factor: Factor,
    pub grid: Vec<String>,
    /// Fraction of training observations rescaled before each run.
    pub noise: f64,
    pub seeds: Vec<u64>,
    pub base: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub factor: Factor,
    pub value: String,
    pub noise: f64,
    pub seed: u64,
    pub val_scrps: f64,
    pub steps: usize,
}

/// Trains one model per `(value, seed)` and records its best validation sCRPS.
///
/// Rows come back in grid-major, seed-minor order regardless of scheduling.
pub fn run_ablation(dataset: &PanelDataset, spec: &HierarchySpec, ablation: &Ablation) -> Result<Vec<AblationRow>> {
    if ablation.grid.is_empty() || ablation.seeds.is_empty() {
        return Err(Error::invalid("ablation needs a non-empty grid and at least one seed"));
    }
    let split = make_split(dataset.len(), ablation.base.horizon)?;
    let configs = ablation
        .grid
        .iter()
        .map(|v| ablation.factor.apply(&ablation.base, v))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|g| ablation.seeds.iter().map(move |&s| (g, s))).collect();
    jobs.par_iter()
        .map(|&(g, seed)| {
            let data = inject_noise(dataset, spec, split.train.end, ablation.noise, seed)?;
            let config = TrainConfig { seed, ..configs[g].clone() };
            let model = train(&data, spec, &config)?;
            Ok(AblationRow {
                factor: ablation.factor,
                value: ablation.grid[g].clone(),
                noise: ablation.noise,
                seed,
                val_scrps: model.history.best_val_scrps.expect("validation window present"),
                steps: model.history.steps.len(),
            })
        })
        .collect()
}

/// Median validation sCRPS per grid value, in first-appearance order.
pub fn medians(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.value) {
            order.push(r.value.clone());
        }
    }
    order
        .into_iter()
        .map(|v| {
            let mut xs: Vec<f64> = rows.iter().filter(|r| r.value == v).map(|r| r.val_scrps).collect();
            xs.sort_by(f64::total_cmp);
            let n = xs.len();
            let m = if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) };
            (v, m)
        })
        .collect()
}

/// CSV with columns `factor,value,noise,seed,val_scrps,steps`.
pub fn write_rows<W: Write>(writer: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["factor", "value", "noise", "seed", "val_scrps", "steps"])?;
    for r in rows {
        w.write_record([
            r.factor.as_str(),
            &r.value,
            &r.noise.to_string(),
            &r.seed.to_string(),
            &r.val_scrps.to_string(),
            &r.steps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
