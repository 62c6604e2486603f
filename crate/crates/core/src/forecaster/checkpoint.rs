//! JSON checkpoint holding a trained model together with its data and hierarchy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::LayoutEntry;
use super::train::{Model, TrainConfig, TrainHistory};
use crate::error::{Error, Result};
use crate::hierarchy::{HierarchyDocument, HierarchySpec};
use crate::pipeline::{make_split, PanelDataset};
use crate::scaling::{fit_scaler, ScalerStats};

pub const CHECKPOINT_FORMAT: &str = "hicofore-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: TrainConfig,
    pub layout: Vec<LayoutEntry>,
    pub params: Vec<f64>,
    pub fit_end: usize,
    pub residual_variances: Vec<f64>,
    pub proportions: Option<Vec<f64>>,
    /// Input-window statistics at the test forecast origin.
    pub scaler: ScalerStats,
    pub history: TrainHistory,
    pub hierarchy: HierarchyDocument,
    pub data: PanelDataset,
}

impl Checkpoint {
    pub fn new(model: &Model, spec: &HierarchySpec, data: &PanelDataset) -> Result<Self> {
        let l = model.config.input_len();
        let origin = make_split(data.len(), model.config.horizon)?.test.start;
        let window = data.values.slice(ndarray::s![.., origin.saturating_sub(l)..origin]).insert_axis(ndarray::Axis(2));
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: model.config.seed,
            config: model.config.clone(),
            layout: model.params.layout.clone(),
            params: model.params.values.clone(),
            fit_end: model.fit_end,
            residual_variances: model.residual_variances.clone(),
            proportions: model.proportions.clone(),
            scaler: fit_scaler(window, model.config.scaler)?,
            history: model.history.clone(),
            hierarchy: spec.to_document(),
            data: data.clone(),
        })
    }

    /// Rebuilds the model, hierarchy and dataset, validating the layout.
    pub fn into_parts(self) -> Result<(Model, HierarchySpec, PanelDataset)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                self.format, self.version
            )));
        }
        let params = super::network::ParameterSet {
            arch: self.config.architecture(),
            layout: self.layout,
            values: self.params,
        };
        params.validate()?;
        let spec = self.hierarchy.into_spec()?;
        if self.data.ids != spec.series_ids() {
            return Err(Error::Data("checkpoint data ids do not match its hierarchy".into()));
        }
        let model = Model {
            config: self.config,
            params,
            fit_end: self.fit_end,
            residual_variances: self.residual_variances,
            proportions: self.proportions,
            history: self.history,
        };
        Ok((model, spec, self.data))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
