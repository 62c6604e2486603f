//! Training loop, early stopping and sample-based prediction.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamHyper, AdamState};
use super::network::{loss_and_grad_grouped, Architecture, GradientTape, ParameterSet};
use crate::error::{Error, Result};
use crate::evaluate::{default_q_grid, evaluate, scrps_from_quantiles, EvaluationReport};
use crate::forecast::ForecastSet;
use crate::hierarchy::HierarchySpec;
use crate::mixture::{quantiles_from_samples, MixtureParams};
use crate::pipeline::{make_split, PanelDataset, SplitPlan};
use crate::reconcile::{
    build_projection, historical_proportions, reconcile_samples, top_down_projection, ProjectionMatrix, Strategy,
};
use crate::scaling::ScalerKind;

/// Multiplier applied to the learning rate at each decay milestone.
pub const LR_DECAY_FACTOR: f64 = 0.3;

/// Windows used to estimate one-step residual variances for MinTrace WLS.
pub const VARIANCE_WINDOWS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub horizon: usize,
    /// Input window length is `input_multiplier × horizon`.
    pub input_multiplier: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub n_components: usize,
    pub learning_rate: f64,
    pub lr_decays: usize,
    pub max_steps: usize,
    /// Series per composite batch; `0` puts every series in one batch.
    pub batch_size: usize,
    /// Window starts drawn per step; the step loss is the mean over them.
    pub windows_per_step: usize,
    pub patience: usize,
    pub eval_interval: usize,
    /// Samples drawn for each validation sCRPS.
    pub val_samples: usize,
    pub scaler: ScalerKind,
    pub reconciler: Strategy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 12,
            input_multiplier: 3,
            hidden_width: 256,
            hidden_layers: 3,
            n_components: 10,
            learning_rate: 1e-3,
            lr_decays: 3,
            max_steps: 1000,
            batch_size: 0,
            windows_per_step: 32,
            patience: 5,
            eval_interval: 50,
            val_samples: 200,
            scaler: ScalerKind::Robust,
            reconciler: Strategy::MinTraceOls,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn input_len(&self) -> usize {
        self.input_multiplier * self.horizon
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_len: self.input_len(),
            width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            n_components: self.n_components,
            horizon: self.horizon,
            revin: self.scaler == ScalerKind::Revin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("horizon", self.horizon),
            ("input multiplier", self.input_multiplier),
            ("hidden width", self.hidden_width),
            ("hidden layers", self.hidden_layers),
            ("mixture components", self.n_components),
            ("max steps", self.max_steps),
            ("windows per step", self.windows_per_step),
            ("patience", self.patience),
            ("eval interval", self.eval_interval),
            ("validation samples", self.val_samples),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        Ok(())
    }
}

/// Learning rate in effect at 1-based `step`: decayed by [`LR_DECAY_FACTOR`]
/// after each of `lr_decays` evenly spaced milestones.
pub fn lr_at(config: &TrainConfig, step: usize) -> f64 {
    let d = config.lr_decays;
    let passed = (1..=d).filter(|j| j * config.max_steps / (d + 1) < step).count();
    config.learning_rate * LR_DECAY_FACTOR.powi(passed as i32)
}

/// Where fitting ends and which window (if any) drives early stopping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub fit_end: usize,
    pub validation: Option<Range<usize>>,
}

impl From<&SplitPlan> for TrainPlan {
    fn from(split: &SplitPlan) -> Self {
        Self { fit_end: split.train.end, validation: Some(split.val.clone()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub normalized_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub val_scrps: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub best_step: usize,
    pub best_val_scrps: Option<f64>,
    pub stopped_early: bool,
}

/// Trained parameters plus what reconciliation needs at prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: TrainConfig,
    pub params: ParameterSet,
    pub fit_end: usize,
    /// Per-series one-step residual variances, hierarchy order.
    pub residual_variances: Vec<f64>,
    /// Bottom-level shares of the total over the fit range.
    pub proportions: Option<Vec<f64>>,
    pub history: TrainHistory,
}

fn windows_at(values: ArrayView2<'_, f64>, rows: &[usize], start: usize, len: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), len), |(r, t)| values[[rows[r], start + t]])
}

fn mixture_at(params: &ParameterSet, kind: ScalerKind, values: ArrayView2<'_, f64>, origin: usize) -> Result<MixtureParams> {
    let l = params.arch.input_len;
    if origin < l || origin > values.ncols() {
        return Err(Error::invalid(format!(
            "forecast origin {origin} needs {l} observations before it within {} steps",
            values.ncols()
        )));
    }
    let w = values.slice(s![.., origin - l..origin]);
    GradientTape::record(params, kind, w)?.mixture(params)
}

/// Mean squared one-step errors of the mixture mean over evenly spaced windows in `[0, fit_end)`.
fn residual_variances(params: &ParameterSet, kind: ScalerKind, values: ArrayView2<'_, f64>, fit_end: usize) -> Result<Vec<f64>> {
    let l = params.arch.input_len;
    let n_i = values.nrows();
    let max_start = fit_end - l - 1;
    let n_w = VARIANCE_WINDOWS.min(max_start + 1);
    let starts: Vec<usize> = (0..n_w).map(|j| if n_w == 1 { 0 } else { j * max_start / (n_w - 1) }).collect();
    let mut windows = Array2::zeros((n_i * n_w, l));
    for (j, &st) in starts.iter().enumerate() {
        windows.slice_mut(s![j * n_i..(j + 1) * n_i, ..]).assign(&values.slice(s![.., st..st + l]));
    }
    let mean = GradientTape::record(params, kind, windows.view())?.mixture(params)?.mean();
    let mut var = vec![0.0; n_i];
    for (j, &st) in starts.iter().enumerate() {
        for (i, v) in var.iter_mut().enumerate() {
            let e = values[[i, st + l]] - mean[[j * n_i + i, 0]];
            *v += e * e / n_w as f64;
        }
    }
    Ok(var.into_iter().map(|v| v.max(1e-12)).collect())
}

fn projection_for(
    spec: &HierarchySpec,
    strategy: Strategy,
    proportions: Option<&[f64]>,
    variances: Option<&[f64]>,
) -> Result<ProjectionMatrix> {
    match strategy {
        Strategy::TopDown => top_down_projection(
            spec,
            proportions.ok_or_else(|| Error::invalid("top-down proportions unavailable: totals are not positive"))?,
        ),
        other => build_projection(spec, other, None, variances),
    }
}

fn validation_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_5eed_5eed_5eed
}

fn check_inputs(dataset: &PanelDataset, spec: &HierarchySpec) -> Result<()> {
    if dataset.ids != spec.series_ids() {
        return Err(Error::Data("dataset ids do not match the hierarchy".into()));
    }
    if dataset.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dataset values".into()));
    }
    Ok(())
}

/// Trains on the standard split: fit on train, early-stop on validation.
pub fn train(dataset: &PanelDataset, spec: &HierarchySpec, config: &TrainConfig) -> Result<Model> {
    let split = make_split(dataset.len(), config.horizon)?;
    train_with_plan(dataset, spec, config, &TrainPlan::from(&split))
}

pub fn train_with_plan(dataset: &PanelDataset, spec: &HierarchySpec, config: &TrainConfig, plan: &TrainPlan) -> Result<Model> {
    config.validate()?;
    check_inputs(dataset, spec)?;
    let arch = config.architecture();
    let (l, h) = (arch.input_len, arch.horizon);
    let fit_end = plan.fit_end;
    if fit_end > dataset.len() {
        return Err(Error::invalid(format!("fit end {fit_end} beyond series length {}", dataset.len())));
    }
    if fit_end < l + h {
        return Err(Error::invalid(format!(
            "empty training range: {fit_end} observations cannot hold an input of {l} plus a horizon of {h}"
        )));
    }
    if let Some(val) = &plan.validation {
        if val.len() != h || val.start < l || val.end > dataset.len() {
            return Err(Error::invalid(format!("validation window {val:?} must span {h} steps after {l} inputs")));
        }
    }
    let values = dataset.values.view();
    let max_start = fit_end - l - h;
    let proportions = historical_proportions(spec, dataset.bottom(spec).slice(s![.., ..fit_end])).ok();
    if config.reconciler == Strategy::TopDown && proportions.is_none() {
        return Err(Error::invalid("top-down reconciliation needs positive totals in the fit range"));
    }

    let mut params = ParameterSet::init(arch, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let n_i = spec.n_series();
    let batch = if config.batch_size == 0 { n_i } else { config.batch_size.min(n_i) };
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut state = AdamState::new(params.len());
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParameterSet, usize)> = None;
    let mut stale = 0;
    let q_grid = default_q_grid();
    let s_matrix = spec.summing_matrix();
    let all: Vec<usize> = (0..n_i).collect();

    for step in 1..=config.max_steps {
        if cursor >= order.len() {
            order = all.clone();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let rows = &order[cursor..(cursor + batch).min(n_i)];
        cursor += batch;
        let n_w = config.windows_per_step;
        let starts: Vec<usize> = (0..n_w).map(|_| rng.random_range(0..=max_start)).collect();
        let mut w = Array2::zeros((n_w * rows.len(), l));
        let mut y = Array2::zeros((n_w * rows.len(), h));
        for (g, &start) in starts.iter().enumerate() {
            let block = g * rows.len()..(g + 1) * rows.len();
            w.slice_mut(s![block.clone(), ..]).assign(&windows_at(values, rows, start, l));
            y.slice_mut(s![block, ..]).assign(&windows_at(values, rows, start + l, h));
        }
        let lg = loss_and_grad_grouped(&params, config.scaler, w.view(), y.view(), n_w).map_err(|e| match e {
            Error::NonFinite(msg) => {
                let ids: Vec<&str> = rows.iter().map(|&i| dataset.ids[i].as_str()).collect();
                Error::NonFinite(format!("{msg} at step {step}, window starts {starts:?}, series {ids:?}"))
            }
            other => other,
        })?;
        let lr = lr_at(config, step);
        adam_step(&mut params.values, &lg.grad, &mut state, lr, AdamHyper::default())?;
        history.steps.push(StepRecord { step, lr, loss: lg.loss, normalized_loss: lg.normalized_loss });

        let Some(val) = &plan.validation else { continue };
        if step % config.eval_interval != 0 && step != config.max_steps {
            continue;
        }
        let mix = mixture_at(&params, config.scaler, values, val.start)?;
        let variances = match config.reconciler {
            Strategy::MinTraceWls => Some(residual_variances(&params, config.scaler, values, fit_end)?),
            _ => None,
        };
        let p = projection_for(spec, config.reconciler, proportions.as_deref(), variances.as_deref())?;
        let seed = validation_seed(config.seed);
        let rec = reconcile_samples(&s_matrix, &p, mix.sample(config.val_samples, seed)?.view(), seed)?;
        let quantiles = quantiles_from_samples(rec.data.view(), &q_grid)?;
        let score = scrps_from_quantiles(quantiles.view(), &q_grid, values.slice(s![.., val.clone()]), &all)?;
        history.evals.push(EvalRecord { step, val_scrps: score });
        if best.as_ref().map_or(true, |(b, _, _)| score < *b) {
            best = Some((score, params.clone(), step));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    let params = match best {
        Some((score, p, step)) => {
            history.best_step = step;
            history.best_val_scrps = Some(score);
            p
        }
        None => {
            history.best_step = history.steps.len();
            params
        }
    };
    let residual_variances = residual_variances(&params, config.scaler, values, fit_end)?;
    Ok(Model { config: config.clone(), params, fit_end, residual_variances, proportions, history })
}

impl Model {
    /// Data-unit mixture for raw windows (`N × L`), one series per row.
    pub fn mixture(&self, windows: ArrayView2<'_, f64>) -> Result<MixtureParams> {
        GradientTape::record(&self.params, self.config.scaler, windows)?.mixture(&self.params)
    }

    /// Data-unit mixture from the `L` observations before `origin`.
    pub fn mixture_at(&self, dataset: &PanelDataset, origin: usize) -> Result<MixtureParams> {
        mixture_at(&self.params, self.config.scaler, dataset.values.view(), origin)
    }

    pub fn projection(&self, spec: &HierarchySpec, strategy: Strategy) -> Result<ProjectionMatrix> {
        projection_for(spec, strategy, self.proportions.as_deref(), Some(&self.residual_variances))
    }

    /// Samples the base mixture at `origin`, reconciles them and summarizes quantiles.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_distribution(
        &self,
        dataset: &PanelDataset,
        spec: &HierarchySpec,
        origin: usize,
        n_samples: usize,
        seed: u64,
        strategy: Strategy,
        q_grid: &[f64],
    ) -> Result<ForecastSet> {
        check_inputs(dataset, spec)?;
        let base = self.mixture_at(dataset, origin)?.sample(n_samples, seed)?;
        let p = self.projection(spec, strategy)?;
        let rec = reconcile_samples(&spec.summing_matrix(), &p, base.view(), seed)?;
        ForecastSet::from_samples(dataset.ids.clone(), rec, q_grid)
    }

    /// Scores the last `H` steps of `dataset` against the naive last-value forecast.
    pub fn evaluate_test(
        &self,
        dataset: &PanelDataset,
        spec: &HierarchySpec,
        n_samples: usize,
        seed: u64,
        strategy: Strategy,
        q_grid: &[f64],
    ) -> Result<EvaluationReport> {
        let h = self.config.horizon;
        let split = make_split(dataset.len(), h)?;
        let origin = split.test.start;
        let forecast = self.predict_distribution(dataset, spec, origin, n_samples, seed, strategy, q_grid)?;
        let naive = dataset.naive_forecast(origin, h)?;
        evaluate(&forecast, dataset.values.slice(s![.., split.test]), spec, naive.view())
    }

    /// Retrains on train + validation for the best step count found by early stopping.
    pub fn recalibrate(&self, dataset: &PanelDataset, spec: &HierarchySpec) -> Result<Model> {
        let split = make_split(dataset.len(), self.config.horizon)?;
        let config = TrainConfig { max_steps: self.history.best_step.max(1), ..self.config.clone() };
        train_with_plan(dataset, spec, &config, &TrainPlan { fit_end: split.val.end, validation: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::loss_and_grad;
    use crate::pipeline::{synth_hierarchy, SynthConfig};

    fn small(horizon: usize) -> TrainConfig {
        TrainConfig {
            horizon,
            input_multiplier: 2,
            hidden_width: 16,
            hidden_layers: 2,
            n_components: 3,
            learning_rate: 3e-3,
            max_steps: 200,
            eval_interval: 25,
            val_samples: 100,
            ..TrainConfig::default()
        }
    }

    fn data(seed: u64) -> (HierarchySpec, PanelDataset) {
        synth_hierarchy(&SynthConfig { length: 120, period: 6, seed, ..SynthConfig::default() }).unwrap()
    }

    #[test]
    fn lr_schedule_has_evenly_spaced_decays() {
        let c = TrainConfig { max_steps: 100, lr_decays: 3, learning_rate: 1.0, ..TrainConfig::default() };
        assert_eq!(lr_at(&c, 1), 1.0);
        assert_eq!(lr_at(&c, 25), 1.0);
        assert_eq!(lr_at(&c, 26), 0.3);
        assert!((lr_at(&c, 51) - 0.09).abs() < 1e-15);
        assert!((lr_at(&c, 100) - 0.027).abs() < 1e-15);
        let flat = TrainConfig { lr_decays: 0, ..c };
        assert_eq!(lr_at(&flat, 100), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { n_components: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_ok());
    }

    #[test]
    fn empty_training_range_is_rejected() {
        let (spec, d) = data(0);
        let c = TrainConfig { input_multiplier: 4, ..small(30) };
        let err = train(&d, &spec, &c).unwrap_err();
        assert!(err.to_string().contains("empty training range"), "{err}");
    }

    #[test]
    fn frozen_lr_with_patience_one_stops_after_two_evaluations() {
        let (spec, d) = data(1);
        let c = TrainConfig { learning_rate: 0.0, patience: 1, eval_interval: 10, max_steps: 500, ..small(6) };
        let m = train(&d, &spec, &c).unwrap();
        assert_eq!(m.history.evals.len(), 2);
        assert!(m.history.stopped_early);
        assert_eq!(m.history.steps.len(), 20);
        assert_eq!(m.history.best_step, 10);
    }

    #[test]
    fn identical_seeds_give_identical_models() {
        let (spec, d) = data(2);
        let c = TrainConfig { max_steps: 60, ..small(6) };
        let a = train(&d, &spec, &c).unwrap();
        let b = train(&d, &spec, &c).unwrap();
        assert_eq!(a, b);
        let other = train(&d, &spec, &TrainConfig { seed: 9, ..c }).unwrap();
        assert_ne!(a.params, other.params);
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let (spec, d) = data(3);
        for scaler in ScalerKind::ALL {
            let c = TrainConfig { scaler, max_steps: 200, ..small(6) };
            let plan = TrainPlan { fit_end: 96, validation: None };
            let m = train_with_plan(&d, &spec, &c, &plan).unwrap();
            let init = ParameterSet::init(c.architecture(), &mut ChaCha8Rng::seed_from_u64(c.seed)).unwrap();
            let rows: Vec<usize> = (0..spec.n_series()).collect();
            let w = windows_at(d.values.view(), &rows, 40, 12);
            let y = windows_at(d.values.view(), &rows, 52, 6);
            let before = loss_and_grad(&init, scaler, w.view(), y.view()).unwrap().loss;
            let after = loss_and_grad(&m.params, scaler, w.view(), y.view()).unwrap().loss;
            assert!(after < before, "{scaler}: {after} !< {before}");
        }
    }

    #[test]
    fn normalized_losses_are_scale_free() {
        let (spec, d) = data(4);
        let mut moved = d.clone();
        moved.values.mapv_inplace(|v| 250.0 * v + 40.0);
        let plan = TrainPlan { fit_end: 96, validation: None };
        for scaler in [ScalerKind::Standard, ScalerKind::Robust] {
            let c = TrainConfig { scaler, max_steps: 100, ..small(6) };
            let a = train_with_plan(&d, &spec, &c, &plan).unwrap();
            let b = train_with_plan(&moved, &spec, &c, &plan).unwrap();
            for (x, y) in a.history.steps.iter().zip(&b.history.steps) {
                assert!((x.normalized_loss - y.normalized_loss).abs() < 1e-6, "{scaler} step {}: {} vs {}", x.step, x.normalized_loss, y.normalized_loss);
            }
        }
    }

    #[test]
    fn constant_series_are_learned_almost_exactly() {
        let cfg = SynthConfig { length: 120, seasonal_amplitude: 0.0, noise_std: 0.0, ..SynthConfig::default() };
        let (spec, d) = synth_hierarchy(&cfg).unwrap();
        let c = TrainConfig { max_steps: 500, learning_rate: 1e-2, patience: 100, reconciler: Strategy::BottomUp, ..small(6) };
        let m = train(&d, &spec, &c).unwrap();
        let best = m.history.best_val_scrps.unwrap();
        assert!(best < 0.01, "validation sCRPS {best}");
    }

    #[test]
    fn predictions_are_coherent_and_reproducible() {
        let (spec, d) = data(5);
        let m = train(&d, &spec, &TrainConfig { max_steps: 50, ..small(6) }).unwrap();
        for strategy in Strategy::ALL {
            let f = m.predict_distribution(&d, &spec, 114, 300, 7, strategy, &default_q_grid()).unwrap();
            let g = m.predict_distribution(&d, &spec, 114, 300, 7, strategy, &default_q_grid()).unwrap();
            assert_eq!(f, g);
            for sample in f.samples.outer_iter() {
                for col in sample.columns() {
                    let scale = 1.0 + col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    assert!(spec.coherence_residual(col).unwrap() <= 1e-8 * scale);
                }
            }
            if strategy == Strategy::BottomUp {
                for sample in f.samples.outer_iter() {
                    for (a, agg) in spec.aggregates().iter().enumerate() {
                        for t in 0..6 {
                            let sum: f64 = agg.children.iter().map(|&b| sample[[spec.n_aggregate() + b, t]]).sum();
                            assert_eq!(sample[[a, t]], sum);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn recalibration_runs_best_step_count_on_train_plus_val() {
        let (spec, d) = data(6);
        let m = train(&d, &spec, &TrainConfig { max_steps: 75, ..small(6) }).unwrap();
        let r = m.recalibrate(&d, &spec).unwrap();
        assert_eq!(r.fit_end, 114);
        assert_eq!(r.history.steps.len(), m.history.best_step);
        assert!(r.history.evals.is_empty());
        let rep = r.evaluate_test(&d, &spec, 200, 0, Strategy::MinTraceOls, &default_q_grid()).unwrap();
        assert!(rep.scrps.is_finite() && rep.scrps >= 0.0);
    }
}
