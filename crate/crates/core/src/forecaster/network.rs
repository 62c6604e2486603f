//! MLP mixture head, flat parameter storage and reverse-mode gradients.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{log_sum_exp, MixtureParams};
use crate::scaling::{fit_window, ScalerKind};

/// Floor added to the softplus scale head in normalized space.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Scale of the output-layer initialization relative to `1/sqrt(fan_in)`.
pub const OUTPUT_INIT_GAIN: f64 = 0.1;

/// Spread of the initial location-head biases in normalized units.
pub const LOCATION_BIAS_STD: f64 = 1.0;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// Sizes that determine the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_len: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub n_components: usize,
    pub horizon: usize,
    pub revin: bool,
}

impl Architecture {
    pub fn output_len(&self) -> usize {
        2 * self.n_components * self.horizon
    }

    fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.width == 0 || self.hidden_layers == 0 || self.n_components == 0 || self.horizon == 0 {
            return Err(Error::invalid(format!("architecture sizes must all be at least 1: {self:?}")));
        }
        Ok(())
    }

    /// Named blocks in storage order.
    pub fn layout(&self) -> Vec<LayoutEntry> {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            entries.push(LayoutEntry { name, offset, rows, cols });
            offset += rows * cols;
        };
        let mut fan_in = self.input_len;
        for l in 0..self.hidden_layers {
            push(format!("hidden{l}.weight"), self.width, fan_in);
            push(format!("hidden{l}.bias"), self.width, 1);
            fan_in = self.width;
        }
        push("output.weight".into(), self.output_len(), fan_in);
        push("output.bias".into(), self.output_len(), 1);
        push("mixture.logits".into(), self.n_components, 1);
        if self.revin {
            push("revin.lambda".into(), 1, 1);
            push("revin.beta".into(), 1, 1);
        }
        entries
    }

    pub fn n_params(&self) -> usize {
        self.layout().iter().map(LayoutEntry::len).sum()
    }

    fn weight(&self, layer: usize) -> usize {
        2 * layer
    }

    fn bias(&self, layer: usize) -> usize {
        2 * layer + 1
    }

    fn logits(&self) -> usize {
        2 * (self.hidden_layers + 1)
    }

    fn lambda(&self) -> usize {
        self.logits() + 1
    }

    fn beta(&self) -> usize {
        self.logits() + 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector plus its layout table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub arch: Architecture,
    pub layout: Vec<LayoutEntry>,
    pub values: Vec<f64>,
}

impl ParameterSet {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let n = layout.iter().map(LayoutEntry::len).sum();
        let mut p = Self { arch, layout, values: vec![0.0; n] };
        if arch.revin {
            let at = p.layout[arch.lambda()].offset;
            p.values[at] = 1.0;
        }
        Ok(p)
    }

    /// He-normal hidden weights, a damped output layer, standard-normal location biases (one offset per
    /// component and step, so components start apart), other biases and
    /// logits zero, identity revin affine.
    pub fn init<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        for layer in 0..=arch.hidden_layers {
            let entry = p.layout[arch.weight(layer)].clone();
            let std = if layer == arch.hidden_layers {
                OUTPUT_INIT_GAIN * (1.0 / entry.cols as f64).sqrt()
            } else {
                (2.0 / entry.cols as f64).sqrt()
            };
            for v in &mut p.values[entry.range()] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let out_bias = p.layout[arch.bias(arch.hidden_layers)].offset;
        let n_loc = arch.n_components * arch.horizon;
        for v in &mut p.values[out_bias..out_bias + n_loc] {
            *v = LOCATION_BIAS_STD * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(p)
    }

    /// Checks that the layout matches `arch` and covers `values` exactly.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.layout != self.arch.layout() {
            return Err(Error::shape("parameter layout does not match the architecture"));
        }
        let n: usize = self.layout.iter().map(LayoutEntry::len).sum();
        if n != self.values.len() {
            return Err(Error::shape(format!("layout covers {n} parameters, found {}", self.values.len())));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn block(&self, idx: usize) -> ArrayView2<'_, f64> {
        let e = &self.layout[idx];
        ArrayView2::from_shape((e.rows, e.cols), &self.values[e.range()]).expect("layout matches storage")
    }

    fn column(&self, idx: usize) -> ArrayView1<'_, f64> {
        let e = &self.layout[idx];
        ArrayView1::from(&self.values[e.range()])
    }

    pub fn logits(&self) -> &[f64] {
        &self.values[self.layout[self.arch.logits()].range()]
    }

    /// `(λ, β)`; identity when revin is inactive.
    pub fn revin(&self) -> (f64, f64) {
        if self.arch.revin {
            (self.values[self.layout[self.arch.lambda()].offset], self.values[self.layout[self.arch.beta()].offset])
        } else {
            (1.0, 0.0)
        }
    }

    pub fn mixture_weights(&self) -> Vec<f64> {
        softmax(self.logits())
    }
}

/// Normalized-space head output for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedOutput {
    pub weights: Vec<f64>,
    /// `N_k × H`
    pub locations: Array2<f64>,
    /// `N_k × H`, strictly positive.
    pub scales: Array2<f64>,
}

/// Head output for a scaler-normalized window of length `L`.
pub fn forward(params: &ParameterSet, window: &[f64]) -> Result<NormalizedOutput> {
    let arch = params.arch;
    if window.len() != arch.input_len {
        return Err(Error::shape(format!("window of {} for input length {}", window.len(), arch.input_len)));
    }
    params.validate()?;
    let z = Array2::from_shape_vec((arch.input_len, 1), window.to_vec()).expect("column");
    let out = run_layers(params, z.view()).1;
    let (k, h) = (arch.n_components, arch.horizon);
    let o = out.column(0);
    Ok(NormalizedOutput {
        weights: params.mixture_weights(),
        locations: Array2::from_shape_fn((k, h), |(c, t)| o[c * h + t]),
        scales: Array2::from_shape_fn((k, h), |(c, t)| softplus(o[k * h + c * h + t]) + SCALE_FLOOR),
    })
}

/// Activations per layer (input first) and the raw output block, columns = windows.
fn run_layers(params: &ParameterSet, z: ArrayView2<'_, f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
    let arch = params.arch;
    let (lam, beta) = params.revin();
    let mut acts = Vec::with_capacity(arch.hidden_layers + 1);
    acts.push(z.mapv(|v| lam * v + beta));
    for l in 0..arch.hidden_layers {
        let mut pre = params.block(arch.weight(l)).dot(acts.last().expect("input present"));
        pre += &params.column(arch.bias(l)).insert_axis(Axis(1));
        pre.mapv_inplace(|v| v.max(0.0));
        acts.push(pre);
    }
    let mut out = params.block(arch.weight(arch.hidden_layers)).dot(acts.last().expect("input present"));
    out += &params.column(arch.bias(arch.hidden_layers)).insert_axis(Axis(1));
    (acts, out)
}

/// Recorded forward pass over a batch of raw windows, enough to replay gradients.
#[derive(Debug, Clone)]
pub struct GradientTape {
    /// Scaler-normalized inputs, `L × B`.
    z: Array2<f64>,
    acts: Vec<Array2<f64>>,
    out: Array2<f64>,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl GradientTape {
    /// Fits one scaler per window (rows of `windows`, `B × L`) and runs the network.
    pub fn record(params: &ParameterSet, kind: ScalerKind, windows: ArrayView2<'_, f64>) -> Result<Self> {
        let arch = params.arch;
        if windows.ncols() != arch.input_len {
            return Err(Error::shape(format!("windows of {} for input length {}", windows.ncols(), arch.input_len)));
        }
        let b = windows.nrows();
        let mut z = Array2::zeros((arch.input_len, b));
        let (mut shift, mut scale) = (Vec::with_capacity(b), Vec::with_capacity(b));
        for (j, w) in windows.rows().into_iter().enumerate() {
            let w = w.to_vec();
            let (a, s) = fit_window(&w, kind)?;
            for (t, v) in w.iter().enumerate() {
                z[[t, j]] = (v - a) / s;
            }
            shift.push(a);
            scale.push(s);
        }
        let (acts, out) = run_layers(params, z.view());
        Ok(Self { z, acts, out, shift, scale })
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// Data-unit mixture over the recorded windows (series = windows).
    pub fn mixture(&self, params: &ParameterSet) -> Result<MixtureParams> {
        let arch = params.arch;
        let (k, h, b) = (arch.n_components, arch.horizon, self.out.ncols());
        let (lam, beta) = params.revin();
        let mut loc = Array3::zeros((b, k, h));
        let mut scl = Array3::zeros((b, k, h));
        for i in 0..b {
            for c in 0..k {
                for t in 0..h {
                    let om = self.out[[c * h + t, i]];
                    let ws = softplus(self.out[[k * h + c * h + t, i]]) + SCALE_FLOOR;
                    loc[[i, c, t]] = self.scale[i] * ((om - beta) / lam) + self.shift[i];
                    scl[[i, c, t]] = self.scale[i] * (ws / lam.abs());
                }
            }
        }
        MixtureParams::new(params.mixture_weights(), loc, scl)
    }
}

/// Loss value, normalized-space loss and gradient for one composite batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    /// `loss - H Σ ln b`: the same objective measured in normalized units.
    pub normalized_loss: f64,
    pub grad: Vec<f64>,
}

/// Joint mixture NLL of one batch (`windows`: `B × L`, `targets`: `B × H`) and its gradient.
pub fn loss_and_grad(
    params: &ParameterSet,
    kind: ScalerKind,
    windows: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<LossAndGrad> {
    loss_and_grad_grouped(params, kind, windows, targets, 1)
}

/// Mean joint NLL over `n_groups` equal consecutive row blocks, each one
/// composite batch observed at its own window start.
pub fn loss_and_grad_grouped(
    params: &ParameterSet,
    kind: ScalerKind,
    windows: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    n_groups: usize,
) -> Result<LossAndGrad> {
    let arch = params.arch;
    let (k, h) = (arch.n_components, arch.horizon);
    let rows = windows.nrows();
    if targets.dim() != (rows, h) || rows == 0 {
        return Err(Error::shape(format!("targets {:?} for {rows} windows and horizon {h}", targets.dim())));
    }
    if n_groups == 0 || rows % n_groups != 0 {
        return Err(Error::shape(format!("{rows} windows do not split into {n_groups} equal groups")));
    }
    let b = rows / n_groups;
    let inv_g = 1.0 / n_groups as f64;
    let tape = GradientTape::record(params, kind, windows)?;
    let (lam, beta) = params.revin();
    let weights = params.mixture_weights();
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();

    let mut loss = 0.0;
    let mut resp = vec![vec![0.0; k]; n_groups];
    for (g, r) in resp.iter_mut().enumerate() {
        let mut ll = log_w.clone();
        for i in g * b..(g + 1) * b {
            let (a, s) = (tape.shift[i], tape.scale[i]);
            for c in 0..k {
                for t in 0..h {
                    let om = tape.out[[c * h + t, i]];
                    let ws = softplus(tape.out[[k * h + c * h + t, i]]) + SCALE_FLOOR;
                    let mu = s * ((om - beta) / lam) + a;
                    let sigma = s * (ws / lam.abs());
                    let e = (targets[[i, t]] - mu) / sigma;
                    ll[c] += -0.5 * (e * e + LN_2PI) - sigma.ln();
                }
            }
        }
        let lse = log_sum_exp(&ll);
        loss -= lse * inv_g;
        for c in 0..k {
            r[c] = (ll[c] - lse).exp();
        }
    }
    let normalized_loss = loss - h as f64 * inv_g * tape.scale.iter().map(|s| s.ln()).sum::<f64>();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss over {n_groups} batches of {b} windows")));
    }

    let mut grad = vec![0.0; params.len()];
    let logits_at = params.layout[arch.logits()].offset;
    for r in &resp {
        for c in 0..k {
            grad[logits_at + c] += (weights[c] - r[c]) * inv_g;
        }
    }
    let (mut d_lam, mut d_beta) = (0.0, 0.0);
    let mut d_out = Array2::zeros(tape.out.raw_dim());
    for i in 0..rows {
        let r = &resp[i / b];
        let (a, s) = (tape.shift[i], tape.scale[i]);
        for c in 0..k {
            for t in 0..h {
                let om = tape.out[[c * h + t, i]];
                let raw = tape.out[[k * h + c * h + t, i]];
                let ws = softplus(raw) + SCALE_FLOOR;
                let mu = s * ((om - beta) / lam) + a;
                let sigma = s * (ws / lam.abs());
                let e = targets[[i, t]] - mu;
                let d_mu = -r[c] * inv_g * e / (sigma * sigma);
                let d_sigma = r[c] * inv_g * (1.0 / sigma - e * e / (sigma * sigma * sigma));
                let d_om_prime = s * d_mu;
                let d_ws_prime = s * d_sigma;
                d_out[[c * h + t, i]] = d_om_prime / lam;
                d_out[[k * h + c * h + t, i]] = d_ws_prime / lam.abs() * sigmoid(raw);
                d_beta -= d_om_prime / lam;
                d_lam -= d_om_prime * (om - beta) / (lam * lam) + d_ws_prime * ws * lam.signum() / (lam * lam);
            }
        }
    }

    let mut upstream = d_out;
    for layer in (0..=arch.hidden_layers).rev() {
        let input = &tape.acts[layer];
        {
            let e = &params.layout[arch.weight(layer)];
            let mut gw = ArrayViewMut2::from_shape((e.rows, e.cols), &mut grad[e.offset..e.offset + e.len()])
                .expect("layout matches storage");
            gw += &upstream.dot(&input.t());
        }
        let gb_at = params.layout[arch.bias(layer)].offset;
        for (r, row) in upstream.rows().into_iter().enumerate() {
            grad[gb_at + r] += row.sum();
        }
        let mut down = params.block(arch.weight(layer)).t().dot(&upstream);
        if layer > 0 {
            down.zip_mut_with(input, |d, &act| {
                if act <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        upstream = down;
    }
    if arch.revin {
        d_lam += upstream.iter().zip(tape.z.iter()).map(|(d, z)| d * z).sum::<f64>();
        d_beta += upstream.sum();
        grad[params.layout[arch.lambda()].offset] = d_lam;
        grad[params.layout[arch.beta()].offset] = d_beta;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient over {n_groups} batches of {b} windows")));
    }
    Ok(LossAndGrad { loss, normalized_loss, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(revin: bool, k: usize) -> Architecture {
        Architecture { input_len: 6, width: 8, hidden_layers: 2, n_components: k, horizon: 3, revin }
    }

    pub(crate) fn batch(seed: u64, b: usize, l: usize, h: usize) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let base: Vec<f64> = (0..b).map(|_| rng.random_range(5.0..50.0)).collect();
        let w = Array::from_shape_fn((b, l), |(i, _)| base[i] + rng.random_range(-3.0..3.0));
        let y = Array::from_shape_fn((b, h), |(i, _)| base[i] + rng.random_range(-3.0..3.0));
        (w, y)
    }

    pub(crate) fn perturbed(p: &ParameterSet, rng: &mut ChaCha8Rng) -> ParameterSet {
        let mut q = p.clone();
        let lam_at = p.arch.revin.then(|| p.layout[p.arch.lambda()].offset);
        for (j, v) in q.values.iter_mut().enumerate() {
            if Some(j) == lam_at {
                *v = rng.random_range(0.6..1.4);
            } else {
                *v += 0.3 * rng.random_range(-1.0..1.0);
            }
        }
        q
    }

    /// Fourth-order central differences (step 1e-5) on every coordinate.
    pub(crate) fn max_fd_error(p: &ParameterSet, kind: ScalerKind, w: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> f64 {
        let analytic = loss_and_grad(p, kind, w, y).unwrap().grad;
        let h = 1e-5;
        let at = |j: usize, d: f64| {
            let mut q = p.clone();
            q.values[j] += d;
            loss_and_grad(&q, kind, w, y).unwrap().loss
        };
        let mut worst = 0.0f64;
        for j in 0..p.len() {
            let fd = (8.0 * (at(j, h) - at(j, -h)) - (at(j, 2.0 * h) - at(j, -2.0 * h))) / (12.0 * h);
            let err = (fd - analytic[j]).abs() / analytic[j].abs().max(fd.abs()).max(1e-3);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn zero_parameters_give_uniform_mixture() {
        let p = ParameterSet::zeros(arch(false, 4)).unwrap();
        let out = forward(&p, &[0.3; 6]).unwrap();
        assert_eq!(out.weights, vec![0.25; 4]);
        assert!(out.locations.iter().all(|&m| m == 0.0));
        assert!(out.scales.iter().all(|&s| (s - 2f64.ln()).abs() < 1e-5));
        let single = ParameterSet::zeros(arch(false, 1)).unwrap();
        assert_eq!(forward(&single, &[1.0; 6]).unwrap().weights, vec![1.0]);
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ParameterSet::init(arch(true, 3), &mut rng).unwrap();
        let w = [0.1, -0.5, 0.7, 1.1, 0.0, -2.0];
        assert_eq!(forward(&p, &w).unwrap(), forward(&p, &w).unwrap());
        assert!(forward(&p, &w[..5]).is_err());
    }

    #[test]
    fn layout_covers_parameters_once() {
        for a in [arch(false, 2), arch(true, 5)] {
            let layout = a.layout();
            let mut next = 0;
            for e in &layout {
                assert_eq!(e.offset, next);
                next += e.len();
            }
            assert_eq!(next, a.n_params());
            let expected = 8 * 6 + 8 + 8 * 8 + 8 + a.output_len() * 8 + a.output_len() + a.n_components + 2 * a.revin as usize;
            assert_eq!(a.n_params(), expected);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            for kind in ScalerKind::ALL {
                for k in [1, 3] {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let p = perturbed(&ParameterSet::init(arch(kind == ScalerKind::Revin, k), &mut rng).unwrap(), &mut rng);
                    let (w, y) = batch(seed, 2, 6, 3);
                    let err = max_fd_error(&p, kind, w.view(), y.view());
                    assert!(err < 1e-4, "seed {seed} {kind} K={k}: {err}");
                }
            }
        }
    }

    #[test]
    fn unit_scale_single_component_is_closed_form() {
        // K = 1 and a single series: zero network, output bias pins ω_σ = 1 so σ = b = 1 for a constant window
        let a = Architecture { input_len: 4, width: 3, hidden_layers: 1, n_components: 1, horizon: 3, revin: false };
        let mut p = ParameterSet::zeros(a).unwrap();
        let bias = p.layout[a.bias(1)].clone();
        let raw = (1.0 - SCALE_FLOOR).exp_m1().ln();
        for t in 0..3 {
            p.values[bias.offset + 3 + t] = raw;
        }
        let w = array![[7.0, 7.0, 7.0, 7.0]];
        let y = array![[8.0, 6.5, 7.25]];
        let got = loss_and_grad(&p, ScalerKind::Standard, w.view(), y.view()).unwrap().loss;
        let res: f64 = [1.0f64, -0.5, 0.25].iter().map(|r| r * r).sum();
        let expected = 0.5 * res + 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn duplicated_series_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = perturbed(&ParameterSet::init(arch(false, 2), &mut rng).unwrap(), &mut rng);
        let (w, y) = batch(4, 1, 6, 3);
        let w2 = ndarray::concatenate![Axis(0), w, w];
        let y2 = ndarray::concatenate![Axis(0), y, y];
        let got = loss_and_grad(&p, ScalerKind::Robust, w2.view(), y2.view()).unwrap().loss;
        // brute force: -ln Σ_κ w_κ Π_{copies, τ} N(y | μ, σ)
        let mix = GradientTape::record(&p, ScalerKind::Robust, w.view()).unwrap().mixture(&p).unwrap();
        let dens: f64 = (0..2)
            .map(|c| {
                let mut prod = 1.0;
                for t in 0..3 {
                    let (m, s) = (mix.locations()[[0, c, t]], mix.scales()[[0, c, t]]);
                    let d = (-(y[[0, t]] - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                    prod *= d * d;
                }
                mix.weights()[c] * prod
            })
            .sum();
        assert!((got + dens.ln()).abs() < 1e-9 * got.abs().max(1.0), "{got} vs {}", -dens.ln());
    }

    #[test]
    fn grouped_loss_is_mean_of_group_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = perturbed(&ParameterSet::init(arch(true, 3), &mut rng).unwrap(), &mut rng);
        let (w1, y1) = batch(1, 2, 6, 3);
        let (w2, y2) = batch(2, 2, 6, 3);
        let w = ndarray::concatenate![Axis(0), w1, w2];
        let y = ndarray::concatenate![Axis(0), y1, y2];
        let both = loss_and_grad_grouped(&p, ScalerKind::Revin, w.view(), y.view(), 2).unwrap();
        let a = loss_and_grad(&p, ScalerKind::Revin, w1.view(), y1.view()).unwrap();
        let b = loss_and_grad(&p, ScalerKind::Revin, w2.view(), y2.view()).unwrap();
        assert!((both.loss - 0.5 * (a.loss + b.loss)).abs() < 1e-12);
        assert!((both.normalized_loss - 0.5 * (a.normalized_loss + b.normalized_loss)).abs() < 1e-12);
        for j in 0..p.len() {
            assert!((both.grad[j] - 0.5 * (a.grad[j] + b.grad[j])).abs() < 1e-12);
        }
        assert!(loss_and_grad_grouped(&p, ScalerKind::Revin, w.view(), y.view(), 3).is_err());
    }

    #[test]
    fn loss_matches_mixture_joint_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = perturbed(&ParameterSet::init(arch(true, 3), &mut rng).unwrap(), &mut rng);
        let (w, y) = batch(7, 3, 6, 3);
        let got = loss_and_grad(&p, ScalerKind::Revin, w.view(), y.view()).unwrap();
        let mix = GradientTape::record(&p, ScalerKind::Revin, w.view()).unwrap().mixture(&p).unwrap();
        assert!((got.loss - mix.joint_nll(y.view()).unwrap()).abs() < 1e-9 * got.loss.abs().max(1.0));
    }

    #[test]
    fn normalized_loss_is_invariant_to_affine_data_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = perturbed(&ParameterSet::init(arch(false, 2), &mut rng).unwrap(), &mut rng);
        let (w, y) = batch(3, 2, 6, 3);
        for kind in [ScalerKind::Standard, ScalerKind::Robust] {
            let base = loss_and_grad(&p, kind, w.view(), y.view()).unwrap();
            let moved = loss_and_grad(&p, kind, (&w * 37.0 + 1000.0).view(), (&y * 37.0 + 1000.0).view()).unwrap();
            assert!((base.normalized_loss - moved.normalized_loss).abs() < 1e-8);
        }
    }

    #[test]
    fn output_is_affine_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ParameterSet::init(arch(false, 2), &mut rng).unwrap();
        let (w, _) = batch(1, 2, 6, 3);
        let (c, d) = (3.5, -12.0);
        for kind in [ScalerKind::Standard, ScalerKind::Robust] {
            let m0 = GradientTape::record(&p, kind, w.view()).unwrap().mixture(&p).unwrap();
            let m1 = GradientTape::record(&p, kind, (&w * c + d).view()).unwrap().mixture(&p).unwrap();
            for (a, b) in m0.locations().iter().zip(m1.locations()) {
                assert!((c * a + d - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
            for (a, b) in m0.scales().iter().zip(m1.scales()) {
                assert!((c * a - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn validate_rejects_mismatched_storage() {
        let mut p = ParameterSet::zeros(arch(false, 2)).unwrap();
        p.values.pop();
        assert!(p.validate().is_err());
    }
}
