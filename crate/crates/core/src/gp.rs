//! Gaussian-process surrogate and expected-improvement rate search.
//!
//! [`GpModel`] evaluates the textbook posterior on whatever inputs it is
//! given. [`Surrogate`] wraps it with per-dimension standardisation of inputs
//! and targets and exposes a fast one-dimensional slice over the rate
//! coordinate for a fixed state, which is what the acquisition search needs.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{normal_cdf, normal_pdf};

const SQRT5: f64 = 2.236_067_977_499_79;

/// Matérn ν = 5/2 kernel with per-dimension length-scales.
///
/// A single length-scale is broadcast to every dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matern52 {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
}

impl Matern52 {
    pub fn isotropic(lengthscale: f64, signal_variance: f64) -> Self {
        Self { lengthscales: vec![lengthscale], signal_variance }
    }

    fn lengthscale(&self, dim: usize) -> f64 {
        if self.lengthscales.len() == 1 {
            self.lengthscales[0]
        } else {
            self.lengthscales[dim]
        }
    }

    /// Squared scaled distance.
    pub fn distance_sqr(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(j, (x, y))| {
                let d = (x - y) / self.lengthscale(j);
                d * d
            })
            .sum()
    }

    pub fn from_distance_sqr(&self, r2: f64) -> f64 {
        let r = r2.sqrt();
        self.signal_variance * (1.0 + SQRT5 * r + 5.0 * r2 / 3.0) * (-SQRT5 * r).exp()
    }

    /// `dk / d(r²)`.
    fn derivative_wrt_distance_sqr(&self, r2: f64) -> f64 {
        let r = r2.sqrt();
        -5.0 / 6.0 * self.signal_variance * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.from_distance_sqr(self.distance_sqr(a, b))
    }

    pub fn prior_variance(&self) -> f64 {
        self.signal_variance
    }
}

/// Bounded FIFO of `(input, observed value)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateDataset {
    inputs: VecDeque<Vec<f64>>,
    targets: VecDeque<f64>,
    capacity: usize,
}

impl SurrogateDataset {
    pub fn new(capacity: usize) -> Self {
        Self { inputs: VecDeque::new(), targets: VecDeque::new(), capacity: capacity.max(1) }
    }

    pub fn from_pairs(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch { expected: inputs.len(), got: targets.len() });
        }
        let capacity = inputs.len().max(1);
        Ok(Self { inputs: inputs.into(), targets: targets.into(), capacity })
    }

    /// Appends a sample, evicting the oldest one when full.
    pub fn push(&mut self, input: Vec<f64>, target: f64) {
        if self.inputs.len() == self.capacity {
            self.inputs.pop_front();
            self.targets.pop_front();
        }
        self.inputs.push_back(input);
        self.targets.push_back(target);
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inputs(&self) -> impl ExactSizeIterator<Item = &Vec<f64>> {
        self.inputs.iter()
    }

    pub fn targets(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.targets.iter().copied()
    }

    /// Best observed value, the EI incumbent.
    pub fn max_target(&self) -> Option<f64> {
        self.targets.iter().copied().reduce(f64::max)
    }
}

/// Zero-mean GP prior plus Gaussian observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub kernel: Matern52,
    pub noise_variance: f64,
}

/// Factorised posterior for one dataset.
#[derive(Debug, Clone)]
pub struct FittedGp {
    kernel: Matern52,
    inputs: Vec<Vec<f64>>,
    /// Row-major lower Cholesky factor of `A + σ_o² I`.
    chol: Vec<f64>,
    /// `(A + σ_o² I)⁻¹ Q`.
    alpha: Vec<f64>,
}

impl GpModel {
    pub fn new(kernel: Matern52, noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0) {
            return Err(invalid("GP observation noise must be positive"));
        }
        Ok(Self { kernel, noise_variance })
    }

    pub fn fit(&self, data: &SurrogateDataset) -> Result<FittedGp> {
        let inputs: Vec<Vec<f64>> = data.inputs().cloned().collect();
        let targets: Vec<f64> = data.targets().collect();
        self.fit_raw(inputs, &targets)
    }

    fn fit_raw(&self, inputs: Vec<Vec<f64>>, targets: &[f64]) -> Result<FittedGp> {
        let n = inputs.len();
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let k = self.kernel.eval(&inputs[i], &inputs[j]);
                gram[i * n + j] = k;
                gram[j * n + i] = k;
            }
            gram[i * n + i] += self.noise_variance;
        }
        let chol = cholesky(gram, n)?;
        let alpha = cholesky_solve(&chol, n, targets);
        Ok(FittedGp { kernel: self.kernel.clone(), inputs, chol, alpha })
    }

    /// Posterior mean and variance at `query`.
    pub fn posterior(&self, data: &SurrogateDataset, query: &[f64]) -> Result<(f64, f64)> {
        Ok(self.fit(data)?.predict(query))
    }
}

impl FittedGp {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn predict(&self, query: &[f64]) -> (f64, f64) {
        let cross: Vec<f64> = self.inputs.iter().map(|x| self.kernel.eval(x, query)).collect();
        self.predict_from_cross(&cross)
    }

    fn predict_from_cross(&self, cross: &[f64]) -> (f64, f64) {
        let n = self.inputs.len();
        let prior = self.kernel.prior_variance();
        if n == 0 {
            return (0.0, prior);
        }
        let mean = dot(cross, &self.alpha);
        let v = forward_substitute(&self.chol, n, cross);
        let var = (prior - dot(&v, &v)).clamp(0.0, prior);
        (mean, var)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place lower Cholesky factorisation of a row-major SPD matrix.
pub(crate) fn cholesky(mut a: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Singular(format!("covariance not positive definite at pivot {j}")));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in (j + 1)..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(a)
}

/// Solves `L x = b`.
pub(crate) fn forward_substitute(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        let s: f64 = row.iter().zip(&x[..i]).map(|(a, b)| a * b).sum();
        x[i] = (x[i] - s) / l[i * n + i];
    }
    x
}

/// Solves `Lᵀ x = b`.
fn backward_substitute(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    backward_substitute(l, n, &forward_substitute(l, n, b))
}

/// Expected improvement over `incumbent`.
pub fn expected_improvement(mean: f64, std: f64, incumbent: f64) -> f64 {
    let gain = mean - incumbent;
    if std <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / std;
    (gain * normal_cdf(z) + std * normal_pdf(z)).max(0.0)
}

/// `d EI / d r` given the derivatives of mean and standard deviation.
pub fn expected_improvement_slope(pred: &Prediction, incumbent: f64) -> f64 {
    let gain = pred.mean - incumbent;
    if pred.std <= 0.0 {
        return if gain > 0.0 { pred.dmean } else { 0.0 };
    }
    let z = gain / pred.std;
    normal_cdf(z) * pred.dmean + normal_pdf(z) * pred.dstd
}

/// Posterior summary at one rate, with derivatives along the rate axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub std: f64,
    pub dmean: f64,
    pub dstd: f64,
}

/// A posterior restricted to the rate coordinate.
pub trait RatePosterior {
    fn predict(&self, rate: f64) -> Prediction;

    /// `(mean, std)` without derivatives.
    fn value(&self, rate: f64) -> (f64, f64) {
        let p = self.predict(rate);
        (p.mean, p.std)
    }
}

impl<F: Fn(f64) -> Prediction> RatePosterior for F {
    fn predict(&self, rate: f64) -> Prediction {
        self(rate)
    }
}

/// Acquisition search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EiSearch {
    pub grid_points: usize,
    pub starts: usize,
    pub max_iters: usize,
}

impl Default for EiSearch {
    fn default() -> Self {
        Self { grid_points: 64, starts: 8, max_iters: 12 }
    }
}

/// Maximises EI over `(0, r_max]`: grid scan, then gradient ascent from the
/// best grid points. Flat maxima resolve to the middle of the tied run
/// (lower middle on even runs).
pub fn select_rate_ei(posterior: &impl RatePosterior, incumbent: f64, r_max: f64, search: &EiSearch) -> f64 {
    let n = search.grid_points.max(1);
    let h = r_max / n as f64;
    let grid: Vec<f64> = (1..=n).map(|i| h * i as f64).collect();
    let scores: Vec<f64> = grid
        .iter()
        .map(|&r| {
            let (m, sd) = posterior.value(r);
            expected_improvement(m, sd, incumbent)
        })
        .collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * best.abs().max(1e-300);
    let tied: Vec<usize> = (0..n).filter(|&i| best - scores[i] <= tol).collect();
    if tied.len() > 1 && tied.len() == n {
        return grid[(tied.len() - 1) / 2];
    }
    let mut best_rate = grid[tied[(tied.len() - 1) / 2]];
    let mut best_score = best;

    let peak = |i: usize| {
        (i == 0 || scores[i] >= scores[i - 1]) && (i + 1 == n || scores[i] >= scores[i + 1])
    };
    let mut order: Vec<usize> = (0..n).filter(|&i| peak(i)).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let lo = h * 1e-3;
    for &start in order.iter().take(search.starts) {
        let mut r = grid[start];
        let mut score = scores[start];
        let mut step = h;
        for _ in 0..search.max_iters {
            let pred = posterior.predict(r);
            let slope = expected_improvement_slope(&pred, incumbent);
            if slope == 0.0 || !slope.is_finite() {
                break;
            }
            let mut moved = false;
            while step > h * 1e-3 {
                let trial = (r + step * slope.signum()).clamp(lo, r_max);
                let (m, sd) = posterior.value(trial);
                let s = expected_improvement(m, sd, incumbent);
                if s > score {
                    r = trial;
                    score = s;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if score > best_score {
            best_score = score;
            best_rate = r;
        }
    }
    best_rate
}

/// Standardising wrapper used by the optimizers.
///
/// Inputs are `[rate, state...]`. The rate is only centred and keeps its
/// own length-scale in bits/symbol; state coordinates are standardised and
/// share another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub rate_lengthscale: f64,
    /// `None` scales with the square root of the state dimension.
    pub state_lengthscale: Option<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Default for Surrogate {
    fn default() -> Self {
        Self { rate_lengthscale: 1.0, state_lengthscale: None, signal_variance: 1.0, noise_variance: 1e-2 }
    }
}

/// A fitted, standardised surrogate.
#[derive(Debug, Clone)]
pub struct FittedSurrogate {
    gp: FittedGp,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    target_mean: f64,
    target_scale: f64,
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 1e-9 { sd } else { 1.0 })
}

impl Surrogate {
    pub fn fit(&self, data: &SurrogateDataset) -> Result<FittedSurrogate> {
        let dim = data.inputs().next().map_or(1, |x| x.len());
        let mut input_mean = vec![0.0; dim];
        let mut input_scale = vec![1.0; dim];
        if !data.is_empty() {
            for j in 0..dim {
                let (m, s) = moments(&data.inputs().map(|x| x[j]).collect::<Vec<_>>());
                input_mean[j] = m;
                input_scale[j] = if j == 0 { 1.0 } else { s };
            }
        }
        let (target_mean, target_scale) =
            if data.is_empty() { (0.0, 1.0) } else { moments(&data.targets().collect::<Vec<_>>()) };
        let state_ls = self.state_lengthscale.unwrap_or(((dim.saturating_sub(1)).max(1) as f64).sqrt());
        let mut lengthscales = vec![state_ls; dim];
        lengthscales[0] = self.rate_lengthscale;
        let model = GpModel::new(Matern52 { lengthscales, signal_variance: self.signal_variance }, self.noise_variance)?;
        let inputs: Vec<Vec<f64>> = data
            .inputs()
            .map(|x| x.iter().enumerate().map(|(j, v)| (v - input_mean[j]) / input_scale[j]).collect())
            .collect();
        let targets: Vec<f64> = data.targets().map(|y| (y - target_mean) / target_scale).collect();
        let gp = model.fit_raw(inputs, &targets)?;
        Ok(FittedSurrogate { gp, input_mean, input_scale, target_mean, target_scale })
    }
}

impl FittedSurrogate {
    pub fn len(&self) -> usize {
        self.gp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gp.is_empty()
    }

    /// Posterior slice along the rate axis for a fixed `state`.
    pub fn slice<'a>(&'a self, state: &[f64]) -> RateSlice<'a> {
        let kernel = &self.gp.kernel;
        let state_dist: Vec<f64> = self
            .gp
            .inputs
            .iter()
            .map(|x| {
                x.iter()
                    .enumerate()
                    .skip(1)
                    .map(|(j, v)| {
                        let q = state.get(j - 1).copied().unwrap_or(0.0);
                        let d = ((q - self.input_mean[j]) / self.input_scale[j] - v) / kernel.lengthscale(j);
                        d * d
                    })
                    .sum()
            })
            .collect();
        RateSlice { fit: self, state_dist }
    }

    /// Mean and variance in target units at `[rate, state...]`.
    pub fn predict(&self, input: &[f64]) -> (f64, f64) {
        let p = self.slice(&input[1..]).predict(input[0]);
        (p.mean, p.std * p.std)
    }
}

/// See [`FittedSurrogate::slice`].
pub struct RateSlice<'a> {
    fit: &'a FittedSurrogate,
    state_dist: Vec<f64>,
}

impl RateSlice<'_> {
    fn cross(&self, rate: f64) -> (f64, Vec<f64>) {
        let fit = self.fit;
        let gp = &fit.gp;
        let ls = gp.kernel.lengthscale(0);
        let r_std = (rate - fit.input_mean[0]) / fit.input_scale[0];
        let cross = gp
            .inputs
            .iter()
            .zip(&self.state_dist)
            .map(|(x, sd)| {
                let dr = (r_std - x[0]) / ls;
                gp.kernel.from_distance_sqr(sd + dr * dr)
            })
            .collect();
        (r_std, cross)
    }
}

impl RatePosterior for RateSlice<'_> {
    fn value(&self, rate: f64) -> (f64, f64) {
        let fit = self.fit;
        let gp = &fit.gp;
        let n = gp.inputs.len();
        let prior = gp.kernel.prior_variance();
        if n == 0 {
            return (fit.target_mean, fit.target_scale * prior.sqrt());
        }
        let (_, cross) = self.cross(rate);
        let v = forward_substitute(&gp.chol, n, &cross);
        let var_s = (prior - dot(&v, &v)).clamp(0.0, prior);
        (fit.target_mean + fit.target_scale * dot(&cross, &gp.alpha), fit.target_scale * var_s.sqrt())
    }

    fn predict(&self, rate: f64) -> Prediction {
        let fit = self.fit;
        let gp = &fit.gp;
        let n = gp.inputs.len();
        let (ys, ym) = (fit.target_scale, fit.target_mean);
        let prior = gp.kernel.prior_variance();
        if n == 0 {
            return Prediction { mean: ym, std: ys * prior.sqrt(), dmean: 0.0, dstd: 0.0 };
        }
        let ls = gp.kernel.lengthscale(0);
        let r_std = (rate - fit.input_mean[0]) / fit.input_scale[0];
        let mut cross = Vec::with_capacity(n);
        let mut dcross = Vec::with_capacity(n);
        for (x, sd) in gp.inputs.iter().zip(&self.state_dist) {
            let dr = (r_std - x[0]) / ls;
            let r2 = sd + dr * dr;
            cross.push(gp.kernel.from_distance_sqr(r2));
            let d_r2_d_rate = 2.0 * dr / (ls * fit.input_scale[0]);
            dcross.push(gp.kernel.derivative_wrt_distance_sqr(r2) * d_r2_d_rate);
        }
        let mean_s = dot(&cross, &gp.alpha);
        let dmean_s = dot(&dcross, &gp.alpha);
        let v = forward_substitute(&gp.chol, n, &cross);
        let dv = forward_substitute(&gp.chol, n, &dcross);
        let var_s = (prior - dot(&v, &v)).clamp(0.0, prior);
        let std_s = var_s.sqrt();
        let dstd_s = if std_s > 1e-12 { -dot(&v, &dv) / std_s } else { 0.0 };
        Prediction { mean: ym + ys * mean_s, std: ys * std_s, dmean: ys * dmean_s, dstd: ys * dstd_s }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(noise: f64) -> GpModel {
        GpModel::new(Matern52::isotropic(1.0, 1.0), noise).unwrap()
    }

    #[test]
    fn empty_dataset_is_prior() {
        let data = SurrogateDataset::new(8);
        let (m, v) = model(1e-2).posterior(&data, &[0.3, 0.1]).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn single_point_interpolates_without_noise() {
        let mut data = SurrogateDataset::new(8);
        data.push(vec![0.5, -0.2], 3.0);
        let (m, v) = model(1e-12).posterior(&data, &[0.5, -0.2]).unwrap();
        assert!((m - 3.0).abs() < 1e-9);
        assert!(v < 1e-9);
    }

    #[test]
    fn fifo_eviction() {
        let mut data = SurrogateDataset::new(3);
        for i in 0..5 {
            data.push(vec![i as f64], i as f64);
        }
        assert_eq!(data.len(), 3);
        assert_eq!(data.targets().collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn noise_must_be_positive() {
        assert!(GpModel::new(Matern52::isotropic(1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn ei_at_zero_gain_is_pdf_at_zero() {
        assert!((expected_improvement(1.0, 1.0, 1.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert_eq!(expected_improvement(2.0, 0.0, 1.0), 1.0);
        assert_eq!(expected_improvement(0.5, 0.0, 1.0), 0.0);
    }

    #[test]
    fn flat_ei_picks_grid_middle() {
        let flat = |_r: f64| Prediction { mean: 0.0, std: 1.0, dmean: 0.0, dstd: 0.0 };
        let r = select_rate_ei(&flat, 0.0, 8.0, &EiSearch::default());
        assert_eq!(r, 8.0 * 32.0 / 64.0);
    }

    #[test]
    fn exploitation_limit_returns_mean_argmax() {
        let r0 = 2.345;
        let sharp = |r: f64| Prediction { mean: -(r - r0).powi(2), std: 0.0, dmean: -2.0 * (r - r0), dstd: 0.0 };
        let r = select_rate_ei(&sharp, -10.0, 6.0, &EiSearch::default());
        assert!((r - r0).abs() < 1e-4, "{r}");
    }

    #[test]
    fn slice_matches_direct_prediction() {
        let mut data = SurrogateDataset::new(32);
        for i in 0..12 {
            let r = 0.4 * i as f64;
            let s = vec![(i as f64).sin(), (i as f64 * 0.7).cos()];
            let mut x = vec![r];
            x.extend(&s);
            data.push(x, (r - 2.0).powi(2) + s[0]);
        }
        let fit = Surrogate::default().fit(&data).unwrap();
        let state = [0.2, -0.4];
        let slice = fit.slice(&state);
        for &r in &[0.1, 1.3, 2.7, 4.1] {
            let p = slice.predict(r);
            let (m, v) = fit.predict(&[r, state[0], state[1]]);
            assert!((p.mean - m).abs() < 1e-12);
            let (vm, vs) = slice.value(r);
            assert!((vm - p.mean).abs() < 1e-12 && (vs - p.std).abs() < 1e-12);
            assert!((p.std * p.std - v).abs() < 1e-12);
            // derivatives against central differences
            let h = 1e-6;
            let a = slice.predict(r + h);
            let b = slice.predict(r - h);
            assert!((p.dmean - (a.mean - b.mean) / (2.0 * h)).abs() < 1e-5 * (1.0 + p.dmean.abs()));
            assert!((p.dstd - (a.std - b.std) / (2.0 * h)).abs() < 1e-5 * (1.0 + p.dstd.abs()));
        }
    }
}
