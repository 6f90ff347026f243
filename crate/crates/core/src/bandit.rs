//! Device-selection bandits: the preference-assisted exponential-weights
//! learner used by GEXP-BO and plain UCB1 for the CMAB baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::SimRng;

/// Weights are kept in the log domain and shifted whenever the largest one
/// passes this bound. Selection probabilities are scale-invariant.
const LOG_WEIGHT_CEILING: f64 = 13.815_510_557_964_274; // ln(1e6)

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GexpParams {
    pub zeta_start: f64,
    pub zeta_end: f64,
    /// Implicit-exploration divisor in the importance-weighted estimate.
    pub implicit_exploration: f64,
    pub learning_rate: f64,
    pub preference_step: f64,
}

impl Default for GexpParams {
    fn default() -> Self {
        Self {
            zeta_start: 0.3,
            zeta_end: 0.05,
            implicit_exploration: 1.0,
            learning_rate: 0.1,
            preference_step: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GexpState {
    log_weights: Vec<f64>,
    preferences: Vec<f64>,
    mean_q: f64,
    rounds: u64,
    zeta: f64,
    params: GexpParams,
}

impl GexpState {
    pub fn new(arms: usize, params: GexpParams) -> Result<Self> {
        if arms == 0 {
            return Err(invalid("bandit needs at least one arm"));
        }
        if !(params.zeta_start > 0.0 && params.zeta_start <= 1.0 && params.zeta_end > 0.0 && params.zeta_end <= 1.0) {
            return Err(invalid("exploration share must lie in (0, 1]"));
        }
        if !(params.implicit_exploration > 0.0) {
            return Err(invalid("implicit exploration must be positive"));
        }
        Ok(Self {
            log_weights: vec![0.0; arms],
            preferences: vec![0.0; arms],
            mean_q: 0.0,
            rounds: 0,
            zeta: params.zeta_start,
            params,
        })
    }

    pub fn arms(&self) -> usize {
        self.log_weights.len()
    }

    /// Current weights, scaled so the largest is at most 1e6.
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn set_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.arms() || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(invalid("weights must be positive and finite, one per arm"));
        }
        self.log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(())
    }

    pub fn preferences(&self) -> &[f64] {
        &self.preferences
    }

    pub fn set_preferences(&mut self, preferences: &[f64]) -> Result<()> {
        if preferences.len() != self.arms() {
            return Err(invalid("one preference per arm"));
        }
        self.preferences = preferences.to_vec();
        Ok(())
    }

    pub fn mean_q(&self) -> f64 {
        self.mean_q
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    /// Linear exploration decay, `progress` in `[0, 1]`.
    pub fn set_progress(&mut self, progress: f64) {
        let p = progress.clamp(0.0, 1.0);
        self.zeta = self.params.zeta_start + (self.params.zeta_end - self.params.zeta_start) * p;
    }

    /// Selection distribution; `served[k]` excludes arm `k`.
    pub fn probabilities(&self, scores: &[f64], served: &[bool]) -> Result<Vec<f64>> {
        let k = self.arms();
        if scores.len() != k || served.len() != k {
            return Err(invalid("scores and mask must have one entry per arm"));
        }
        if served.iter().all(|&s| s) {
            return Err(invalid("every arm is masked"));
        }
        let open = |i: usize| !served[i];
        let top = (0..k).filter(|&i| open(i)).map(|i| self.log_weights[i]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..k).filter(|&i| open(i)).map(|i| (self.log_weights[i] - top).exp()).sum();
        let floor = self.zeta / (k as f64 + 1.0);
        let base: Vec<f64> = (0..k)
            .map(|i| {
                if open(i) {
                    (1.0 - self.zeta) * (self.log_weights[i] - top).exp() / total + floor
                } else {
                    0.0
                }
            })
            .collect();
        let logits: Vec<f64> = (0..k)
            .map(|i| if open(i) { self.preferences[i] * scores[i] + base[i].ln() } else { f64::NEG_INFINITY })
            .collect();
        let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|l| (l - peak).exp()).collect();
        let norm: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= norm);
        Ok(p)
    }

    /// Samples an arm; returns it with the distribution it was drawn from.
    pub fn select(&self, scores: &[f64], served: &[bool], rng: &mut SimRng) -> Result<(usize, Vec<f64>)> {
        let p = self.probabilities(scores, served)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, &pi) in p.iter().enumerate() {
            if pi <= 0.0 {
                continue;
            }
            chosen = Some(i);
            acc += pi;
            if u < acc {
                break;
            }
        }
        Ok((chosen.expect("at least one open arm"), p))
    }

    /// Importance-weighted exponential update plus preference gradient step.
    pub fn update(&mut self, chosen: usize, q: f64, probabilities: &[f64]) -> Result<()> {
        let k = self.arms();
        let pk = probabilities[chosen];
        if !(pk > 0.0) {
            return Err(invalid("chosen arm had zero probability"));
        }
        if !q.is_finite() {
            return Err(crate::Error::NonFinite(format!("bandit observation {q}")));
        }
        let estimate = q / (pk * self.params.implicit_exploration);
        self.log_weights[chosen] += self.params.learning_rate * estimate / (k as f64 + 1.0);
        let advantage = q - self.mean_q;
        let step = self.params.preference_step * advantage;
        for (j, d) in self.preferences.iter_mut().enumerate() {
            if j == chosen {
                *d += step * (1.0 - pk);
            } else {
                *d -= step * probabilities[j];
            }
        }
        self.rounds += 1;
        self.mean_q += (q - self.mean_q) / self.rounds as f64;
        let top = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top > LOG_WEIGHT_CEILING {
            self.log_weights.iter_mut().for_each(|l| *l -= top);
        }
        Ok(())
    }
}

/// UCB1 over devices with a frame mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ucb1 {
    counts: Vec<u64>,
    means: Vec<f64>,
    exploration: f64,
}

impl Ucb1 {
    pub fn new(arms: usize, exploration: f64) -> Self {
        Self { counts: vec![0; arms], means: vec![0.0; arms], exploration }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    /// Unpulled open arms first (lowest index), then the largest index.
    pub fn select(&self, served: &[bool]) -> Result<usize> {
        let open: Vec<usize> = (0..self.counts.len()).filter(|&i| !served[i]).collect();
        if open.is_empty() {
            return Err(invalid("every arm is masked"));
        }
        if let Some(&i) = open.iter().find(|&&i| self.counts[i] == 0) {
            return Ok(i);
        }
        let total: u64 = self.counts.iter().sum();
        let ln_n = (total as f64).ln();
        let index = |i: usize| self.means[i] + self.exploration * (ln_n / self.counts[i] as f64).sqrt();
        Ok(open.into_iter().fold(usize::MAX, |best, i| {
            if best == usize::MAX || index(i) > index(best) {
                i
            } else {
                best
            }
        }))
    }

    pub fn update(&mut self, arm: usize, reward: f64) {
        self.counts[arm] += 1;
        self.means[arm] += (reward - self.means[arm]) / self.counts[arm] as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn gexp(arms: usize, zeta: f64) -> GexpState {
        GexpState::new(arms, GexpParams { zeta_start: zeta, zeta_end: zeta, ..GexpParams::default() }).unwrap()
    }

    #[test]
    fn symmetric_state_is_uniform() {
        let g = gexp(4, 0.3);
        let p = g.probabilities(&[0.0; 4], &[false; 4]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_open_arm_is_certain() {
        let g = gexp(4, 0.3);
        let p = g.probabilities(&[1.0, 2.0, 3.0, 4.0], &[true, true, false, true]).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn masked_weights_renormalise() {
        let mut g = gexp(4, 1e-300);
        g.set_weights(&[2.0, 1.0, 1.0, 1e-3]).unwrap();
        let p = g.probabilities(&[0.0; 4], &[false, false, false, true]).unwrap();
        let expected = [0.5, 0.25, 0.25, 0.0];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_masked_rejected() {
        assert!(gexp(2, 0.3).probabilities(&[0.0; 2], &[true; 2]).is_err());
    }

    #[test]
    fn zero_observation_keeps_weights() {
        let mut g = gexp(3, 0.3);
        g.update(0, 2.0, &[1.0 / 3.0; 3]).unwrap();
        let w = g.weights();
        let prefs = g.preferences().to_vec();
        let mean = g.mean_q();
        let p = [0.5, 0.25, 0.25];
        g.update(1, 0.0, &p).unwrap();
        assert_eq!(g.weights(), w);
        let alpha = GexpParams::default().preference_step;
        assert!((g.preferences()[1] - (prefs[1] - alpha * mean * 0.75)).abs() < 1e-12);
        assert!((g.preferences()[0] - (prefs[0] + alpha * mean * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn observation_at_mean_keeps_preferences() {
        let mut g = gexp(3, 0.3);
        g.update(0, 0.0, &[1.0 / 3.0; 3]).unwrap();
        g.update(2, 0.0, &[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(g.preferences(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rescaling_weights_leaves_distribution() {
        let mut g = gexp(3, 0.2);
        g.set_preferences(&[0.3, -0.1, 0.2]).unwrap();
        g.set_weights(&[3.0, 1.0, 0.5]).unwrap();
        let a = g.probabilities(&[1.0, 0.5, -0.2], &[false; 3]).unwrap();
        g.set_weights(&[3e7, 1e7, 0.5e7]).unwrap();
        let b = g.probabilities(&[1.0, 0.5, -0.2], &[false; 3]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn huge_observations_stay_finite() {
        let mut g = gexp(2, 0.1);
        for _ in 0..1000 {
            g.update(0, 1e6, &[0.01, 0.99]).unwrap();
        }
        assert!(g.weights().iter().all(|w| w.is_finite() && *w >= 0.0 && *w <= 1e6 + 1.0));
        let p = g.probabilities(&[0.0; 2], &[false; 2]).unwrap();
        assert!(p.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn ucb_cold_start_in_index_order() {
        let mut u = Ucb1::new(3, 2f64.sqrt());
        let mut order = Vec::new();
        for _ in 0..3 {
            let a = u.select(&[false; 3]).unwrap();
            order.push(a);
            u.update(a, 1.0);
        }
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn ucb_prefers_best_arm() {
        let mut u = Ucb1::new(3, 2f64.sqrt());
        let means = [0.2, 0.9, 0.5];
        let mut rng = stream(1, Stream::Policy);
        let mut late = 0;
        for t in 0..5000 {
            let a = u.select(&[false; 3]).unwrap();
            let r = if rng.random::<f64>() < means[a] { 1.0 } else { 0.0 };
            u.update(a, r);
            if t >= 4000 && a == 1 {
                late += 1;
            }
        }
        assert!(late > 900, "{late}");
    }
}
