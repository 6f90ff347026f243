//! GEXP-BO: bandit device choice plus GP/EI rate choice, scored by a
//! caller-supplied critic.

use serde::{Deserialize, Serialize};

use crate::bandit::{GexpParams, GexpState};
use crate::error::Result;
use crate::gp::{select_rate_ei, EiSearch, FittedSurrogate, Surrogate, SurrogateDataset};
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GexpBoConfig {
    pub capacity: usize,
    pub surrogate: Surrogate,
    pub search: EiSearch,
    pub bandit: GexpParams,
    pub rate_max: f64,
}

impl Default for GexpBoConfig {
    fn default() -> Self {
        Self {
            capacity: 256,
            surrogate: Surrogate::default(),
            search: EiSearch::default(),
            bandit: GexpParams::default(),
            rate_max: 6.0,
        }
    }
}

/// One GEXP-BO action with its critic value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoProposal {
    pub device: usize,
    pub rate: f64,
    pub q_value: f64,
    pub probability: f64,
}

#[derive(Debug, Clone)]
pub struct GexpBo {
    config: GexpBoConfig,
    dataset: SurrogateDataset,
    bandit: GexpState,
}

impl GexpBo {
    pub fn new(devices: usize, config: GexpBoConfig) -> Result<Self> {
        let bandit = GexpState::new(devices, config.bandit)?;
        let dataset = SurrogateDataset::new(config.capacity);
        Ok(Self { config, dataset, bandit })
    }

    pub fn config(&self) -> &GexpBoConfig {
        &self.config
    }

    pub fn dataset(&self) -> &SurrogateDataset {
        &self.dataset
    }

    pub fn bandit(&self) -> &GexpState {
        &self.bandit
    }

    pub fn bandit_mut(&mut self) -> &mut GexpState {
        &mut self.bandit
    }

    pub fn set_progress(&mut self, progress: f64) {
        self.bandit.set_progress(progress);
    }

    /// Posterior over the current dataset.
    pub fn fit(&self) -> Result<FittedSurrogate> {
        self.config.surrogate.fit(&self.dataset)
    }

    /// Picks a device and a rate under `fitted`, scores them with `critic`,
    /// then feeds the score back into the bandit and the dataset.
    pub fn propose(
        &mut self,
        fitted: &FittedSurrogate,
        state: &[f64],
        scores: &[f64],
        served: &[bool],
        critic: impl FnOnce(usize, f64) -> Result<f64>,
        rng: &mut SimRng,
    ) -> Result<BoProposal> {
        let (device, probs) = self.bandit.select(scores, served, rng)?;
        let incumbent = self.dataset.max_target().unwrap_or(0.0);
        let slice = fitted.slice(state);
        let rate = select_rate_ei(&slice, incumbent, self.config.rate_max, &self.config.search);
        let q_value = critic(device, rate)?;
        self.bandit.update(device, q_value, &probs)?;
        let mut input = Vec::with_capacity(state.len() + 1);
        input.push(rate);
        input.extend_from_slice(state);
        self.dataset.push(input, q_value);
        Ok(BoProposal { device, rate, q_value, probability: probs[device] })
    }

    /// Refit then [`propose`](Self::propose).
    pub fn optimize_step(
        &mut self,
        state: &[f64],
        scores: &[f64],
        served: &[bool],
        critic: impl FnOnce(usize, f64) -> Result<f64>,
        rng: &mut SimRng,
    ) -> Result<BoProposal> {
        let fitted = self.fit()?;
        self.propose(&fitted, state, scores, served, critic, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn dataset_size_is_bounded() {
        let config = GexpBoConfig { capacity: 4, ..GexpBoConfig::default() };
        let mut bo = GexpBo::new(2, config).unwrap();
        let mut rng = stream(3, Stream::Policy);
        for i in 0..10 {
            let s = [i as f64 * 0.1, 1.0];
            bo.optimize_step(&s, &[0.0, 0.0], &[false, false], |_, r| Ok(-r * r), &mut rng).unwrap();
        }
        assert_eq!(bo.dataset().len(), 4);
    }

    #[test]
    fn q_value_comes_from_critic() {
        let mut bo = GexpBo::new(2, GexpBoConfig::default()).unwrap();
        let mut rng = stream(3, Stream::Policy);
        let p = bo
            .optimize_step(&[0.5], &[0.0, 0.0], &[false, true], |d, r| Ok(10.0 * d as f64 + r), &mut rng)
            .unwrap();
        assert_eq!(p.device, 0);
        assert_eq!(p.q_value, p.rate);
        assert_eq!(p.probability, 1.0);
    }
}
