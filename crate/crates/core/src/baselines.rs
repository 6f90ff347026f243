//! Comparison schemes: the full-CSI exhaustive search, UCB device selection
//! with OLLA or per-device BO rate control, and a flat DQN.

use itertools::Itertools;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::Ucb1;
use crate::env::{Decision, FrameOracle, Observation, Policy, Rounding, SlotRecord};
use crate::error::{invalid, Error, Result};
use crate::gp::{select_rate_ei, EiSearch, Surrogate, SurrogateDataset};
use crate::nn::{Activation, Adam, Mlp};
use crate::phy::{ideal_rate, FblParams, McsTable};
use crate::rng::SimRng;
use crate::state::StateLayout;
use crate::td3::{reward, ReplayBuffers, Transition};

/// Exhaustive search over the remaining frame with the true channel.
#[derive(Debug, Clone)]
pub struct IdealPolicy {
    fbl: FblParams,
    rate_max: f64,
    table: Option<McsTable>,
}

impl IdealPolicy {
    /// With a table, every slot's rate is floored onto the MCS grid.
    pub fn new(fbl: FblParams, rate_max: f64, table: Option<McsTable>) -> Self {
        Self { fbl, rate_max, table }
    }

    fn slot_rate(&self, snr: f64) -> Result<f64> {
        let r = ideal_rate(snr, self.fbl.bler_threshold, self.fbl.blocklength)?.min(self.rate_max);
        Ok(match &self.table {
            None => r,
            Some(t) => t.entries().iter().rev().find(|e| e.rate <= r).map_or(0.0, |e| e.rate),
        })
    }

    /// Best order of `open` over the oracle slots; returns `(device, rate)` of the first slot.
    pub fn plan(&self, open: &[usize], oracle: &FrameOracle<'_>) -> Result<(usize, f64)> {
        if open.is_empty() {
            return Err(invalid("no device left to serve"));
        }
        if oracle.snr.len() < open.len() {
            return Err(invalid("oracle horizon shorter than the remaining frame"));
        }
        let n = open.len();
        let mut rates = vec![vec![0.0; n]; n];
        for (slot, row) in rates.iter_mut().enumerate() {
            for (j, &d) in open.iter().enumerate() {
                row[j] = self.slot_rate(oracle.snr[slot][d])?;
            }
        }
        let mut best: Option<(f64, usize)> = None;
        for perm in (0..n).permutations(n) {
            let total: f64 = perm.iter().enumerate().map(|(slot, &j)| rates[slot][j]).sum();
            if best.is_none_or(|(b, _)| total > b) {
                best = Some((total, perm[0]));
            }
        }
        let (_, j) = best.expect("at least one permutation");
        Ok((open[j], rates[0][j]))
    }
}

impl Policy for IdealPolicy {
    fn name(&self) -> &str {
        "ideal"
    }

    fn rounding(&self) -> Rounding {
        Rounding::Floor
    }

    fn decide(&mut self, obs: &Observation, oracle: &FrameOracle<'_>, _rng: &mut SimRng) -> Result<Decision> {
        let open: Vec<usize> = obs.unserved().collect();
        let (device, rate) = self.plan(&open, oracle)?;
        Ok(Decision { device, rate })
    }
}

fn ucb_reward(record: &SlotRecord) -> f64 {
    if record.feedback.is_ack() {
        record.rate
    } else {
        0.0
    }
}

/// UCB1 device choice, CQI-driven rate with an OLLA offset.
#[derive(Debug, Clone)]
pub struct OllaCmabPolicy {
    ucb: Ucb1,
    fbl: FblParams,
    codec: crate::phy::CqiCodec,
    rate_max: f64,
    step: f64,
}

impl OllaCmabPolicy {
    pub fn new(devices: usize, fbl: FblParams, codec: crate::phy::CqiCodec, rate_max: f64, step: f64) -> Self {
        Self { ucb: Ucb1::new(devices, std::f64::consts::SQRT_2), fbl, codec, rate_max, step }
    }

    pub fn ucb(&self) -> &Ucb1 {
        &self.ucb
    }
}

impl Policy for OllaCmabPolicy {
    fn name(&self) -> &str {
        "olla-cmab"
    }

    fn olla_step(&self) -> Option<f64> {
        Some(self.step)
    }

    fn decide(&mut self, obs: &Observation, _oracle: &FrameOracle<'_>, _rng: &mut SimRng) -> Result<Decision> {
        let device = self.ucb.select(&obs.served)?;
        let snr = crate::channel::db_to_linear(self.codec.dequantize(obs.cqi(device))?);
        let rate = ideal_rate(snr, self.fbl.bler_threshold, self.fbl.blocklength)?.min(self.rate_max);
        Ok(Decision { device, rate })
    }

    fn observe(
        &mut self,
        _obs: &Observation,
        decision: &Decision,
        record: &SlotRecord,
        _next: &Observation,
        _rng: &mut SimRng,
    ) -> Result<()> {
        self.ucb.update(decision.device, ucb_reward(record));
        Ok(())
    }
}

/// UCB1 device choice, per-device GP/EI search over the rate.
#[derive(Debug, Clone)]
pub struct BoCmabPolicy {
    ucb: Ucb1,
    data: Vec<SurrogateDataset>,
    surrogate: Surrogate,
    search: EiSearch,
    rate_max: f64,
}

impl BoCmabPolicy {
    pub fn new(devices: usize, capacity: usize, rate_max: f64) -> Self {
        Self {
            ucb: Ucb1::new(devices, std::f64::consts::SQRT_2),
            data: (0..devices).map(|_| SurrogateDataset::new(capacity)).collect(),
            surrogate: Surrogate::default(),
            search: EiSearch::default(),
            rate_max,
        }
    }

    pub fn with_rate_lengthscale(mut self, lengthscale: f64) -> Self {
        self.surrogate.rate_lengthscale = lengthscale;
        self
    }

    /// EI-maximising rate for `device` under its own data.
    pub fn next_rate(&self, device: usize) -> Result<f64> {
        let data = &self.data[device];
        let fitted = self.surrogate.fit(data)?;
        let slice = fitted.slice(&[]);
        let incumbent = data.max_target().unwrap_or(0.0);
        Ok(select_rate_ei(&slice, incumbent, self.rate_max, &self.search))
    }

    pub fn dataset(&self, device: usize) -> &SurrogateDataset {
        &self.data[device]
    }
}

impl Policy for BoCmabPolicy {
    fn name(&self) -> &str {
        "bo-cmab"
    }

    fn decide(&mut self, obs: &Observation, _oracle: &FrameOracle<'_>, _rng: &mut SimRng) -> Result<Decision> {
        let device = self.ucb.select(&obs.served)?;
        Ok(Decision { device, rate: self.next_rate(device)? })
    }

    fn observe(
        &mut self,
        _obs: &Observation,
        decision: &Decision,
        record: &SlotRecord,
        _next: &Observation,
        _rng: &mut SimRng,
    ) -> Result<()> {
        let d = decision.device;
        let r = ucb_reward(record);
        self.ucb.update(d, r);
        self.data[d].push(vec![record.rate], r);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub discount: f64,
    pub batch: usize,
    /// Number of evenly spaced rate increments in `[−δ_max, δ_max]`.
    pub rate_levels: usize,
    pub delta_max: f64,
    pub target_interval: u64,
    pub train_interval: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub reward_beta: f64,
    pub ack_decay: f64,
    pub capacity: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            learning_rate: 1e-3,
            discount: 0.99,
            batch: 64,
            rate_levels: 9,
            delta_max: 1.0,
            target_interval: 400,
            train_interval: 1,
            epsilon_start: 0.5,
            epsilon_end: 0.01,
            reward_beta: 4.0,
            ack_decay: 0.99,
            capacity: 50_000,
        }
    }
}

/// Single DQN over `device × rate increment`.
#[derive(Debug, Clone)]
pub struct DqnPolicy {
    layout: StateLayout,
    config: DqnConfig,
    net: Mlp,
    target: Mlp,
    opt: Adam,
    replay: ReplayBuffers,
    ack_fraction: Vec<f64>,
    slots: u64,
    schedule_slots: u64,
    training: bool,
    pending: Option<(Vec<f64>, usize)>,
}

impl DqnPolicy {
    pub fn new(layout: StateLayout, config: DqnConfig, rng: &mut SimRng) -> Result<Self> {
        if config.rate_levels < 2 {
            return Err(invalid("need at least two rate levels"));
        }
        let mut sizes = vec![layout.dim()];
        sizes.extend(&config.hidden);
        sizes.push(layout.devices * config.rate_levels);
        let net = Mlp::new(&sizes, Activation::Identity, rng)?;
        Ok(Self {
            target: net.clone(),
            opt: Adam::new(&net, config.learning_rate),
            net,
            // a single uniform buffer: the NACK period is never hit
            replay: ReplayBuffers::new(config.capacity, config.capacity, u64::MAX, config.batch),
            ack_fraction: vec![1.0; layout.devices],
            slots: 0,
            schedule_slots: 1,
            training: true,
            pending: None,
            layout,
            config,
        })
    }

    pub fn set_schedule(&mut self, total_slots: u64) {
        self.schedule_slots = total_slots.max(1);
    }

    fn epsilon(&self) -> f64 {
        let p = (self.slots as f64 / self.schedule_slots as f64 / 0.5).min(1.0);
        self.config.epsilon_start + (self.config.epsilon_end - self.config.epsilon_start) * p
    }

    fn delta_of(&self, level: usize) -> f64 {
        let l = self.config.rate_levels as f64 - 1.0;
        self.config.delta_max * (2.0 * level as f64 / l - 1.0)
    }

    /// Index of the best valid action under `net`.
    fn greedy(&self, net: &Mlp, state: &[f64]) -> Result<(usize, f64)> {
        let q = net.forward(ndarray::aview1(state))?;
        let served = self.layout.served(state);
        let levels = self.config.rate_levels;
        let mut best: Option<(usize, f64)> = None;
        for (a, &v) in q.iter().enumerate() {
            if served[a / levels] {
                continue;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((a, v));
            }
        }
        best.ok_or_else(|| invalid("every device is served"))
    }

    /// Action index, ε-greedy over unserved devices.
    pub fn select_action(&self, state: &[f64], epsilon: f64, rng: &mut SimRng) -> Result<usize> {
        let served = self.layout.served(state);
        let open: Vec<usize> = (0..served.len()).filter(|&d| !served[d]).collect();
        if open.is_empty() {
            return Err(invalid("every device is served"));
        }
        if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            let d = open[rng.random_range(0..open.len())];
            return Ok(d * self.config.rate_levels + rng.random_range(0..self.config.rate_levels));
        }
        Ok(self.greedy(&self.net, state)?.0)
    }

    fn train(&mut self, rng: &mut SimRng) -> Result<()> {
        let Some(batch) = self.replay.sample(self.slots, rng) else {
            return Ok(());
        };
        let batch: Vec<Transition> = batch.into_iter().cloned().collect();
        let n = batch.len();
        let levels = self.config.rate_levels;
        let mut s = Array2::zeros((n, self.layout.dim()));
        let mut y = vec![0.0; n];
        let mut actions = vec![0usize; n];
        for (i, t) in batch.iter().enumerate() {
            s.row_mut(i).assign(&ndarray::aview1(&t.state));
            let (_, q_next) = self.greedy(&self.target, &t.next_state)?;
            y[i] = t.reward + self.config.discount * q_next;
            // the rate slot stores the action index for this buffer
            actions[i] = t.rate as usize;
        }
        let cache = self.net.forward_cached(s.view())?;
        let q = cache.output();
        let mut grad = Array2::zeros((n, self.layout.devices * levels));
        for i in 0..n {
            grad[[i, actions[i]]] = 2.0 * (q[[i, actions[i]]] - y[i]) / n as f64;
        }
        let (g, _) = self.net.backward(&cache, grad.view())?;
        if !g.is_finite() {
            return Err(Error::NonFinite("DQN gradient".into()));
        }
        self.opt.step(&mut self.net, &g)
    }
}

impl Policy for DqnPolicy {
    fn name(&self) -> &str {
        "dqn"
    }

    fn decide(&mut self, obs: &Observation, _oracle: &FrameOracle<'_>, rng: &mut SimRng) -> Result<Decision> {
        let (state, _) = self.layout.build(obs)?;
        let eps = if self.training { self.epsilon() } else { 0.0 };
        let a = self.select_action(&state, eps, rng)?;
        let device = a / self.config.rate_levels;
        let rate = (obs.last_rate[device] + self.delta_of(a % self.config.rate_levels)).clamp(0.0, self.layout.rate_max);
        self.pending = Some((state, a));
        Ok(Decision { device, rate })
    }

    fn observe(
        &mut self,
        _obs: &Observation,
        decision: &Decision,
        record: &SlotRecord,
        next: &Observation,
        rng: &mut SimRng,
    ) -> Result<()> {
        let (state, action) = self.pending.take().ok_or_else(|| invalid("observe without decide"))?;
        if !self.training {
            return Ok(());
        }
        let d = decision.device;
        let r = reward(record.rate, record.feedback, self.ack_fraction[d], self.config.reward_beta);
        let ack = record.feedback.is_ack();
        let w = self.config.ack_decay;
        self.ack_fraction[d] = w * self.ack_fraction[d] + (1.0 - w) * if ack { 1.0 } else { 0.0 };
        let (next_state, _) = self.layout.build(next)?;
        // one buffer for both outcomes
        self.replay.push(Transition { state, device: d, rate: action as f64, reward: r, next_state, ack: true });
        self.slots += 1;
        if self.slots % self.config.train_interval == 0 {
            self.train(rng)?;
        }
        if self.slots % self.config.target_interval == 0 {
            self.target = self.net.clone();
        }
        Ok(())
    }

    fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    fn set_schedule(&mut self, total_slots: u64) {
        DqnPolicy::set_schedule(self, total_slots);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phy::CqiCodec;
    use crate::rng::{stream, Stream};

    #[test]
    fn ideal_serves_falling_device_first() {
        let p = IdealPolicy::new(FblParams::default(), 10.0, None);
        // device 0 rises, device 1 falls
        let snr = vec![vec![2.0, 20.0], vec![20.0, 2.0]];
        let (d, r) = p.plan(&[0, 1], &FrameOracle { snr: &snr }).unwrap();
        assert_eq!(d, 1);
        assert_eq!(r, ideal_rate(20.0, 1e-3, 192).unwrap());
    }

    #[test]
    fn ideal_static_channel_uses_ideal_rate() {
        let p = IdealPolicy::new(FblParams::default(), 10.0, None);
        let snr = vec![vec![5.0, 5.0, 5.0]; 3];
        let (_, r) = p.plan(&[0, 1, 2], &FrameOracle { snr: &snr }).unwrap();
        assert_eq!(r, ideal_rate(5.0, 1e-3, 192).unwrap());
    }

    #[test]
    fn ideal_discrete_floors() {
        let t = McsTable::standard();
        let p = IdealPolicy::new(FblParams::default(), 10.0, Some(t.clone()));
        let snr = vec![vec![5.0]];
        let (_, r) = p.plan(&[0], &FrameOracle { snr: &snr }).unwrap();
        assert!(r <= ideal_rate(5.0, 1e-3, 192).unwrap());
        assert!(t.entries().iter().any(|e| e.rate == r));
    }

    #[test]
    fn bo_cmab_first_query_is_grid_middle() {
        let p = BoCmabPolicy::new(2, 32, 6.4);
        assert_eq!(p.next_rate(0).unwrap(), 6.4 * 32.0 / 64.0);
    }

    #[test]
    fn olla_cmab_step() {
        let p = OllaCmabPolicy::new(2, FblParams::default(), CqiCodec::default(), 6.0, 0.01);
        assert_eq!(p.olla_step(), Some(0.01));
    }

    #[test]
    fn dqn_greedy_is_deterministic_and_masked() {
        let layout = StateLayout { devices: 3, history: 1, cqi_levels: 16, rate_max: 6.0 };
        let mut rng = stream(1, Stream::Network);
        let p = DqnPolicy::new(layout, DqnConfig { hidden: vec![16], ..DqnConfig::default() }, &mut rng).unwrap();
        let mut s = vec![0.2; layout.dim()];
        let m = layout.devices * layout.block_len();
        s[m] = 1.0;
        s[m + 1] = 0.0;
        s[m + 2] = 1.0;
        let a = p.select_action(&s, 0.0, &mut rng).unwrap();
        assert_eq!(a, p.select_action(&s, 0.0, &mut rng).unwrap());
        assert_eq!(a / 9, 1);
        for _ in 0..200 {
            assert_eq!(p.select_action(&s, 1.0, &mut rng).unwrap() / 9, 1);
        }
    }
}
