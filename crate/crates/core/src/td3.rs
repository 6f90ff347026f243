//! TD3 scheduler with a mask-aware device head, dual replay buffers and a
//! GEXP-BO assisted critic target.
//!
//! The actor emits one score per device plus a rate increment in
//! `[−δ_max, δ_max]` (clipped linear head). Critics see the state, the device as a
//! one-hot vector and the absolute rate over `rate_max`. For the actor update
//! the one-hot is relaxed to a softmax over the unserved devices.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{Decision, FrameOracle, Observation, Policy, SlotRecord};
use crate::error::{invalid, Error, Result};
use crate::gexp_bo::{GexpBo, GexpBoConfig};
use crate::nn::{Activation, Adam, Mlp};
use crate::phy::Feedback;
use crate::rng::SimRng;
use crate::state::StateLayout;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetNoise {
    pub sigma: f64,
    pub clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Td3Config {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub discount: f64,
    pub batch: usize,
    pub nack_period: u64,
    pub ack_capacity: usize,
    pub nack_capacity: usize,
    /// Slots between soft target updates.
    pub target_interval: u64,
    pub polyak: f64,
    pub policy_delay: u64,
    pub delta_max: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub reward_beta: f64,
    /// Decay of the per-device ACK fraction average.
    pub ack_decay: f64,
    pub target_noise: Option<TargetNoise>,
    pub olla_step: f64,
    /// Slots between gradient steps.
    pub train_interval: u64,
    pub bo: Option<GexpBoConfig>,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            learning_rate: 1e-3,
            discount: 0.99,
            batch: 64,
            nack_period: 5,
            ack_capacity: 50_000,
            nack_capacity: 10_000,
            target_interval: 400,
            polyak: 0.01,
            policy_delay: 2,
            delta_max: 1.0,
            epsilon_start: 0.5,
            epsilon_end: 0.01,
            reward_beta: 4.0,
            ack_decay: 0.99,
            target_noise: Some(TargetNoise { sigma: 0.1, clip: 0.25 }),
            olla_step: 0.09,
            train_interval: 1,
            bo: Some(GexpBoConfig::default()),
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(invalid("batch must hold at least two transitions"));
        }
        if !(0.0..1.0).contains(&self.discount) && self.discount != 1.0 {
            return Err(invalid("discount must lie in [0, 1]"));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(invalid("polyak coefficient must lie in (0, 1]"));
        }
        if self.nack_period == 0 || self.train_interval == 0 || self.target_interval == 0 || self.policy_delay == 0 {
            return Err(invalid("periods must be at least one slot"));
        }
        if !(self.delta_max > 0.0) {
            return Err(invalid("delta_max must be positive"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return Err(invalid("exploration rates must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// The rate head is linear, clipped to `[−1, 1]`.
fn rate_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Inverting-gradient rule for a bounded output: the loss gradient `g` on the
/// raw output `x` is scaled by the remaining room toward the bound it points
/// at, and flips sign once `x` has crossed it.
fn invert_at_bounds(g: f64, x: f64) -> f64 {
    if g < 0.0 { g * (1.0 - x) / 2.0 } else { g * (x + 1.0) / 2.0 }
}

/// Success earns `β + r̂`, failure `ϖ·r̂`.
pub fn reward(rate: f64, feedback: Feedback, ack_fraction: f64, beta: f64) -> f64 {
    if feedback.is_ack() {
        beta + rate
    } else {
        ack_fraction * rate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub device: usize,
    /// Requested absolute rate, before OLLA.
    pub rate: f64,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub ack: bool,
}

/// ACK and NACK transitions kept apart.
#[derive(Debug, Clone)]
pub struct ReplayBuffers {
    ack: VecDeque<Transition>,
    nack: VecDeque<Transition>,
    ack_capacity: usize,
    nack_capacity: usize,
    nack_period: u64,
    batch: usize,
}

impl ReplayBuffers {
    pub fn new(ack_capacity: usize, nack_capacity: usize, nack_period: u64, batch: usize) -> Self {
        Self {
            ack: VecDeque::new(),
            nack: VecDeque::new(),
            ack_capacity: ack_capacity.max(1),
            nack_capacity: nack_capacity.max(1),
            nack_period: nack_period.max(1),
            batch,
        }
    }

    pub fn push(&mut self, t: Transition) {
        let (buf, cap) =
            if t.ack { (&mut self.ack, self.ack_capacity) } else { (&mut self.nack, self.nack_capacity) };
        if buf.len() == cap {
            buf.pop_front();
        }
        buf.push_back(t);
    }

    pub fn ack_len(&self) -> usize {
        self.ack.len()
    }

    pub fn nack_len(&self) -> usize {
        self.nack.len()
    }

    /// Batch for slot `t`, or `None` when there is not enough data yet.
    pub fn sample(&self, t: u64, rng: &mut SimRng) -> Option<Vec<&Transition>> {
        let b = self.batch;
        if t % self.nack_period == 0 && !self.nack.is_empty() {
            return Some((0..b).map(|_| &self.nack[rng.random_range(0..self.nack.len())]).collect());
        }
        if self.ack.len() < b {
            return None;
        }
        let half = b / 2;
        let mut out: Vec<&Transition> = (0..b - half).map(|_| &self.ack[rng.random_range(0..self.ack.len())]).collect();
        out.extend(self.ack.range(self.ack.len() - half..));
        Some(out)
    }
}

/// What the agent did in one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentAction {
    pub device: usize,
    pub rate_delta: f64,
    pub rate: f64,
}

/// Diagnostics of one gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainReport {
    pub critic_loss: f64,
    /// Transitions whose target came from the GEXP-BO action.
    pub bo_wins: usize,
    pub actor_updated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Td3Checkpoint {
    pub version: u32,
    pub layout: StateLayout,
    pub config: Td3Config,
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub critics: Vec<Mlp>,
    pub critic_targets: Vec<Mlp>,
}

#[derive(Debug, Clone)]
pub struct Td3Agent {
    layout: StateLayout,
    config: Td3Config,
    actor: Mlp,
    actor_target: Mlp,
    critics: [Mlp; 2],
    critic_targets: [Mlp; 2],
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    buffers: ReplayBuffers,
    bo: Option<GexpBo>,
    ack_fraction: Vec<f64>,
    slots: u64,
    schedule_slots: u64,
    critic_updates: u64,
    training: bool,
    pending_state: Option<Vec<f64>>,
    last_report: TrainReport,
}

fn masked_argmax(scores: &[f64], served: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if served[i] {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

impl Td3Agent {
    pub fn new(layout: StateLayout, config: Td3Config, rng: &mut SimRng) -> Result<Self> {
        config.validate()?;
        let k = layout.devices;
        let ds = layout.dim();
        let mut actor_sizes = vec![ds];
        actor_sizes.extend(&config.hidden);
        actor_sizes.push(k + 1);
        let mut critic_sizes = vec![ds + k + 1];
        critic_sizes.extend(&config.hidden);
        critic_sizes.push(1);
        let actor = Mlp::new(&actor_sizes, Activation::Identity, rng)?;
        let c1 = Mlp::new(&critic_sizes, Activation::Identity, rng)?;
        let c2 = Mlp::new(&critic_sizes, Activation::Identity, rng)?;
        let bo = match &config.bo {
            Some(b) => Some(GexpBo::new(k, GexpBoConfig { rate_max: layout.rate_max, ..b.clone() })?),
            None => None,
        };
        Ok(Self {
            actor_opt: Adam::new(&actor, config.learning_rate),
            critic_opts: [Adam::new(&c1, config.learning_rate), Adam::new(&c2, config.learning_rate)],
            actor_target: actor.clone(),
            critic_targets: [c1.clone(), c2.clone()],
            actor,
            critics: [c1, c2],
            buffers: ReplayBuffers::new(config.ack_capacity, config.nack_capacity, config.nack_period, config.batch),
            bo,
            ack_fraction: vec![1.0; k],
            slots: 0,
            schedule_slots: 1,
            critic_updates: 0,
            training: true,
            pending_state: None,
            last_report: TrainReport::default(),
            layout,
            config,
        })
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    pub fn config(&self) -> &Td3Config {
        &self.config
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critics(&self) -> &[Mlp; 2] {
        &self.critics
    }

    pub fn buffers(&self) -> &ReplayBuffers {
        &self.buffers
    }

    pub fn bo(&self) -> Option<&GexpBo> {
        self.bo.as_ref()
    }

    pub fn last_report(&self) -> TrainReport {
        self.last_report
    }

    pub fn slots(&self) -> u64 {
        self.slots
    }

    /// Total training slots, used for the exploration schedules.
    pub fn set_schedule(&mut self, total_slots: u64) {
        self.schedule_slots = total_slots.max(1);
    }

    pub fn progress(&self) -> f64 {
        (self.slots as f64 / self.schedule_slots as f64).min(1.0)
    }

    /// Linear decay over the first half of training.
    pub fn epsilon(&self) -> f64 {
        let p = (self.progress() / 0.5).min(1.0);
        self.config.epsilon_start + (self.config.epsilon_end - self.config.epsilon_start) * p
    }

    fn rate_from(&self, state: &[f64], device: usize, unit: f64) -> f64 {
        (self.layout.last_rate(state, device) + self.config.delta_max * unit).clamp(0.0, self.layout.rate_max)
    }

    pub fn act(&self, state: &[f64], epsilon: f64, rng: &mut SimRng) -> Result<AgentAction> {
        let served = self.layout.served(state);
        let open: Vec<usize> = (0..served.len()).filter(|&i| !served[i]).collect();
        if open.is_empty() {
            return Err(invalid("every device is served"));
        }
        let (device, unit) = if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            (open[rng.random_range(0..open.len())], rng.random_range(-1.0..=1.0))
        } else {
            let out = self.actor.forward(ndarray::aview1(state))?;
            let k = self.layout.devices;
            let scores = out.as_slice().expect("contiguous");
            (masked_argmax(&scores[..k], &served).expect("open device exists"), rate_unit(scores[k]))
        };
        let rate = self.rate_from(state, device, unit);
        Ok(AgentAction { device, rate_delta: self.config.delta_max * unit, rate })
    }

    fn critic_row(&self, out: &mut [f64], state: &[f64], device: &[f64], rate: f64) {
        let ds = state.len();
        out[..ds].copy_from_slice(state);
        out[ds..ds + device.len()].copy_from_slice(device);
        out[ds + device.len()] = rate / self.layout.rate_max;
    }

    fn one_hot(&self, device: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.layout.devices];
        v[device] = 1.0;
        v
    }

    /// `min` of the twin target critics at one action.
    pub fn target_q(&self, state: &[f64], device: usize, rate: f64) -> Result<f64> {
        let mut row = vec![0.0; self.layout.dim() + self.layout.devices + 1];
        self.critic_row(&mut row, state, &self.one_hot(device), rate);
        let x = ndarray::aview1(&row);
        let a = self.critic_targets[0].forward(x)?[0];
        let b = self.critic_targets[1].forward(x)?[0];
        Ok(a.min(b))
    }

    /// TD targets `y = r + ξ·max(Q*_ac, Q*_BO)` for a batch.
    pub fn targets(&mut self, batch: &[&Transition], rng: &mut SimRng) -> Result<(Vec<f64>, usize)> {
        let n = batch.len();
        let k = self.layout.devices;
        let ds = self.layout.dim();
        let mut next = Array2::zeros((n, ds));
        for (i, t) in batch.iter().enumerate() {
            next.row_mut(i).assign(&ndarray::aview1(&t.next_state));
        }
        let out = self.actor_target.forward_batch(next.view())?;
        let noise = self.config.target_noise.map(|n| (Normal::new(0.0, n.sigma).expect("finite sigma"), n.clip));
        let mut x = Array2::zeros((n, ds + k + 1));
        let mut served_rows = Vec::with_capacity(n);
        for (i, t) in batch.iter().enumerate() {
            let served = self.layout.served(&t.next_state);
            let scores = out.row(i);
            let scores = scores.as_slice().expect("contiguous");
            let device = masked_argmax(&scores[..k], &served).expect("next state has an open device");
            let mut unit = rate_unit(scores[k]);
            if let Some((dist, clip)) = &noise {
                unit = (unit + dist.sample(rng).clamp(-clip, *clip)).clamp(-1.0, 1.0);
            }
            let rate = self.rate_from(&t.next_state, device, unit);
            let row = x.row_mut(i).into_slice().expect("contiguous");
            self.critic_row(row, &t.next_state, &self.one_hot(device), rate);
            served_rows.push(served);
        }
        let q1 = self.critic_targets[0].forward_batch(x.view())?;
        let q2 = self.critic_targets[1].forward_batch(x.view())?;
        let mut best: Vec<f64> = (0..n).map(|i| q1[[i, 0]].min(q2[[i, 0]])).collect();

        let mut wins = 0;
        if let Some(mut bo) = self.bo.take() {
            bo.set_progress(self.progress());
            let result = (|| -> Result<()> {
                let fitted = bo.fit()?;
                for (i, t) in batch.iter().enumerate() {
                    let scores = out.row(i);
                    let scores = &scores.as_slice().expect("contiguous")[..k];
                    let proposal = bo.propose(
                        &fitted,
                        &t.next_state,
                        scores,
                        &served_rows[i],
                        |d, r| self.target_q(&t.next_state, d, r),
                        rng,
                    )?;
                    if proposal.q_value > best[i] {
                        best[i] = proposal.q_value;
                        wins += 1;
                    }
                }
                Ok(())
            })();
            self.bo = Some(bo);
            result?;
        }
        let y = batch.iter().zip(&best).map(|(t, q)| t.reward + self.config.discount * q).collect();
        Ok((y, wins))
    }

    pub fn train_step(&mut self, batch: &[&Transition], rng: &mut SimRng) -> Result<TrainReport> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let n = batch.len();
        let k = self.layout.devices;
        let ds = self.layout.dim();
        let (y, bo_wins) = self.targets(batch, rng)?;

        let mut x = Array2::zeros((n, ds + k + 1));
        for (i, t) in batch.iter().enumerate() {
            let row = x.row_mut(i).into_slice().expect("contiguous");
            self.critic_row(row, &t.state, &self.one_hot(t.device), t.rate);
        }
        let mut loss = 0.0;
        for c in 0..2 {
            let cache = self.critics[c].forward_cached(x.view())?;
            let q = cache.output();
            let mut grad = Array2::zeros((n, 1));
            for i in 0..n {
                let e = q[[i, 0]] - y[i];
                loss += e * e / (2 * n) as f64;
                grad[[i, 0]] = 2.0 * e / n as f64;
            }
            let (g, _) = self.critics[c].backward(&cache, grad.view())?;
            if !g.is_finite() || !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "critic {c} loss {loss} after {} updates",
                    self.critic_updates
                )));
            }
            self.critic_opts[c].step(&mut self.critics[c], &g)?;
        }
        self.critic_updates += 1;

        let actor_updated = self.critic_updates % self.config.policy_delay == 0;
        if actor_updated {
            self.update_actor(batch)?;
        }
        let report = TrainReport { critic_loss: loss, bo_wins, actor_updated };
        self.last_report = report;
        Ok(report)
    }

    fn update_actor(&mut self, batch: &[&Transition]) -> Result<()> {
        let n = batch.len();
        let k = self.layout.devices;
        let ds = self.layout.dim();
        let r_max = self.layout.rate_max;
        let mut s = Array2::zeros((n, ds));
        for (i, t) in batch.iter().enumerate() {
            s.row_mut(i).assign(&ndarray::aview1(&t.state));
        }
        let cache = self.actor.forward_cached(s.view())?;
        let out = cache.output();
        let mut x = Array2::zeros((n, ds + k + 1));
        let mut probs = Array2::<f64>::zeros((n, k));
        let mut clamped = vec![false; n];
        let mut raws = vec![0.0; n];
        let mut last_rates = Array2::<f64>::zeros((n, k));
        let mut masks = Vec::with_capacity(n);
        for (i, t) in batch.iter().enumerate() {
            let served = self.layout.served(&t.state);
            let peak = (0..k).filter(|&j| !served[j]).map(|j| out[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..k {
                if !served[j] {
                    let e = (out[[i, j]] - peak).exp();
                    probs[[i, j]] = e;
                    total += e;
                }
                last_rates[[i, j]] = self.layout.last_rate(&t.state, j);
            }
            probs.row_mut(i).mapv_inplace(|p| p / total);
            let unit = rate_unit(out[[i, k]]);
            let raw: f64 =
                (0..k).map(|j| probs[[i, j]] * last_rates[[i, j]]).sum::<f64>() + self.config.delta_max * unit;
            clamped[i] = !(0.0..=r_max).contains(&raw);
            raws[i] = raw;
            let p = probs.row(i).to_vec();
            let row = x.row_mut(i).into_slice().expect("contiguous");
            self.critic_row(row, &t.state, &p, raw.clamp(0.0, r_max));
            masks.push(served);
        }
        let critic_cache = self.critics[0].forward_cached(x.view())?;
        let out_grad = Array2::from_elem((n, 1), -1.0 / n as f64);
        let (_, input_grad) = self.critics[0].backward(&critic_cache, out_grad.view())?;
        let mut actor_grad = Array2::zeros((n, k + 1));
        for i in 0..n {
            // straight through the clamp, but only back toward the feasible range
            let mut g_rate = input_grad[[i, ds + k]] / r_max;
            if clamped[i] && (raws[i] < 0.0) == (g_rate > 0.0) {
                g_rate = 0.0;
            }
            let dp: Vec<f64> = (0..k).map(|j| input_grad[[i, ds + j]] + g_rate * last_rates[[i, j]]).collect();
            let mean: f64 = (0..k).map(|j| probs[[i, j]] * dp[j]).sum();
            for j in 0..k {
                if !masks[i][j] {
                    actor_grad[[i, j]] = probs[[i, j]] * (dp[j] - mean);
                }
            }
            actor_grad[[i, k]] = invert_at_bounds(g_rate * self.config.delta_max, out[[i, k]]);
        }
        let (g, _) = self.actor.backward(&cache, actor_grad.view())?;
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("actor gradient after {} updates", self.critic_updates)));
        }
        self.actor_opt.step(&mut self.actor, &g)
    }

    pub fn soft_update(&mut self, tau: f64) -> Result<()> {
        self.actor_target.soft_update_from(&self.actor, tau)?;
        for c in 0..2 {
            self.critic_targets[c].soft_update_from(&self.critics[c], tau)?;
        }
        Ok(())
    }

    /// Stores a transition and runs whatever training is due this slot.
    pub fn record(&mut self, transition: Transition, rng: &mut SimRng) -> Result<()> {
        self.buffers.push(transition);
        self.slots += 1;
        if self.slots % self.config.train_interval == 0 {
            if let Some(batch) = self.buffers.sample(self.slots, rng) {
                let batch: Vec<Transition> = batch.into_iter().cloned().collect();
                let refs: Vec<&Transition> = batch.iter().collect();
                self.train_step(&refs, rng)?;
            }
        }
        if self.slots % self.config.target_interval == 0 {
            self.soft_update(self.config.polyak)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Td3Checkpoint {
        Td3Checkpoint {
            version: CHECKPOINT_VERSION,
            layout: self.layout,
            config: self.config.clone(),
            actor: self.actor.clone(),
            actor_target: self.actor_target.clone(),
            critics: self.critics.to_vec(),
            critic_targets: self.critic_targets.to_vec(),
        }
    }

    pub fn from_checkpoint(cp: Td3Checkpoint, rng: &mut SimRng) -> Result<Self> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", cp.version)));
        }
        if cp.critics.len() != 2 || cp.critic_targets.len() != 2 {
            return Err(Error::Checkpoint("expected two critics".into()));
        }
        let mut agent = Self::new(cp.layout, cp.config, rng)?;
        if cp.actor.input_dim() != agent.actor.input_dim() || cp.actor.output_dim() != agent.actor.output_dim() {
            return Err(Error::Checkpoint("actor shape does not match the state layout".into()));
        }
        let [c1, c2]: [Mlp; 2] = cp.critics.try_into().expect("length checked");
        let [t1, t2]: [Mlp; 2] = cp.critic_targets.try_into().expect("length checked");
        agent.actor_opt = Adam::new(&cp.actor, agent.config.learning_rate);
        agent.actor = cp.actor;
        agent.actor_target = cp.actor_target;
        agent.critics = [c1, c2];
        agent.critic_targets = [t1, t2];
        Ok(agent)
    }
}

impl Policy for Td3Agent {
    fn name(&self) -> &str {
        "proposed"
    }

    fn olla_step(&self) -> Option<f64> {
        Some(self.config.olla_step)
    }

    fn decide(&mut self, obs: &Observation, _oracle: &FrameOracle<'_>, rng: &mut SimRng) -> Result<Decision> {
        let (state, _) = self.layout.build(obs)?;
        let eps = if self.training { self.epsilon() } else { 0.0 };
        let a = self.act(&state, eps, rng)?;
        self.pending_state = Some(state);
        Ok(Decision { device: a.device, rate: a.rate })
    }

    fn observe(
        &mut self,
        _obs: &Observation,
        decision: &Decision,
        record: &SlotRecord,
        next: &Observation,
        rng: &mut SimRng,
    ) -> Result<()> {
        let state = self.pending_state.take().ok_or_else(|| invalid("observe without decide"))?;
        if !self.training {
            return Ok(());
        }
        let d = decision.device;
        let r = reward(record.rate, record.feedback, self.ack_fraction[d], self.config.reward_beta);
        let ack = record.feedback.is_ack();
        let w = self.config.ack_decay;
        self.ack_fraction[d] = w * self.ack_fraction[d] + (1.0 - w) * if ack { 1.0 } else { 0.0 };
        let (next_state, _) = self.layout.build(next)?;
        self.record(Transition { state, device: d, rate: decision.rate, reward: r, next_state, ack }, rng)
    }

    fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    fn set_schedule(&mut self, total_slots: u64) {
        Td3Agent::set_schedule(self, total_slots);
    }

    fn checkpoint(&self) -> Option<Td3Checkpoint> {
        Some(Td3Agent::checkpoint(self))
    }
}
