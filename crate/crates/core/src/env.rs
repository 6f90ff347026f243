//! TDMA episode loop.
//!
//! A frame is `K` slots and serves every device exactly once. Each slot the
//! policy sees delayed CQI and feedback, picks an unserved device and a rate,
//! the environment applies the scheme's OLLA correction and evaluates the
//! block against the true channel.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::channel::{
    db_to_linear, linear_to_db, sample_deployment, ChannelSim, DeploymentRanges, LinkBudget, RicianParams,
};
use crate::error::{invalid, Error, Result};
use crate::olla::{self, OllaState};
use crate::phy::{ideal_rate, transmit, CqiCodec, FblParams, Feedback, McsTable};
use crate::rng::{stream, SimRng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub devices: usize,
    /// Frames per episode.
    pub frames: usize,
    pub fbl: FblParams,
    pub cqi: CqiCodec,
    pub rician: RicianParams,
    pub budget: LinkBudget,
    pub slot_duration: f64,
    /// CQI history depth beyond the current report.
    pub history: usize,
    pub rate_max: f64,
    pub discrete_mcs: bool,
    pub deployment: DeploymentRanges,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 {
            return Err(invalid("need at least one device"));
        }
        if self.frames == 0 {
            return Err(invalid("an episode needs at least one frame"));
        }
        if !(self.rate_max > 0.0) {
            return Err(invalid("rate_max must be positive"));
        }
        self.fbl.validate()?;
        self.cqi.validate()?;
        self.rician.validate()
    }

    pub fn slots_per_episode(&self) -> usize {
        self.frames * self.devices
    }

    /// Ideal rate for a CQI report, capped at `rate_max`.
    pub fn cqi_rate(&self, cqi: u32) -> Result<f64> {
        let snr = db_to_linear(self.cqi.dequantize(cqi)?);
        Ok(ideal_rate(snr, self.fbl.bler_threshold, self.fbl.blocklength)?.min(self.rate_max))
    }
}

/// How a scheme's continuous rate is mapped onto the MCS grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    Nearest,
    Floor,
}

/// What a policy sees before acting.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub slot: u64,
    pub frame: usize,
    pub slot_in_frame: usize,
    /// Per device, newest first, `history + 1` entries.
    pub cqi_history: Vec<Vec<u32>>,
    pub served: Vec<bool>,
    pub last_feedback: Vec<Option<Feedback>>,
    /// Last requested (pre-OLLA) rate per device.
    pub last_rate: Vec<f64>,
    pub olla_delta: Vec<f64>,
}

impl Observation {
    pub fn devices(&self) -> usize {
        self.served.len()
    }

    pub fn cqi(&self, device: usize) -> u32 {
        self.cqi_history[device][0]
    }

    pub fn unserved(&self) -> impl Iterator<Item = usize> + '_ {
        self.served.iter().enumerate().filter(|(_, s)| !**s).map(|(i, _)| i)
    }
}

/// True per-device SNR for the rest of the current frame, current slot first.
/// Only the ideal scheme looks at it.
#[derive(Debug, Clone, Copy)]
pub struct FrameOracle<'a> {
    pub snr: &'a [Vec<f64>],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub device: usize,
    /// Requested rate before OLLA correction.
    pub rate: f64,
}

/// A scheduling and link-adaptation scheme.
pub trait Policy {
    fn name(&self) -> &str;

    /// OLLA step size applied by the environment, if the scheme uses OLLA.
    fn olla_step(&self) -> Option<f64> {
        None
    }

    fn rounding(&self) -> Rounding {
        Rounding::Nearest
    }

    fn decide(&mut self, obs: &Observation, oracle: &FrameOracle<'_>, rng: &mut SimRng) -> Result<Decision>;

    /// Called after every slot with the outcome and the next observation.
    fn observe(
        &mut self,
        _obs: &Observation,
        _decision: &Decision,
        _record: &SlotRecord,
        _next: &Observation,
        _rng: &mut SimRng,
    ) -> Result<()> {
        Ok(())
    }

    fn set_training(&mut self, _training: bool) {}

    /// Total training slots ahead, for schemes with exploration schedules.
    fn set_schedule(&mut self, _total_slots: u64) {}

    fn begin_episode(&mut self) {}

    /// Learned parameters, for schemes that have any worth saving.
    fn checkpoint(&self) -> Option<crate::td3::Td3Checkpoint> {
        None
    }
}

/// One row of the per-slot log.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotRecord {
    pub episode: u64,
    pub slot: u64,
    pub frame: usize,
    pub slot_in_frame: usize,
    pub device: usize,
    pub cqi: u32,
    pub true_snr_db: f64,
    pub requested_rate: f64,
    pub olla_delta: f64,
    pub rate: f64,
    pub mcs_index: Option<u32>,
    pub bler: f64,
    pub feedback: Feedback,
    pub optimal_rate: f64,
    pub optimal_mcs: Option<u32>,
}

pub const SLOT_CSV_HEADER: &str = "episode,slot,frame,slot_in_frame,device,cqi,true_snr_db,requested_rate,olla_delta,rate,mcs_index,bler,feedback,optimal_rate,optimal_mcs";

fn opt_field(v: Option<u32>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SlotRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.episode,
            self.slot,
            self.frame,
            self.slot_in_frame,
            self.device,
            self.cqi,
            self.true_snr_db,
            self.requested_rate,
            self.olla_delta,
            self.rate,
            opt_field(self.mcs_index),
            self.bler,
            self.feedback,
            self.optimal_rate,
            opt_field(self.optimal_mcs),
        )
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.trim_end().split(',').collect();
        if f.len() != 15 {
            return Err(Error::DimensionMismatch { expected: 15, got: f.len() });
        }
        fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
            s.parse().map_err(|_| invalid(format!("bad CSV field {s:?}")))
        }
        fn opt(s: &str) -> Result<Option<u32>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        }
        Ok(Self {
            episode: num(f[0])?,
            slot: num(f[1])?,
            frame: num(f[2])?,
            slot_in_frame: num(f[3])?,
            device: num(f[4])?,
            cqi: num(f[5])?,
            true_snr_db: num(f[6])?,
            requested_rate: num(f[7])?,
            olla_delta: num(f[8])?,
            rate: num(f[9])?,
            mcs_index: opt(f[10])?,
            bler: num(f[11])?,
            feedback: num(f[12])?,
            optimal_rate: num(f[13])?,
            optimal_mcs: opt(f[14])?,
        })
    }
}

pub fn records_to_csv(records: &[SlotRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 120 + 200);
    out.push_str(SLOT_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.to_csv_row());
    }
    out
}

/// Aggregates over one episode (or a concatenation of episodes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub frames: usize,
    pub slots: usize,
    /// Sum over slots of the transmitted rate, per frame.
    pub sum_rate: f64,
    pub avg_bler: f64,
    /// Slots whose BLER exceeded the threshold.
    pub exceeded: usize,
    pub nacks: usize,
}

impl EpisodeMetrics {
    pub fn from_records(records: &[SlotRecord], frames: usize, threshold: f64) -> Self {
        let slots = records.len();
        let total_rate: f64 = records.iter().map(|r| r.rate).sum();
        let total_bler: f64 = records.iter().map(|r| r.bler).sum();
        Self {
            frames,
            slots,
            sum_rate: if frames == 0 { 0.0 } else { total_rate / frames as f64 },
            avg_bler: if slots == 0 { 0.0 } else { total_bler / slots as f64 },
            exceeded: records.iter().filter(|r| r.bler > threshold).count(),
            nacks: records.iter().filter(|r| !r.feedback.is_ack()).count(),
        }
    }

    /// Frame-weighted mean over several runs.
    pub fn average(all: &[EpisodeMetrics]) -> Self {
        let frames: usize = all.iter().map(|m| m.frames).sum();
        let slots: usize = all.iter().map(|m| m.slots).sum();
        let rate: f64 = all.iter().map(|m| m.sum_rate * m.frames as f64).sum();
        let bler: f64 = all.iter().map(|m| m.avg_bler * m.slots as f64).sum();
        Self {
            frames,
            slots,
            sum_rate: if frames == 0 { 0.0 } else { rate / frames as f64 },
            avg_bler: if slots == 0 { 0.0 } else { bler / slots as f64 },
            exceeded: all.iter().map(|m| m.exceeded).sum(),
            nacks: all.iter().map(|m| m.nacks).sum(),
        }
    }
}

/// Checks that every frame serves each device exactly once, in slot order.
pub fn check_frame_constraints(records: &[SlotRecord], devices: usize) -> Result<()> {
    for chunk in records.chunks(devices) {
        let (episode, frame) = (chunk[0].episode, chunk[0].frame);
        let mut seen = vec![false; devices];
        for (i, r) in chunk.iter().enumerate() {
            if r.episode != episode || r.frame != frame || r.slot_in_frame != i {
                return Err(Error::ContractViolation(format!(
                    "episode {episode} frame {frame}: slot layout broken at slot {}",
                    r.slot
                )));
            }
            if r.device >= devices || seen[r.device] {
                return Err(Error::ContractViolation(format!(
                    "episode {episode} frame {frame}: device {} served twice or out of range",
                    r.device
                )));
            }
            seen[r.device] = true;
        }
        if chunk.len() != devices {
            return Err(Error::ContractViolation(format!("episode {episode} frame {frame} is incomplete")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    channel: ChannelSim,
    table: McsTable,
    /// True SNR (dB) of the last `delay` slots, oldest first.
    pending: VecDeque<Vec<f64>>,
    history: Vec<VecDeque<u32>>,
    trace: Vec<Vec<f64>>,
    served: Vec<bool>,
    slot: u64,
    frame: usize,
    slot_in_frame: usize,
    episode: u64,
    last_feedback: Vec<Option<Feedback>>,
    last_rate: Vec<f64>,
    olla: Option<OllaState>,
}

impl Env {
    /// Deployment comes from the geometry stream, fading from `channel_stream`.
    pub fn new(config: EnvConfig, seed: u64, channel_stream: Stream) -> Result<Self> {
        config.validate()?;
        let devices = sample_deployment(config.devices, &config.deployment, &mut stream(seed, Stream::Geometry));
        let mut channel =
            ChannelSim::new(devices, config.rician, config.budget, config.slot_duration, stream(seed, channel_stream))?;
        let k = config.devices;
        let mut pending = VecDeque::new();
        for _ in 0..config.cqi.delay_slots {
            let s = channel.next_state()?;
            pending.push_back(s.true_snr.iter().map(|&g| linear_to_db(g)).collect::<Vec<_>>());
        }
        let first: Vec<u32> = pending[0].iter().map(|&db| config.cqi.quantize(db)).collect();
        let history = first.iter().map(|&c| std::iter::repeat_n(c, config.history + 1).collect()).collect();
        let mut env = Self {
            table: McsTable::standard(),
            channel,
            pending,
            history,
            trace: Vec::new(),
            served: vec![false; k],
            slot: 0,
            frame: 0,
            slot_in_frame: 0,
            episode: 0,
            last_feedback: vec![None; k],
            last_rate: vec![0.0; k],
            olla: None,
            config,
        };
        env.reset_episode(None)?;
        env.episode = 0;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn mcs_table(&self) -> &McsTable {
        &self.table
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    /// Starts a new episode. The channel keeps evolving across episodes.
    pub fn reset_episode(&mut self, olla_step: Option<f64>) -> Result<()> {
        let k = self.config.devices;
        if self.slot_in_frame != 0 {
            return Err(invalid("cannot reset in the middle of a frame"));
        }
        self.episode += 1;
        self.frame = 0;
        self.served = vec![false; k];
        self.last_feedback = vec![None; k];
        self.last_rate = (0..k).map(|d| self.config.cqi_rate(self.history[d][0])).collect::<Result<_>>()?;
        self.olla = match olla_step {
            Some(step) => Some(OllaState::new(k, step, self.config.fbl.bler_threshold, -self.config.rate_max)?),
            None => None,
        };
        Ok(())
    }

    pub fn observation(&self) -> Observation {
        let k = self.config.devices;
        Observation {
            slot: self.slot,
            frame: self.frame,
            slot_in_frame: self.slot_in_frame,
            cqi_history: self.history.iter().map(|h| h.iter().copied().collect()).collect(),
            served: self.served.clone(),
            last_feedback: self.last_feedback.clone(),
            last_rate: self.last_rate.clone(),
            olla_delta: self.olla.as_ref().map_or_else(|| vec![0.0; k], |o| o.deltas().to_vec()),
        }
    }

    fn quantize_rate(&self, rate: f64, rounding: Rounding) -> (f64, Option<u32>) {
        let rate = rate.clamp(0.0, self.config.rate_max);
        if !self.config.discrete_mcs {
            return (rate, None);
        }
        let e = match rounding {
            Rounding::Nearest => self.table.discretize(rate),
            Rounding::Floor => self.table.floor(rate),
        };
        (e.rate, Some(e.index))
    }

    pub fn run_slot(&mut self, policy: &mut dyn Policy, rng: &mut SimRng) -> Result<SlotRecord> {
        let k = self.config.devices;
        if self.slot_in_frame == 0 {
            self.trace = (0..k).map(|_| self.channel.next_state().map(|s| s.true_snr)).collect::<Result<_>>()?;
        }
        let obs = self.observation();
        let oracle = FrameOracle { snr: &self.trace[self.slot_in_frame..] };
        let decision = policy.decide(&obs, &oracle, rng)?;
        let d = decision.device;
        if d >= k || self.served[d] {
            return Err(Error::ContractViolation(format!(
                "{} picked device {d} which is served or out of range in frame {}",
                policy.name(),
                self.frame
            )));
        }
        if !decision.rate.is_finite() {
            return Err(Error::NonFinite(format!("{} requested rate {}", policy.name(), decision.rate)));
        }
        let delta = self.olla.as_ref().map_or(0.0, |o| o.delta(d));
        let corrected = olla::apply(decision.rate, delta, None);
        let (rate, mcs_index) = self.quantize_rate(corrected, policy.rounding());
        let snr = self.trace[self.slot_in_frame][d];
        let outcome = transmit(d, snr, rate, &self.config.fbl)?;
        let optimal_rate = ideal_rate(snr, self.config.fbl.bler_threshold, self.config.fbl.blocklength)?;
        let optimal_mcs = self.table.entries().iter().rev().find(|e| e.rate <= optimal_rate).map(|e| e.index);
        let record = SlotRecord {
            episode: self.episode,
            slot: self.slot,
            frame: self.frame,
            slot_in_frame: self.slot_in_frame,
            device: d,
            cqi: obs.cqi(d),
            true_snr_db: linear_to_db(snr),
            requested_rate: decision.rate,
            olla_delta: delta,
            rate,
            mcs_index,
            bler: outcome.bler,
            feedback: outcome.feedback,
            optimal_rate,
            optimal_mcs,
        };

        if let Some(o) = self.olla.as_mut() {
            o.update(d, outcome.feedback);
        }
        self.last_feedback[d] = Some(outcome.feedback);
        self.last_rate[d] = decision.rate.clamp(0.0, self.config.rate_max);
        self.served[d] = true;

        self.pending.push_back(self.trace[self.slot_in_frame].iter().map(|&g| linear_to_db(g)).collect());
        let reported = self.pending.pop_front().expect("delay line is never empty");
        for (h, db) in self.history.iter_mut().zip(reported) {
            h.pop_back();
            h.push_front(self.config.cqi.quantize(db));
        }

        self.slot += 1;
        self.slot_in_frame += 1;
        if self.slot_in_frame == k {
            self.slot_in_frame = 0;
            self.frame += 1;
            self.served = vec![false; k];
        }
        let next = self.observation();
        policy.observe(&obs, &decision, &record, &next, rng)?;
        Ok(record)
    }

    /// Resets, then runs `frames × K` slots.
    pub fn run_episode(&mut self, policy: &mut dyn Policy, rng: &mut SimRng) -> Result<(EpisodeMetrics, Vec<SlotRecord>)> {
        self.reset_episode(policy.olla_step())?;
        policy.begin_episode();
        let mut records = Vec::with_capacity(self.config.slots_per_episode());
        for _ in 0..self.config.slots_per_episode() {
            records.push(self.run_slot(policy, rng)?);
        }
        check_frame_constraints(&records, self.config.devices)?;
        let metrics = EpisodeMetrics::from_records(&records, self.config.frames, self.config.fbl.bler_threshold);
        Ok((metrics, records))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::dbm_to_watts;
    use crate::rng::stream;

    pub(crate) fn small_config(devices: usize) -> EnvConfig {
        EnvConfig {
            devices,
            frames: 10,
            fbl: FblParams::default(),
            cqi: CqiCodec::default(),
            rician: RicianParams::default(),
            budget: LinkBudget { power_w: dbm_to_watts(35.0), noise_w: dbm_to_watts(-105.0) * 6e4 },
            slot_duration: 1e-3,
            history: 3,
            rate_max: 6.0,
            discrete_mcs: false,
            deployment: DeploymentRanges::default(),
        }
    }

    struct Fixed(f64);

    impl Policy for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn decide(&mut self, obs: &Observation, _o: &FrameOracle<'_>, _rng: &mut SimRng) -> Result<Decision> {
            Ok(Decision { device: obs.unserved().next().unwrap(), rate: self.0 })
        }
    }

    struct Greedy;

    impl Policy for Greedy {
        fn name(&self) -> &str {
            "bad"
        }
        fn decide(&mut self, _obs: &Observation, _o: &FrameOracle<'_>, _rng: &mut SimRng) -> Result<Decision> {
            Ok(Decision { device: 0, rate: 1.0 })
        }
    }

    #[test]
    fn zero_rate_policy() {
        let mut env = Env::new(small_config(3), 5, Stream::Channel).unwrap();
        let mut rng = stream(5, Stream::Policy);
        let (m, records) = env.run_episode(&mut Fixed(0.0), &mut rng).unwrap();
        assert_eq!(m.sum_rate, 0.0);
        assert_eq!(m.exceeded, 0);
        assert_eq!(records.len(), 30);
    }

    #[test]
    fn double_service_is_rejected() {
        let mut env = Env::new(small_config(2), 5, Stream::Channel).unwrap();
        let mut rng = stream(5, Stream::Policy);
        let err = env.run_episode(&mut Greedy, &mut rng).unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
    }

    #[test]
    fn single_device_is_forced() {
        let mut env = Env::new(small_config(1), 5, Stream::Channel).unwrap();
        let mut rng = stream(5, Stream::Policy);
        let (_, records) = env.run_episode(&mut Fixed(1.0), &mut rng).unwrap();
        assert!(records.iter().all(|r| r.device == 0));
    }

    #[test]
    fn csv_row_round_trip() {
        let mut env = Env::new(small_config(2), 9, Stream::Channel).unwrap();
        let mut rng = stream(9, Stream::Policy);
        let (_, records) = env.run_episode(&mut Fixed(1.3), &mut rng).unwrap();
        for r in &records {
            assert_eq!(&SlotRecord::from_csv_row(&r.to_csv_row()).unwrap(), r);
        }
    }

    #[test]
    fn metrics_recompute_from_log() {
        let mut env = Env::new(small_config(4), 2, Stream::Channel).unwrap();
        let mut rng = stream(2, Stream::Policy);
        let (m, records) = env.run_episode(&mut Fixed(2.0), &mut rng).unwrap();
        let parsed: Vec<SlotRecord> = records_to_csv(&records)
            .lines()
            .skip(1)
            .map(|l| SlotRecord::from_csv_row(l).unwrap())
            .collect();
        let again = EpisodeMetrics::from_records(&parsed, 10, 1e-3);
        assert!((again.sum_rate - m.sum_rate).abs() < 1e-12);
        assert_eq!(again.exceeded, m.exceeded);
    }

    #[test]
    fn constraint_checker_flags_repeats() {
        let mut env = Env::new(small_config(2), 2, Stream::Channel).unwrap();
        let mut rng = stream(2, Stream::Policy);
        let (_, mut records) = env.run_episode(&mut Fixed(2.0), &mut rng).unwrap();
        assert!(check_frame_constraints(&records, 2).is_ok());
        records[1].device = records[0].device;
        assert!(check_frame_constraints(&records, 2).is_err());
    }

    #[test]
    fn cqi_reports_lag_true_snr() {
        let mut env = Env::new(small_config(1), 4, Stream::Channel).unwrap();
        let mut rng = stream(4, Stream::Policy);
        let (_, records) = env.run_episode(&mut Fixed(1.0), &mut rng).unwrap();
        let codec = CqiCodec::default();
        for w in records.windows(2) {
            assert_eq!(w[1].cqi, codec.quantize(w[0].true_snr_db));
        }
    }
}
