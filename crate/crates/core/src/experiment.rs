//! Training, evaluation, sweeps and MCS statistics built from an
//! [`ExperimentConfig`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bandit::GexpParams;
use crate::baselines::{BoCmabPolicy, DqnConfig, DqnPolicy, IdealPolicy, OllaCmabPolicy};
use crate::channel::{dbm_to_watts, DeploymentRanges, LinkBudget, RicianParams};
use crate::config::{ExperimentConfig, Scheme};
use crate::env::{Env, EnvConfig, EpisodeMetrics, Policy, SlotRecord};
use crate::error::{Error, Result};
use crate::gexp_bo::GexpBoConfig;
use crate::gp::{EiSearch, Surrogate};
use crate::phy::{CqiCodec, FblParams, McsTable, MCS_INDEX_MAX, MCS_INDEX_MIN};
use crate::rng::{stream, Stream};
use crate::state::StateLayout;
use crate::td3::{Td3Agent, Td3Checkpoint, Td3Config, TargetNoise};

pub type BoxedPolicy = Box<dyn Policy + Send>;

pub fn env_config(cfg: &ExperimentConfig) -> EnvConfig {
    EnvConfig {
        devices: cfg.devices,
        frames: cfg.frames(),
        fbl: FblParams { blocklength: cfg.blocklength, bler_threshold: cfg.bler_threshold },
        cqi: CqiCodec {
            bits: cfg.cqi_bits,
            snr_min_db: cfg.snr_min_db,
            snr_max_db: cfg.snr_max_db,
            delay_slots: cfg.cqi_delay,
            error_radius: 0.0,
        },
        rician: RicianParams {
            rician_factor_db: cfg.rician_factor_db,
            pathloss_ref_db: cfg.pathloss_ref_db,
            pathloss_exponent: cfg.pathloss_exponent,
            d0: cfg.d0,
            rho: cfg.rho,
            antennas: cfg.antennas,
        },
        budget: LinkBudget {
            power_w: dbm_to_watts(cfg.power_dbm),
            noise_w: dbm_to_watts(cfg.noise_dbm) * cfg.noise_bandwidth_hz,
        },
        slot_duration: cfg.slot_duration,
        history: cfg.history,
        rate_max: cfg.rate_max,
        discrete_mcs: cfg.discrete_mcs,
        deployment: DeploymentRanges::default(),
    }
}

pub fn state_layout(cfg: &ExperimentConfig) -> StateLayout {
    StateLayout {
        devices: cfg.devices,
        history: cfg.history,
        cqi_levels: 1 << cfg.cqi_bits,
        rate_max: cfg.rate_max,
    }
}

pub fn td3_config(cfg: &ExperimentConfig, with_bo: bool) -> Td3Config {
    let bo = GexpBoConfig {
        capacity: cfg.gp_capacity,
        surrogate: Surrogate {
            rate_lengthscale: cfg.gp_rate_lengthscale,
            state_lengthscale: cfg.gp_state_lengthscale.0,
            signal_variance: 1.0,
            noise_variance: cfg.gp_noise,
        },
        search: EiSearch { grid_points: cfg.ei_grid, starts: cfg.ei_starts, ..EiSearch::default() },
        bandit: GexpParams {
            zeta_start: cfg.gexp_zeta_start,
            zeta_end: cfg.gexp_zeta_end,
            implicit_exploration: cfg.gexp_implicit_exploration,
            learning_rate: cfg.gexp_learning_rate,
            preference_step: cfg.gexp_preference_step,
        },
        rate_max: cfg.rate_max,
    };
    Td3Config {
        hidden: cfg.hidden.0.clone(),
        learning_rate: cfg.learning_rate,
        discount: cfg.discount,
        batch: cfg.batch,
        nack_period: cfg.nack_period,
        ack_capacity: cfg.replay_capacity,
        nack_capacity: cfg.replay_capacity,
        target_interval: cfg.target_interval,
        polyak: cfg.polyak,
        policy_delay: cfg.policy_delay,
        delta_max: cfg.delta_max,
        epsilon_start: cfg.epsilon_start,
        epsilon_end: cfg.epsilon_end,
        reward_beta: cfg.reward_beta,
        ack_decay: cfg.ack_decay,
        target_noise: cfg
            .target_noise
            .then_some(TargetNoise { sigma: cfg.target_noise_sigma, clip: cfg.target_noise_clip }),
        olla_step: cfg.olla_step,
        train_interval: cfg.train_interval,
        bo: with_bo.then_some(bo),
    }
}

pub fn dqn_config(cfg: &ExperimentConfig) -> DqnConfig {
    DqnConfig {
        hidden: cfg.hidden.0.clone(),
        learning_rate: cfg.learning_rate,
        discount: cfg.discount,
        batch: cfg.batch,
        rate_levels: cfg.dqn_rate_levels,
        delta_max: cfg.delta_max,
        target_interval: cfg.target_interval,
        train_interval: cfg.train_interval,
        epsilon_start: cfg.epsilon_start,
        epsilon_end: cfg.epsilon_end,
        reward_beta: cfg.reward_beta,
        ack_decay: cfg.ack_decay,
        capacity: cfg.replay_capacity,
    }
}

/// Fresh policy for `cfg.scheme`; network weights come from the seed.
pub fn build_policy(cfg: &ExperimentConfig) -> Result<BoxedPolicy> {
    let env = env_config(cfg);
    let mut rng = stream(cfg.seed, Stream::Network);
    let table = cfg.discrete_mcs.then(McsTable::standard);
    Ok(match cfg.scheme {
        Scheme::Ideal => Box::new(IdealPolicy::new(env.fbl, cfg.rate_max, table)),
        Scheme::Proposed => Box::new(Td3Agent::new(state_layout(cfg), td3_config(cfg, true), &mut rng)?),
        Scheme::Td3 => Box::new(Td3Agent::new(state_layout(cfg), td3_config(cfg, false), &mut rng)?),
        Scheme::Dqn => Box::new(DqnPolicy::new(state_layout(cfg), dqn_config(cfg), &mut rng)?),
        Scheme::BoCmab => Box::new(
            BoCmabPolicy::new(cfg.devices, cfg.bo_cmab_capacity, cfg.rate_max)
                .with_rate_lengthscale(cfg.bo_cmab_lengthscale),
        ),
        Scheme::OllaCmab => Box::new(OllaCmabPolicy::new(
            cfg.devices,
            env.fbl,
            env.cqi,
            cfg.rate_max,
            cfg.baseline_olla_step,
        )),
    })
}

/// Restores a proposed/td3 agent from a checkpoint.
pub fn policy_from_checkpoint(cfg: &ExperimentConfig, checkpoint: Td3Checkpoint) -> Result<BoxedPolicy> {
    if checkpoint.layout != state_layout(cfg) {
        return Err(Error::Checkpoint("checkpoint state layout does not match the config".into()));
    }
    let mut rng = stream(cfg.seed, Stream::Network);
    Ok(Box::new(Td3Agent::from_checkpoint(checkpoint, &mut rng)?))
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub scheme: Scheme,
    pub sum_rate: f64,
    pub avg_bler: f64,
    pub exceeded_count: usize,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,scheme,sum_rate,avg_bler,exceeded_count";

impl EpochRow {
    pub fn to_csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.scheme, self.sum_rate, self.avg_bler, self.exceeded_count)
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.trim_end().split(',').collect();
        if f.len() != 5 {
            return Err(Error::DimensionMismatch { expected: 5, got: f.len() });
        }
        let bad = |s: &str| Error::Config(format!("bad CSV field {s:?}"));
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad(f[0]))?,
            scheme: f[1].parse()?,
            sum_rate: f[2].parse().map_err(|_| bad(f[2]))?,
            avg_bler: f[3].parse().map_err(|_| bad(f[3]))?,
            exceeded_count: f[4].parse().map_err(|_| bad(f[4]))?,
        })
    }
}

pub fn epochs_to_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv_row());
    }
    out
}

/// Trains `policy` for `cfg.epochs` episodes on the training channel.
pub fn train(cfg: &ExperimentConfig, policy: &mut dyn Policy) -> Result<Vec<EpochRow>> {
    let env_cfg = env_config(cfg);
    let mut env = Env::new(env_cfg.clone(), cfg.seed, Stream::Channel)?;
    let mut rng = stream(cfg.seed, Stream::Policy);
    policy.set_training(true);
    policy.set_schedule((cfg.epochs * env_cfg.slots_per_episode()) as u64);
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (m, _) = env.run_episode(policy, &mut rng)?;
        rows.push(EpochRow {
            epoch,
            scheme: cfg.scheme,
            sum_rate: m.sum_rate,
            avg_bler: m.avg_bler,
            exceeded_count: m.exceeded,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub episodes: Vec<EpisodeMetrics>,
    pub summary: EpisodeMetrics,
    pub records: Vec<SlotRecord>,
}

/// Runs `cfg.eval_episodes` test episodes on the held-out channel.
pub fn evaluate(cfg: &ExperimentConfig, policy: &mut dyn Policy) -> Result<EvalResult> {
    let mut env = Env::new(env_config(cfg), cfg.seed, Stream::EvalChannel)?;
    let mut rng = stream(cfg.seed.wrapping_add(1), Stream::Policy);
    policy.set_training(false);
    let mut episodes = Vec::with_capacity(cfg.eval_episodes);
    let mut records = Vec::new();
    for _ in 0..cfg.eval_episodes {
        let (m, r) = env.run_episode(policy, &mut rng)?;
        episodes.push(m);
        records.extend(r);
    }
    let summary = EpisodeMetrics::average(&episodes);
    Ok(EvalResult { episodes, summary, records })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub curve: Vec<EpochRow>,
    pub eval: EvalResult,
    pub checkpoint: Option<Td3Checkpoint>,
}

/// Train then evaluate one scheme.
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult> {
    let mut policy = build_policy(cfg)?;
    let curve = train(cfg, policy.as_mut())?;
    let eval = evaluate(cfg, policy.as_mut())?;
    Ok(RunResult { curve, eval, checkpoint: policy.checkpoint() })
}

/// Hex SHA-256 of the canonical config text.
pub fn run_hash(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_text().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_hash: String,
    pub config: BTreeMap<String, String>,
    pub scheme: Scheme,
    pub sum_rate: f64,
    pub avg_bler: f64,
    pub exceeded_count: usize,
    pub nack_count: usize,
    pub slots: usize,
}

impl RunSummary {
    pub fn new(cfg: &ExperimentConfig, m: &EpisodeMetrics) -> Self {
        Self {
            run_hash: run_hash(cfg),
            config: cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            scheme: cfg.scheme,
            sum_rate: m.sum_rate,
            avg_bler: m.avg_bler,
            exceeded_count: m.exceeded,
            nack_count: m.nacks,
            slots: m.slots,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    Devices,
    BlerThreshold,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "devices" => Ok(SweepAxis::Devices),
            "bler_threshold" | "bler-threshold" => Ok(SweepAxis::BlerThreshold),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Devices => "devices",
            SweepAxis::BlerThreshold => "bler_threshold",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub scheme: Scheme,
    pub seed: u64,
    pub sum_rate: f64,
    pub avg_bler: f64,
    pub exceeded_count: usize,
}

pub const SWEEP_CSV_HEADER: &str = "axis,value,scheme,seed,sum_rate,avg_bler,exceeded_count";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.axis, r.value, r.scheme, r.seed, r.sum_rate, r.avg_bler, r.exceeded_count
        );
    }
    out
}

/// Config for one sweep point.
pub fn sweep_point(base: &ExperimentConfig, axis: SweepAxis, value: f64, scheme: Scheme, seed: u64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.scheme = scheme;
    cfg.seed = seed;
    match axis {
        SweepAxis::Devices => cfg.devices = value as usize,
        SweepAxis::BlerThreshold => cfg.bler_threshold = value,
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Train and evaluate every `(value, scheme, seed)` point in parallel.
/// Rows come back ordered by value, scheme, then seed.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    schemes: &[Scheme],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let mut points = Vec::new();
    for (vi, &v) in values.iter().enumerate() {
        for (si, &s) in schemes.iter().enumerate() {
            for &seed in seeds {
                points.push((vi, si, v, s, seed));
            }
        }
    }
    let mut rows: Vec<((usize, usize, u64), SweepRow)> = points
        .par_iter()
        .map(|&(vi, si, value, scheme, seed)| {
            let cfg = sweep_point(base, axis, value, scheme, seed)?;
            let r = run(&cfg)?;
            let m = r.eval.summary;
            Ok((
                (vi, si, seed),
                SweepRow {
                    axis,
                    value,
                    scheme,
                    seed,
                    sum_rate: m.sum_rate,
                    avg_bler: m.avg_bler,
                    exceeded_count: m.exceeded,
                },
            ))
        })
        .collect::<Result<_>>()?;
    rows.sort_by_key(|(k, _)| *k);
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// Threshold violations grouped by the optimal MCS index of each slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsRow {
    pub index: u32,
    pub count: usize,
    pub violations: usize,
    pub percent: f64,
    /// Variance of `bler − threshold` over the violating slots.
    pub excess_variance: f64,
}

pub const MCS_CSV_HEADER: &str = "optimal_mcs,count,violations,percent,excess_variance";

pub fn mcs_histogram(records: &[SlotRecord], threshold: f64) -> Vec<McsRow> {
    (MCS_INDEX_MIN..=MCS_INDEX_MAX)
        .map(|index| {
            let group: Vec<&SlotRecord> = records.iter().filter(|r| r.optimal_mcs == Some(index)).collect();
            let excess: Vec<f64> = group.iter().filter(|r| r.bler > threshold).map(|r| r.bler - threshold).collect();
            let n = excess.len() as f64;
            let variance = if excess.is_empty() {
                0.0
            } else {
                let mean = excess.iter().sum::<f64>() / n;
                excess.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n
            };
            McsRow {
                index,
                count: group.len(),
                violations: excess.len(),
                percent: if group.is_empty() { 0.0 } else { 100.0 * excess.len() as f64 / group.len() as f64 },
                excess_variance: variance,
            }
        })
        .collect()
}

pub fn mcs_to_csv(rows: &[McsRow]) -> String {
    let mut out = String::from(MCS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.index, r.count, r.violations, r.percent, r.excess_variance);
    }
    out
}
