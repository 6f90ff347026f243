//! Link adaptation for short-packet multi-device downlink scheduling.

pub mod bandit;
pub mod baselines;
pub mod channel;
pub mod env;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gexp_bo;
pub mod gp;
pub mod math;
pub mod nn;
pub mod olla;
pub mod phy;
pub mod rng;
pub mod state;
pub mod td3;

pub use config::{ExperimentConfig, Scheme};
pub use env::{Decision, Env, EnvConfig, EpisodeMetrics, Observation, Policy, SlotRecord};
pub use error::{Error, Result};
pub use phy::{Feedback, FblParams, McsTable};
