//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.
//! [`ExperimentConfig::to_text`] writes every key in a fixed order, so parsing
//! its output gives back the same config.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scheme names accepted by `scheme = ...`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Ideal,
    Proposed,
    Td3,
    Dqn,
    BoCmab,
    OllaCmab,
}

impl Scheme {
    pub const ALL: [Scheme; 6] =
        [Scheme::Ideal, Scheme::Proposed, Scheme::Td3, Scheme::Dqn, Scheme::BoCmab, Scheme::OllaCmab];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Ideal => "ideal",
            Scheme::Proposed => "proposed",
            Scheme::Td3 => "td3",
            Scheme::Dqn => "dqn",
            Scheme::BoCmab => "bo-cmab",
            Scheme::OllaCmab => "olla-cmab",
        }
    }

    pub fn is_learning(self) -> bool {
        matches!(self, Scheme::Proposed | Scheme::Td3 | Scheme::Dqn)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?}")))
    }
}

/// Comma-separated layer widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths(pub Vec<usize>);

impl fmt::Display for Widths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Widths {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad layer width {p:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if v.is_empty() || v.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(Widths(v))
    }
}

/// `auto` or a number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Auto(pub Option<f64>);

impl fmt::Display for Auto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            None => f.write_str("auto"),
            Some(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for Auto {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Auto(None));
        }
        s.parse().map(|v| Auto(Some(v))).map_err(|_| Error::Config(format!("expected a number or auto, got {s:?}")))
    }
}

macro_rules! config_struct {
    ($( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct ExperimentConfig {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field), )*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $( stringify!($field) => {
                        self.$field = value.parse::<$ty>().map_err(|_| {
                            Error::Config(format!("bad value {value:?} for {}", stringify!($field)))
                        })?;
                    } )*
                    other => return Err(Error::Config(format!("unknown key {other:?}"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($field), self.$field.to_string()), )*]
            }
        }
    };
}

config_struct! {
    seed: u64 = 1,
    scheme: Scheme = Scheme::Proposed,
    /// Training epochs; one epoch is `slots_per_epoch` slots.
    epochs: usize = 100,
    slots_per_epoch: usize = 400,
    eval_episodes: usize = 100,
    discrete_mcs: bool = false,
    devices: usize = 4,
    antennas: usize = 4,
    cqi_bits: u32 = 4,
    cqi_delay: usize = 1,
    snr_min_db: f64 = -10.0,
    snr_max_db: f64 = 30.0,
    bler_threshold: f64 = 1e-3,
    blocklength: u32 = 192,
    pathloss_ref_db: f64 = -65.0,
    pathloss_exponent: f64 = 2.2,
    d0: f64 = 1.0,
    rician_factor_db: f64 = 3.0,
    rho: f64 = 0.98,
    power_dbm: f64 = 35.0,
    noise_dbm: f64 = -105.0,
    /// Noise power is `noise_dbm` scaled by this bandwidth (Hz); 1 uses `noise_dbm` as is.
    noise_bandwidth_hz: f64 = 2.0e5,
    slot_duration: f64 = 1e-3,
    history: usize = 12,
    rate_max: f64 = 6.0,
    olla_step: f64 = 0.09,
    baseline_olla_step: f64 = 0.01,
    reward_beta: f64 = 4.0,
    learning_rate: f64 = 1e-3,
    discount: f64 = 0.99,
    target_interval: u64 = 400,
    polyak: f64 = 0.01,
    policy_delay: u64 = 2,
    nack_period: u64 = 5,
    batch: usize = 64,
    hidden: Widths = Widths(vec![128, 128, 128]),
    delta_max: f64 = 1.0,
    epsilon_start: f64 = 0.5,
    epsilon_end: f64 = 0.01,
    target_noise: bool = true,
    target_noise_sigma: f64 = 0.1,
    target_noise_clip: f64 = 0.25,
    train_interval: u64 = 1,
    ack_decay: f64 = 0.99,
    replay_capacity: usize = 50_000,
    gp_capacity: usize = 64,
    gp_noise: f64 = 1e-2,
    gp_rate_lengthscale: f64 = 1.0,
    gp_state_lengthscale: Auto = Auto(None),
    ei_grid: usize = 64,
    ei_starts: usize = 8,
    gexp_zeta_start: f64 = 0.3,
    gexp_zeta_end: f64 = 0.05,
    gexp_implicit_exploration: f64 = 1.0,
    gexp_learning_rate: f64 = 0.1,
    gexp_preference_step: f64 = 0.05,
    bo_cmab_capacity: usize = 64,
    bo_cmab_lengthscale: f64 = 0.2,
    dqn_rate_levels: usize = 9,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.devices == 0 || self.devices > 8 {
            return bad("devices must be in 1..=8");
        }
        if self.slots_per_epoch < self.devices {
            return bad("an epoch must hold at least one frame");
        }
        if !(self.bler_threshold > 0.0 && self.bler_threshold < 0.5) {
            return bad("bler_threshold must lie in (0, 0.5)");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if !(self.noise_bandwidth_hz > 0.0) {
            return bad("noise_bandwidth_hz must be positive");
        }
        if !(self.rate_max > 0.0) || !(self.delta_max > 0.0) {
            return bad("rate_max and delta_max must be positive");
        }
        if !(self.gp_rate_lengthscale > 0.0 && self.bo_cmab_lengthscale > 0.0) {
            return bad("length-scales must be positive");
        }
        if !(self.gp_noise > 0.0) {
            return bad("gp_noise must be positive");
        }
        if self.batch < 2 || self.gp_capacity == 0 || self.ei_grid == 0 {
            return bad("batch, gp_capacity and ei_grid must be positive (batch at least 2)");
        }
        if self.antennas == 0 || self.blocklength == 0 || self.cqi_bits == 0 || self.cqi_delay == 0 {
            return bad("antennas, blocklength, cqi_bits and cqi_delay must be positive");
        }
        Ok(())
    }

    /// Frames per episode.
    pub fn frames(&self) -> usize {
        (self.slots_per_epoch / self.devices).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default();
        c.set("scheme", "bo-cmab").unwrap();
        c.set("hidden", "64, 32").unwrap();
        c.set("gp_state_lengthscale", "2.5").unwrap();
        c.set("rho", "0.95").unwrap();
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ExperimentConfig::parse("seed = 3\nfoo = 1\n").is_err());
    }

    #[test]
    fn comments_and_blanks() {
        let c = ExperimentConfig::parse("# header\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::parse("devices = 0").is_err());
        assert!(ExperimentConfig::parse("rho = 1.5").is_err());
        assert!(ExperimentConfig::parse("scheme = magic").is_err());
        assert!(ExperimentConfig::parse("epochs = -1").is_err());
    }

    #[test]
    fn every_key_is_written() {
        let text = ExperimentConfig::default().to_text();
        assert_eq!(text.lines().count(), ExperimentConfig::KEYS.len());
    }
}
