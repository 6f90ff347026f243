//! Flattened agent state.
//!
//! Per device, in device order: `history + 1` normalised CQI reports (newest
//! first), the last feedback (+1 ACK, −1 NACK, 0 none), the last requested
//! rate over `rate_max`, and the OLLA offset. Blocks of devices already served
//! this frame are zeroed. The served mask follows the blocks.

use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateLayout {
    pub devices: usize,
    pub history: usize,
    pub cqi_levels: u32,
    pub rate_max: f64,
}

impl StateLayout {
    pub fn block_len(&self) -> usize {
        self.history + 4
    }

    pub fn dim(&self) -> usize {
        self.devices * self.block_len() + self.devices
    }

    /// Flattens `obs`. Short CQI histories are padded with their oldest
    /// entry; the returned flag reports whether that happened.
    pub fn build(&self, obs: &Observation) -> Result<(Vec<f64>, bool)> {
        if obs.devices() != self.devices {
            return Err(Error::DimensionMismatch { expected: self.devices, got: obs.devices() });
        }
        let top = (self.cqi_levels.max(2) - 1) as f64;
        let mut out = vec![0.0; self.dim()];
        let mut padded = false;
        for k in 0..self.devices {
            if obs.served[k] {
                continue;
            }
            let block = &mut out[k * self.block_len()..(k + 1) * self.block_len()];
            let hist = &obs.cqi_history[k];
            if hist.is_empty() {
                return Err(crate::error::invalid("empty CQI history"));
            }
            padded |= hist.len() < self.history + 1;
            for (i, slot) in block[..self.history + 1].iter_mut().enumerate() {
                let c = hist.get(i).or(hist.last()).copied().unwrap_or(0);
                *slot = c as f64 / top;
            }
            block[self.history + 1] = obs.last_feedback[k].map_or(0.0, |f| f.signed());
            block[self.history + 2] = obs.last_rate[k] / self.rate_max;
            block[self.history + 3] = obs.olla_delta[k];
        }
        let mask = self.devices * self.block_len();
        for k in 0..self.devices {
            out[mask + k] = if obs.served[k] { 1.0 } else { 0.0 };
        }
        Ok((out, padded))
    }

    pub fn served(&self, state: &[f64]) -> Vec<bool> {
        let mask = self.devices * self.block_len();
        state[mask..mask + self.devices].iter().map(|&m| m > 0.5).collect()
    }

    /// Last requested rate of `device`, bits/symbol.
    pub fn last_rate(&self, state: &[f64], device: usize) -> f64 {
        state[device * self.block_len() + self.history + 2] * self.rate_max
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phy::Feedback;

    fn obs(devices: usize, history: usize) -> Observation {
        Observation {
            slot: 0,
            frame: 0,
            slot_in_frame: 0,
            cqi_history: (0..devices).map(|d| (0..=history).map(|i| (d * 3 + i) as u32).collect()).collect(),
            served: vec![false; devices],
            last_feedback: (0..devices).map(|d| if d % 2 == 0 { Some(Feedback::Ack) } else { Some(Feedback::Nack) }).collect(),
            last_rate: (0..devices).map(|d| 0.5 + d as f64).collect(),
            olla_delta: (0..devices).map(|d| -0.1 * d as f64).collect(),
        }
    }

    fn layout(devices: usize, history: usize) -> StateLayout {
        StateLayout { devices, history, cqi_levels: 16, rate_max: 6.0 }
    }

    #[test]
    fn dimension() {
        let l = layout(2, 1);
        assert_eq!(l.block_len() * 2, 2 * (1 + 4));
        assert_eq!(l.dim(), 12);
        assert_eq!(l.build(&obs(2, 1)).unwrap().0.len(), 12);
    }

    #[test]
    fn zero_inputs_give_zero_state() {
        let mut o = obs(3, 2);
        o.cqi_history.iter_mut().for_each(|h| h.iter_mut().for_each(|c| *c = 0));
        o.last_feedback = vec![None; 3];
        o.last_rate = vec![0.0; 3];
        o.olla_delta = vec![0.0; 3];
        assert!(layout(3, 2).build(&o).unwrap().0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn served_blocks_are_zeroed() {
        let mut o = obs(3, 2);
        o.served[1] = true;
        let l = layout(3, 2);
        let (s, _) = l.build(&o).unwrap();
        assert!(s[l.block_len()..2 * l.block_len()].iter().all(|&v| v == 0.0));
        assert_eq!(l.served(&s), vec![false, true, false]);
        assert!((l.last_rate(&s, 2) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn permuting_devices_permutes_blocks() {
        let l = layout(3, 2);
        let o = obs(3, 2);
        let perm = [2, 0, 1];
        let p = Observation {
            cqi_history: perm.iter().map(|&i| o.cqi_history[i].clone()).collect(),
            served: perm.iter().map(|&i| o.served[i]).collect(),
            last_feedback: perm.iter().map(|&i| o.last_feedback[i]).collect(),
            last_rate: perm.iter().map(|&i| o.last_rate[i]).collect(),
            olla_delta: perm.iter().map(|&i| o.olla_delta[i]).collect(),
            ..o.clone()
        };
        let (a, _) = l.build(&o).unwrap();
        let (b, _) = l.build(&p).unwrap();
        let bl = l.block_len();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(&b[j * bl..(j + 1) * bl], &a[i * bl..(i + 1) * bl]);
        }
    }

    #[test]
    fn short_history_is_padded_and_flagged() {
        let mut o = obs(1, 3);
        o.cqi_history[0].truncate(2);
        let (s, padded) = layout(1, 3).build(&o).unwrap();
        assert!(padded);
        assert_eq!(s[2], s[1]);
        assert_eq!(s[3], s[1]);
    }
}
