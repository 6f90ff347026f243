//! Finite-blocklength link model: BLER under the normal approximation, the
//! largest rate meeting a BLER target, CQI quantization, and the MCS grid.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{q_function, q_inverse};

/// Blocklength and reliability target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FblParams {
    /// Channel uses per block.
    pub blocklength: u32,
    pub bler_threshold: f64,
}

impl Default for FblParams {
    fn default() -> Self {
        Self { blocklength: 192, bler_threshold: 1e-3 }
    }
}

impl FblParams {
    pub fn validate(&self) -> Result<()> {
        if self.blocklength == 0 {
            return Err(invalid("blocklength must be at least 1"));
        }
        if !(self.bler_threshold > 0.0 && self.bler_threshold < 1.0) {
            return Err(invalid(format!("BLER threshold {} outside (0, 1)", self.bler_threshold)));
        }
        Ok(())
    }
}

/// Channel dispersion `1 − (1+γ)^−2`.
fn dispersion(snr: f64) -> f64 {
    1.0 - (1.0 + snr).powi(-2)
}

/// Block error probability of rate `rate` (bits/symbol) at linear SNR `snr`.
pub fn bler(snr: f64, rate: f64, blocklength: u32) -> Result<f64> {
    if !(snr > 0.0) {
        return Err(invalid(format!("BLER needs a positive SNR, got {snr}")));
    }
    if blocklength == 0 {
        return Err(invalid("blocklength must be at least 1"));
    }
    if !(rate >= 0.0) {
        return Err(invalid(format!("rate must be non-negative, got {rate}")));
    }
    let spread = (dispersion(snr) / blocklength as f64).sqrt();
    Ok(q_function(((1.0 + snr).log2() - rate) / spread))
}

/// Largest rate whose BLER does not exceed `eps`, clamped at zero.
pub fn ideal_rate(snr: f64, eps: f64, blocklength: u32) -> Result<f64> {
    if !(snr > 0.0) {
        return Err(invalid(format!("ideal rate needs a positive SNR, got {snr}")));
    }
    if !(eps > 0.0 && eps <= 0.5) {
        return Err(invalid(format!("target BLER {eps} outside (0, 0.5]")));
    }
    let capacity = (1.0 + snr).log2();
    let spread = (dispersion(snr) / blocklength as f64).sqrt();
    let backoff = if eps == 0.5 { 0.0 } else { q_inverse(eps) * spread };
    let mut rate = capacity - backoff;
    if rate <= 0.0 {
        return Ok(0.0);
    }
    // round-off can leave the BLER a few ulps above the target
    let mut step = rate * f64::EPSILON;
    while bler(snr, rate, blocklength)? > eps && rate > 0.0 {
        rate -= step;
        step *= 2.0;
    }
    Ok(rate.max(0.0))
}

/// Binary feedback returned by the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Feedback {
    Ack,
    Nack,
}

impl Feedback {
    pub fn is_ack(self) -> bool {
        matches!(self, Feedback::Ack)
    }

    /// `0` for ACK, `1` for NACK.
    pub fn failure_indicator(self) -> f64 {
        match self {
            Feedback::Ack => 0.0,
            Feedback::Nack => 1.0,
        }
    }

    /// `+1` for ACK, `−1` for NACK.
    pub fn signed(self) -> f64 {
        match self {
            Feedback::Ack => 1.0,
            Feedback::Nack => -1.0,
        }
    }
}

/// Result of one transmission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkOutcome {
    pub device: usize,
    pub rate: f64,
    pub bler: f64,
    pub feedback: Feedback,
}

impl LinkOutcome {
    /// Packet size `m·r̂` in bits.
    pub fn packet_bits(&self, blocklength: u32) -> f64 {
        blocklength as f64 * self.rate
    }
}

/// Sends one block: ACK iff the BLER stays strictly below the threshold.
pub fn transmit(device: usize, snr: f64, rate: f64, fbl: &FblParams) -> Result<LinkOutcome> {
    let eps = bler(snr, rate, fbl.blocklength)?;
    let feedback = if eps < fbl.bler_threshold { Feedback::Ack } else { Feedback::Nack };
    Ok(LinkOutcome { device, rate, bler: eps, feedback })
}

/// Uniform SNR quantizer feeding channel-quality reports back to the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CqiCodec {
    pub bits: u32,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Age of the report in slots.
    pub delay_slots: usize,
    /// Bound on the induced channel error; carried for reporting only.
    pub error_radius: f64,
}

impl Default for CqiCodec {
    fn default() -> Self {
        Self { bits: 4, snr_min_db: -10.0, snr_max_db: 30.0, delay_slots: 1, error_radius: 0.0 }
    }
}

impl CqiCodec {
    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > 16 {
            return Err(invalid(format!("CQI bits must be in 1..=16, got {}", self.bits)));
        }
        if !(self.snr_min_db < self.snr_max_db) {
            return Err(invalid("CQI range must satisfy min < max"));
        }
        if self.delay_slots == 0 {
            return Err(invalid("CQI delay must be at least one slot"));
        }
        Ok(())
    }

    pub fn levels(&self) -> u32 {
        1 << self.bits
    }

    pub fn bin_width_db(&self) -> f64 {
        (self.snr_max_db - self.snr_min_db) / (self.levels() - 1) as f64
    }

    /// Maps an SNR in dB to its CQI index.
    pub fn quantize(&self, snr_db: f64) -> u32 {
        let top = self.levels() - 1;
        if snr_db <= self.snr_min_db {
            0
        } else if snr_db >= self.snr_max_db {
            top
        } else {
            let idx = ((snr_db - self.snr_min_db) * top as f64
                / (self.snr_max_db - self.snr_min_db))
                .floor() as u32;
            idx.min(top)
        }
    }

    /// Lower edge of the SNR bin of `cqi`, dB.
    pub fn bin_floor_db(&self, cqi: u32) -> Result<f64> {
        if cqi >= self.levels() {
            return Err(invalid(format!("CQI {cqi} outside 0..{}", self.levels())));
        }
        Ok(self.snr_min_db + cqi as f64 * self.bin_width_db())
    }

    /// Midpoint of the SNR bin of `cqi`, dB.
    pub fn dequantize(&self, cqi: u32) -> Result<f64> {
        Ok(self.bin_floor_db(cqi)? + 0.5 * self.bin_width_db())
    }
}

/// One row of the MCS grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McsEntry {
    pub index: u32,
    pub modulation_order: u32,
    /// Bits per symbol.
    pub rate: f64,
}

/// Contiguous, strictly increasing MCS grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsTable {
    entries: Vec<McsEntry>,
}

const MCS_TABLE3: &str = include_str!("../data/mcs_table3.csv");

pub const MCS_INDEX_MIN: u32 = 8;
pub const MCS_INDEX_MAX: u32 = 24;

impl McsTable {
    pub fn new(entries: Vec<McsEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("MCS table is empty"));
        }
        for pair in entries.windows(2) {
            if pair[1].index != pair[0].index + 1 {
                return Err(invalid("MCS indices must be contiguous"));
            }
            if !(pair[1].rate > pair[0].rate) {
                return Err(invalid(format!(
                    "MCS rates must increase strictly (index {})",
                    pair[1].index
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Parses `index,modulation_order,rate_x1024,spectral_efficiency` rows and
    /// keeps indices within `[lo, hi]`.
    pub fn parse(text: &str, lo: u32, hi: u32) -> Result<Self> {
        let mut entries = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 4 {
                return Err(invalid(format!("malformed MCS row: {line}")));
            }
            let parse_err = |_| invalid(format!("malformed MCS row: {line}"));
            let index: u32 = cols[0].parse().map_err(parse_err)?;
            let modulation_order: u32 = cols[1].parse().map_err(parse_err)?;
            let rate: f64 = cols[3].parse().map_err(|_| invalid(format!("malformed MCS row: {line}")))?;
            if (lo..=hi).contains(&index) {
                entries.push(McsEntry { index, modulation_order, rate });
            }
        }
        Self::new(entries)
    }

    /// Bundled grid, indices 8 through 24.
    pub fn standard() -> Self {
        Self::parse(MCS_TABLE3, MCS_INDEX_MIN, MCS_INDEX_MAX).expect("bundled MCS table is valid")
    }

    pub fn entries(&self) -> &[McsEntry] {
        &self.entries
    }

    pub fn min_rate(&self) -> f64 {
        self.entries[0].rate
    }

    pub fn max_rate(&self) -> f64 {
        self.entries[self.entries.len() - 1].rate
    }

    /// Nearest entry by rate, ties to the lower index; clamps outside the grid.
    pub fn discretize(&self, rate: f64) -> McsEntry {
        let mut best = self.entries[0];
        let mut best_gap = (rate - best.rate).abs();
        for e in &self.entries[1..] {
            let gap = (rate - e.rate).abs();
            if gap < best_gap - 1e-12 {
                best = *e;
                best_gap = gap;
            }
        }
        best
    }

    /// Largest entry not above `rate`; the lowest entry when `rate` is below the grid.
    pub fn floor(&self, rate: f64) -> McsEntry {
        self.entries
            .iter()
            .rev()
            .find(|e| e.rate <= rate)
            .copied()
            .unwrap_or(self.entries[0])
    }

    pub fn by_index(&self, index: u32) -> Option<McsEntry> {
        self.entries.iter().find(|e| e.index == index).copied()
    }
}

impl std::str::FromStr for Feedback {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ACK" | "ack" => Ok(Feedback::Ack),
            "NACK" | "nack" => Ok(Feedback::Nack),
            other => Err(invalid(format!("unknown feedback {other:?}"))),
        }
    }
}

impl std::fmt::Display for Feedback {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Feedback::Ack => "ACK",
            Feedback::Nack => "NACK",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::q_inverse;

    #[test]
    fn capacity_rate_gives_half() {
        for &snr in &[0.1, 1.0, 10.0, 1000.0] {
            let r = (1.0f64 + snr).log2();
            assert_eq!(bler(snr, r, 192).unwrap(), 0.5);
        }
    }

    #[test]
    fn zero_rate_at_ten_is_negligible() {
        assert!(bler(10.0, 0.0, 192).unwrap() < 1e-30);
    }

    #[test]
    fn threshold_z_gives_target() {
        let snr = 10.0;
        let spread = ((1.0 - 121f64.powi(-1)) / 192.0).sqrt();
        let z = q_inverse(1e-3);
        let r = 11f64.log2() - z * spread;
        assert!((bler(snr, r, 192).unwrap() - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_snr() {
        assert!(bler(0.0, 1.0, 192).is_err());
        assert!(bler(-1.0, 1.0, 192).is_err());
        assert!(ideal_rate(0.0, 1e-3, 192).is_err());
    }

    #[test]
    fn ideal_rate_at_half_is_capacity() {
        assert_eq!(ideal_rate(10.0, 0.5, 192).unwrap(), 11f64.log2());
    }

    #[test]
    fn ideal_rate_grid_oracle() {
        // brute-force the largest rate on a 1e-4 grid with BLER <= 1e-3
        let snr = 10.0;
        let mut best = 0.0;
        let mut r = 0.0;
        while r < 4.0 {
            if bler(snr, r, 192).unwrap() <= 1e-3 {
                best = r;
            }
            r += 1e-4;
        }
        let exact = ideal_rate(snr, 1e-3, 192).unwrap();
        assert!((exact - 3.237).abs() < 1e-3, "{exact}");
        assert!(exact >= best && exact - best < 1e-4 + 1e-12);
        assert!(bler(snr, exact, 192).unwrap() <= 1e-3);
    }

    #[test]
    fn ideal_rate_clamps_at_zero() {
        assert_eq!(ideal_rate(1e-4, 1e-3, 192).unwrap(), 0.0);
    }

    #[test]
    fn transmit_thresholds() {
        let fbl = FblParams::default();
        assert_eq!(transmit(0, 5.0, 0.0, &fbl).unwrap().feedback, Feedback::Ack);
        let cap = 6f64.log2();
        assert_eq!(transmit(0, 5.0, cap, &fbl).unwrap().feedback, Feedback::Nack);
        let r = ideal_rate(5.0, 1e-3, 192).unwrap();
        assert_eq!(transmit(0, 5.0, r - 1e-9, &fbl).unwrap().feedback, Feedback::Ack);
    }

    #[test]
    fn cqi_examples() {
        let c = CqiCodec::default();
        assert_eq!(c.quantize(-10.0), 0);
        assert_eq!(c.quantize(-40.0), 0);
        assert_eq!(c.quantize(30.0), 15);
        assert_eq!(c.quantize(10.0), 7);
        assert!((c.dequantize(0).unwrap() - (-10.0 + c.bin_width_db() / 2.0)).abs() < 1e-12);
        assert!(c.dequantize(16).is_err());
    }

    #[test]
    fn cqi_round_trip_all_levels() {
        let c = CqiCodec::default();
        for cqi in 0..c.levels() {
            assert_eq!(c.quantize(c.dequantize(cqi).unwrap()), cqi);
        }
    }

    #[test]
    fn cqi_sandwich() {
        let c = CqiCodec::default();
        let half = c.bin_width_db() / 2.0;
        let mut x = -10.0;
        while x < 30.0 {
            let back = c.dequantize(c.quantize(x)).unwrap();
            assert!((back - x).abs() <= half + 1e-12, "x={x}");
            x += 0.013;
        }
    }

    #[test]
    fn mcs_table_bundled() {
        let t = McsTable::standard();
        assert_eq!(t.entries().len(), 17);
        assert_eq!(t.entries()[0].index, 8);
        assert_eq!(t.entries()[16].index, 24);
        assert_eq!(t.discretize(0.0).index, 8);
        assert_eq!(t.discretize(10.0).index, 24);
        for e in t.entries() {
            assert_eq!(t.discretize(e.rate), *e);
            assert_eq!(t.floor(e.rate), *e);
        }
    }

    #[test]
    fn mcs_ties_go_low() {
        let t = McsTable::standard();
        let a = t.by_index(10).unwrap().rate;
        let b = t.by_index(11).unwrap().rate;
        assert_eq!(t.discretize((a + b) / 2.0).index, 10);
    }

    #[test]
    fn mcs_table_rejects_non_monotone() {
        let rows = "1,2,1,0.5\n2,2,1,0.4\n";
        assert!(McsTable::parse(rows, 0, 10).is_err());
        let gap = "1,2,1,0.5\n3,2,1,0.6\n";
        assert!(McsTable::parse(gap, 0, 10).is_err());
    }
}
