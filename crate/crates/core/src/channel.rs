//! Device mobility, Rician fading with distance path loss, Gauss-Markov
//! evolution of the scattered component, and per-slot SNR.
//!
//! The base station sits at the origin. Every device orbits a fixed center at
//! constant speed and pauses for a short time after each full revolution. The
//! line-of-sight part of each channel follows the geometry slot by slot; the
//! non-line-of-sight part is a unit-variance i.i.d. complex Gaussian vector
//! that evolves with a first-order Gauss-Markov recursion.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::SimRng;

/// Pause applied after every completed revolution, in seconds.
pub const REVOLUTION_PAUSE_S: f64 = 0.1;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

/// A mobile device in uniform circular motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    /// Zero-based device index.
    pub id: usize,
    pub center: [f64; 2],
    pub orbit_radius: f64,
    /// Linear speed along the orbit, m/s.
    pub speed: f64,
    /// Angular position on the orbit, radians in `[0, 2π)`.
    pub phase: f64,
    /// Seconds of post-revolution pause still to serve.
    pub pause_timer: f64,
}

impl Device {
    pub fn position(&self) -> [f64; 2] {
        [
            self.center[0] + self.orbit_radius * self.phase.cos(),
            self.center[1] + self.orbit_radius * self.phase.sin(),
        ]
    }

    pub fn distance_to(&self, point: [f64; 2]) -> f64 {
        let [x, y] = self.position();
        (x - point[0]).hypot(y - point[1])
    }

    /// Advances the device by `dt` seconds.
    pub fn advance(&mut self, dt: f64) {
        if self.pause_timer > 0.0 {
            self.pause_timer = (self.pause_timer - dt).max(0.0);
            return;
        }
        self.phase += self.speed * dt / self.orbit_radius;
        if self.phase >= TAU {
            self.phase = self.phase.rem_euclid(TAU);
            self.pause_timer = REVOLUTION_PAUSE_S;
        }
    }
}

/// Moves every device forward by `dt` seconds.
pub fn step_mobility(devices: &[Device], dt: f64) -> Vec<Device> {
    debug_assert!(dt > 0.0);
    devices
        .iter()
        .map(|d| {
            let mut d = d.clone();
            d.advance(dt);
            d
        })
        .collect()
}

/// Ranges the deployment is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeploymentRanges {
    pub center_distance: (f64, f64),
    pub orbit_radius: (f64, f64),
    pub speed: (f64, f64),
}

impl Default for DeploymentRanges {
    fn default() -> Self {
        Self {
            center_distance: (8.0, 13.0),
            orbit_radius: (1.5, 5.0),
            speed: (1.5, 2.5),
        }
    }
}

/// Draws `count` devices: centers uniform over the annulus around the origin,
/// orbit radius, speed and initial phase uniform in their ranges.
pub fn sample_deployment(count: usize, ranges: &DeploymentRanges, rng: &mut SimRng) -> Vec<Device> {
    let (r_lo, r_hi) = ranges.center_distance;
    (0..count)
        .map(|id| {
            let radius = rng.random_range(r_lo * r_lo..=r_hi * r_hi).sqrt();
            let angle = rng.random_range(0.0..TAU);
            Device {
                id,
                center: [radius * angle.cos(), radius * angle.sin()],
                orbit_radius: rng.random_range(ranges.orbit_radius.0..=ranges.orbit_radius.1),
                speed: rng.random_range(ranges.speed.0..=ranges.speed.1),
                phase: rng.random_range(0.0..TAU),
                pause_timer: 0.0,
            }
        })
        .collect()
}

/// Large-scale and fading parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RicianParams {
    pub rician_factor_db: f64,
    /// Path loss at the reference distance, dB (negative).
    pub pathloss_ref_db: f64,
    pub pathloss_exponent: f64,
    pub d0: f64,
    /// Per-slot Gauss-Markov correlation of the scattered component.
    pub rho: f64,
    pub antennas: usize,
}

impl Default for RicianParams {
    fn default() -> Self {
        Self {
            rician_factor_db: 3.0,
            pathloss_ref_db: -65.0,
            pathloss_exponent: 2.2,
            d0: 1.0,
            rho: 0.98,
            antennas: 4,
        }
    }
}

impl RicianParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.antennas == 0 {
            return Err(invalid("antenna count must be at least 1"));
        }
        if !(self.d0 > 0.0) {
            return Err(invalid("reference distance must be positive"));
        }
        Ok(())
    }

    /// Linear path-loss gain `ρ0·(d/d0)^(−α)`.
    pub fn path_loss(&self, distance: f64) -> Result<f64> {
        if !(distance > 0.0) {
            return Err(invalid(format!("path loss undefined at distance {distance}")));
        }
        Ok(db_to_linear(self.pathloss_ref_db) * (distance / self.d0).powf(-self.pathloss_exponent))
    }

    /// Power split `(κ/(κ+1), 1/(κ+1))` between the LoS and scattered parts.
    pub fn power_split(&self) -> (f64, f64) {
        let kappa = db_to_linear(self.rician_factor_db);
        if kappa.is_infinite() {
            (1.0, 0.0)
        } else {
            (kappa / (kappa + 1.0), 1.0 / (kappa + 1.0))
        }
    }
}

/// Uniform-linear-array steering vector towards `device_pos` seen from `bs`.
pub fn steering_vector(bs: [f64; 2], device_pos: [f64; 2], antennas: usize) -> Vec<Complex64> {
    let dx = bs[0] - device_pos[0];
    let dy = bs[1] - device_pos[1];
    let sin_a = dy / dx.hypot(dy);
    (0..antennas)
        .map(|m| Complex64::from_polar(1.0, m as f64 * PI * sin_a))
        .collect()
}

/// One `CN(0, variance)` draw.
pub fn complex_gaussian(variance: f64, rng: &mut SimRng) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

pub fn complex_gaussian_vec(len: usize, variance: f64, rng: &mut SimRng) -> Vec<Complex64> {
    (0..len).map(|_| complex_gaussian(variance, rng)).collect()
}

/// Mixes a unit-variance scattered vector with the LoS steering vector.
pub fn compose_channel(
    device: &Device,
    params: &RicianParams,
    bs: [f64; 2],
    scattered: &[Complex64],
) -> Result<Vec<Complex64>> {
    let d = device.distance_to(bs);
    let loss = params.path_loss(d)?;
    let (los_share, nlos_share) = params.power_split();
    let a = (los_share * loss).sqrt();
    let b = (nlos_share * loss).sqrt();
    let los = steering_vector(bs, device.position(), params.antennas);
    Ok(los
        .iter()
        .zip(scattered)
        .map(|(l, n)| l * a + n * b)
        .collect())
}

/// Draws a fresh Rician channel for `device`.
pub fn draw_channel(
    device: &Device,
    params: &RicianParams,
    bs: [f64; 2],
    rng: &mut SimRng,
) -> Result<Vec<Complex64>> {
    let scattered = complex_gaussian_vec(params.antennas, 1.0, rng);
    compose_channel(device, params, bs, &scattered)
}

/// Gauss-Markov step `ρ·h + √(1−ρ²)·e` with `e ~ CN(0, variance·I)`.
pub fn evolve_channel(prev: &[Complex64], rho: f64, variance: f64, rng: &mut SimRng) -> Vec<Complex64> {
    debug_assert!((0.0..=1.0).contains(&rho));
    if rho == 1.0 {
        return prev.to_vec();
    }
    let innovation = (1.0 - rho * rho).sqrt();
    prev.iter()
        .map(|h| h * rho + complex_gaussian(variance, rng) * innovation)
        .collect()
}

pub fn norm_sqr(h: &[Complex64]) -> f64 {
    h.iter().map(|c| c.norm_sqr()).sum()
}

/// Linear SNR `p·‖h‖²/σ²` of the single served device.
pub fn zf_snr(h: &[Complex64], power_w: f64, noise_w: f64) -> Result<f64> {
    let g = norm_sqr(h);
    if !(g > 0.0) {
        return Err(invalid("zero-norm channel has no zero-forcing direction"));
    }
    Ok(power_w * g / noise_w)
}

/// Channel snapshot for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub slot: u64,
    pub gains: Vec<Vec<Complex64>>,
    /// Linear SNR per device.
    pub true_snr: Vec<f64>,
}

impl ChannelState {
    pub fn snr_db(&self, device: usize) -> f64 {
        linear_to_db(self.true_snr[device])
    }
}

/// Transmit power and noise of the link budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub power_w: f64,
    pub noise_w: f64,
}

/// Slot-by-slot channel process for a fixed deployment.
#[derive(Debug, Clone)]
pub struct ChannelSim {
    params: RicianParams,
    budget: LinkBudget,
    bs: [f64; 2],
    slot_duration: f64,
    devices: Vec<Device>,
    scattered: Vec<Vec<Complex64>>,
    slot: u64,
    rng: SimRng,
}

impl ChannelSim {
    pub fn new(
        devices: Vec<Device>,
        params: RicianParams,
        budget: LinkBudget,
        slot_duration: f64,
        mut rng: SimRng,
    ) -> Result<Self> {
        params.validate()?;
        if !(slot_duration > 0.0) {
            return Err(invalid("slot duration must be positive"));
        }
        let scattered = devices
            .iter()
            .map(|_| complex_gaussian_vec(params.antennas, 1.0, &mut rng))
            .collect();
        Ok(Self {
            params,
            budget,
            bs: [0.0, 0.0],
            slot_duration,
            devices,
            scattered,
            slot: 0,
            rng,
        })
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn params(&self) -> &RicianParams {
        &self.params
    }

    /// Channel of the current slot, then advances the process by one slot.
    pub fn next_state(&mut self) -> Result<ChannelState> {
        let mut gains = Vec::with_capacity(self.devices.len());
        let mut true_snr = Vec::with_capacity(self.devices.len());
        for (device, scattered) in self.devices.iter().zip(&self.scattered) {
            let h = compose_channel(device, &self.params, self.bs, scattered)?;
            true_snr.push(zf_snr(&h, self.budget.power_w, self.budget.noise_w)?);
            gains.push(h);
        }
        let state = ChannelState { slot: self.slot, gains, true_snr };

        self.devices = step_mobility(&self.devices, self.slot_duration);
        for s in &mut self.scattered {
            *s = evolve_channel(s, self.params.rho, 1.0, &mut self.rng);
        }
        self.slot += 1;
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn device(speed: f64, radius: f64) -> Device {
        Device {
            id: 0,
            center: [10.0, 0.0],
            orbit_radius: radius,
            speed,
            phase: 0.3,
            pause_timer: 0.0,
        }
    }

    #[test]
    fn zero_speed_keeps_position() {
        let d = device(0.0, 2.0);
        let moved = step_mobility(&[d.clone()], 0.5);
        assert_eq!(moved[0].position(), d.position());
    }

    #[test]
    fn full_revolution_returns_to_start_and_pauses() {
        let r = 2.0;
        let mut d = device(TAU * r, r);
        d.phase = 0.0;
        d.advance(1.0);
        assert!(d.phase.abs() < 1e-9 || (d.phase - TAU).abs() < 1e-9);
        assert_eq!(d.pause_timer, REVOLUTION_PAUSE_S);
        // pause is served before moving again
        d.advance(0.05);
        assert!((d.pause_timer - 0.05).abs() < 1e-12);
        let phase = d.phase;
        d.advance(0.05);
        assert_eq!(d.phase, phase);
        assert_eq!(d.pause_timer, 0.0);
        d.advance(0.01);
        assert!(d.phase > phase);
    }

    #[test]
    fn phase_advance_is_speed_over_radius() {
        let d = device(2.0, 2.0);
        let moved = step_mobility(&[d.clone()], 0.5);
        assert!((moved[0].phase - d.phase - 0.5).abs() < 1e-12);
    }

    #[test]
    fn path_loss_at_reference_distance() {
        let p = RicianParams::default();
        assert!((p.path_loss(p.d0).unwrap() - db_to_linear(-65.0)).abs() < 1e-20);
        assert!(p.path_loss(0.0).is_err());
    }

    #[test]
    fn pure_los_limit_is_deterministic() {
        let params = RicianParams { rician_factor_db: f64::INFINITY, ..Default::default() };
        let d = device(1.0, 2.0);
        let mut rng = stream(3, Stream::Channel);
        let l = params.path_loss(d.distance_to([0.0, 0.0])).unwrap();
        for _ in 0..5 {
            let h = draw_channel(&d, &params, [0.0, 0.0], &mut rng).unwrap();
            assert!((norm_sqr(&h) - params.antennas as f64 * l).abs() / l < 1e-12);
        }
    }

    #[test]
    fn rho_one_is_identity() {
        let mut rng = stream(1, Stream::Channel);
        let h = complex_gaussian_vec(4, 1.0, &mut rng);
        assert_eq!(evolve_channel(&h, 1.0, 1.0, &mut rng), h);
    }

    #[test]
    fn zf_snr_is_linear_in_power() {
        let h = vec![Complex64::new(1.0, 0.0)];
        assert_eq!(zf_snr(&h, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(zf_snr(&h, 2.0, 1.0).unwrap(), 2.0);
        assert!(zf_snr(&[Complex64::new(0.0, 0.0)], 1.0, 1.0).is_err());
    }

    #[test]
    fn identical_seed_gives_identical_trace() {
        let run = || {
            let mut g = stream(11, Stream::Geometry);
            let devices = sample_deployment(3, &DeploymentRanges::default(), &mut g);
            let budget = LinkBudget { power_w: 1.0, noise_w: 1e-9 };
            let mut sim =
                ChannelSim::new(devices, RicianParams::default(), budget, 1e-3, stream(11, Stream::Channel))
                    .unwrap();
            (0..50).map(|_| sim.next_state().unwrap().true_snr).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn deployment_respects_ranges() {
        let mut g = stream(5, Stream::Geometry);
        let ranges = DeploymentRanges::default();
        for d in sample_deployment(200, &ranges, &mut g) {
            let r = d.center[0].hypot(d.center[1]);
            assert!((8.0..=13.0).contains(&r));
            assert!((1.5..=5.0).contains(&d.orbit_radius));
            assert!((1.5..=2.5).contains(&d.speed));
            assert!(d.distance_to([0.0, 0.0]) >= 3.0 - 1e-9);
        }
    }
}
