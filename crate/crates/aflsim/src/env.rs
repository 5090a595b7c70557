//! Vehicular edge environment under one RSU.
//!
//! `K` vehicles move east at a common velocity through the RSU's coverage.
//! Per slot, each vehicle carries an x-position, a complex channel
//! coefficient evolved by a first-order autoregressive model whose
//! correlation follows the Jakes spectrum (`rho = J0(2 pi f_d t)` from the
//! position-dependent Doppler), freshly drawn compute resources from a
//! truncated Gaussian, and a fixed local data size. From those the module
//! derives Shannon uplink rates and the two delay quantities that drive
//! staleness weighting: local training delay and model upload delay.
//!
//! Geometry: the antenna sits at `(0, 0, H_r)`; vehicle `i` at
//! `(d_ix, d_y, 0)` with a fixed lateral offset `d_y`. All units are SI
//! (m, s, Hz, W, cycles/s, bits).

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Truncated Gaussian over compute resources, in cycles/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGaussian {
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncatedGaussian {
    /// Rejection-samples within `[lo, hi]`; clamps after a bounded number of
    /// attempts so pathological configs cannot spin forever.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let normal = Normal::new(self.mean, self.std).expect("std validated > 0");
        for _ in 0..1000 {
            let v = normal.sample(rng);
            if v >= self.lo && v <= self.hi {
                return v;
            }
        }
        self.mean.clamp(self.lo, self.hi)
    }
}

/// Static parameters of the vehicular environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Number of vehicles under the RSU.
    pub k: usize,
    /// Common velocity along the x-axis, m/s.
    pub velocity_mps: f64,
    /// Slot duration, s.
    pub slot_duration_s: f64,
    /// Antenna height, m.
    pub antenna_height_m: f64,
    /// Lateral (y) offset of the lane from the antenna, m.
    pub lateral_offset_m: f64,
    /// Uplink bandwidth, Hz.
    pub bandwidth_hz: f64,
    /// Vehicle transmit power, W.
    pub tx_power_w: f64,
    /// Noise power, W.
    pub noise_power_w: f64,
    /// Path-loss exponent.
    pub path_loss_exp: f64,
    /// Carrier wavelength, m.
    pub wavelength_m: f64,
    /// CPU cycles needed to train on one sample.
    pub cycles_per_sample: f64,
    /// Size of one serialized local model, bits.
    pub model_size_bits: f64,
    /// Coverage interval on the x-axis, m; vehicles wrap around.
    pub coverage_x: (f64, f64),
    /// Per-slot compute-resource distribution, cycles/s.
    pub compute_dist: TruncatedGaussian,
    /// Inclusive range of per-vehicle local data sizes, samples.
    pub data_size_range: (usize, usize),
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(format!("env: {msg}")));
        if self.k == 0 {
            return fail("k must be >= 1");
        }
        if self.slot_duration_s <= 0.0 {
            return fail("slot_duration_s must be > 0");
        }
        if self.noise_power_w <= 0.0 {
            return fail("noise_power_w must be > 0");
        }
        if self.path_loss_exp < 0.0 {
            return fail("path_loss_exp must be >= 0");
        }
        if self.coverage_x.0 >= self.coverage_x.1 {
            return fail("coverage_x must satisfy x_min < x_max");
        }
        if self.compute_dist.lo <= 0.0 {
            return fail("compute_dist.lo must be > 0");
        }
        if self.compute_dist.std <= 0.0 || self.compute_dist.lo > self.compute_dist.hi {
            return fail("compute_dist must have std > 0 and lo <= hi");
        }
        if self.wavelength_m <= 0.0 {
            return fail("wavelength_m must be > 0");
        }
        if self.data_size_range.0 < 1 || self.data_size_range.0 > self.data_size_range.1 {
            return fail("data_size_range must satisfy 1 <= lo <= hi");
        }
        Ok(())
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            k: 5,
            velocity_mps: 20.0,
            slot_duration_s: 0.5,
            antenna_height_m: 10.0,
            lateral_offset_m: 5.0,
            bandwidth_hz: 1000.0,
            tx_power_w: 0.25,
            // 1e-9 mW expressed in watts
            noise_power_w: 1e-12,
            path_loss_exp: 2.0,
            wavelength_m: 7.0,
            cycles_per_sample: 1e6,
            model_size_bits: 5000.0,
            coverage_x: (-250.0, 250.0),
            compute_dist: TruncatedGaussian {
                mean: 1e9,
                std: 3e8,
                lo: 1e8,
                hi: 2e9,
            },
            data_size_range: (500, 2000),
        }
    }
}

/// Per-vehicle simulation state for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub index: usize,
    /// x-position relative to the antenna base, m.
    pub pos_x: f64,
    /// Complex channel coefficient; `|h|^2` is the power gain.
    pub gain: Complex64,
    /// Compute resources available this slot, cycles/s.
    pub compute_hz: f64,
    /// Local data size, samples.
    pub data_size: usize,
    pub is_bad: bool,
    /// Multiplier on the compute distribution (bad nodes get < 1).
    pub compute_scale: f64,
}

fn complex_gaussian_unit(rng: &mut impl Rng) -> Complex64 {
    // unit-variance complex Gaussian: Re, Im ~ N(0, 1/2)
    let comp = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("static std");
    Complex64::new(comp.sample(rng), comp.sample(rng))
}

/// Draws a fresh fleet: positions uniform over coverage, unit-variance
/// complex Gaussian channel gains, compute and data sizes from the
/// configured distributions. Deterministic per seed.
pub fn reset(cfg: &EnvConfig, seed: u64) -> Vec<VehicleState> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..cfg.k)
        .map(|index| {
            let pos_x = rng.random_range(cfg.coverage_x.0..cfg.coverage_x.1);
            let gain = complex_gaussian_unit(&mut rng);
            let compute_hz = cfg.compute_dist.sample(&mut rng);
            let data_size = rng.random_range(cfg.data_size_range.0..=cfg.data_size_range.1);
            VehicleState {
                index,
                pos_x,
                gain,
                compute_hz,
                data_size,
                is_bad: false,
                compute_scale: 1.0,
            }
        })
        .collect()
}

fn wrap_position(x: f64, coverage: (f64, f64)) -> f64 {
    let span = coverage.1 - coverage.0;
    coverage.0 + (x - coverage.0).rem_euclid(span)
}

/// Evolves one channel coefficient by the autoregressive fading model
/// `h' = rho * h + e * sqrt(1 - rho^2)` with `e` unit-variance complex
/// Gaussian.
pub fn channel_step(gain: Complex64, rho: f64, rng: &mut impl Rng) -> Complex64 {
    let e = complex_gaussian_unit(rng);
    gain * rho + e * (1.0 - rho * rho).max(0.0).sqrt()
}

/// Advances the fleet by one slot: positions shift by `v * t` (wrapping
/// within coverage), gains evolve with the correlation implied by each
/// vehicle's current Doppler, and compute resources are redrawn.
pub fn advance_slot(fleet: &[VehicleState], cfg: &EnvConfig, seed: u64) -> Vec<VehicleState> {
    fleet
        .iter()
        .map(|v| {
            let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, v.index as u64));
            let rho = correlation_rho(doppler(v, cfg), cfg.slot_duration_s);
            let gain = channel_step(v.gain, rho, &mut rng);
            let compute_hz = v.compute_scale * cfg.compute_dist.sample(&mut rng);
            VehicleState {
                index: v.index,
                pos_x: wrap_position(
                    v.pos_x + cfg.velocity_mps * cfg.slot_duration_s,
                    cfg.coverage_x,
                ),
                gain,
                compute_hz,
                data_size: v.data_size,
                is_bad: v.is_bad,
                compute_scale: v.compute_scale,
            }
        })
        .collect()
}

/// Euclidean distance from the vehicle to the antenna, m.
pub fn distance(vehicle: &VehicleState, cfg: &EnvConfig) -> f64 {
    (vehicle.pos_x * vehicle.pos_x
        + cfg.lateral_offset_m * cfg.lateral_offset_m
        + cfg.antenna_height_m * cfg.antenna_height_m)
        .sqrt()
}

/// Cosine of the angle between the driving direction (+x) and the uplink
/// direction from the vehicle to the antenna.
pub fn cos_theta(vehicle: &VehicleState, cfg: &EnvConfig) -> Result<f64> {
    let d = distance(vehicle, cfg);
    if d == 0.0 {
        return Err(Error::DegenerateGeometry);
    }
    // x-component of P_r - P_i over its norm
    Ok(-vehicle.pos_x / d)
}

/// Doppler frequency `(v / lambda) * cos(theta)`, Hz. Zero when the
/// geometry is degenerate (vehicle exactly at the antenna).
pub fn doppler(vehicle: &VehicleState, cfg: &EnvConfig) -> f64 {
    match cos_theta(vehicle, cfg) {
        Ok(c) => cfg.velocity_mps / cfg.wavelength_m * c,
        Err(_) => 0.0,
    }
}

/// Slot-to-slot channel correlation from the Jakes spectrum:
/// `J0(2 pi f_d t)`.
pub fn correlation_rho(doppler_hz: f64, slot_duration_s: f64) -> f64 {
    bessel_j0(2.0 * std::f64::consts::PI * doppler_hz * slot_duration_s)
}

/// Zeroth-order Bessel function of the first kind.
///
/// Power series below `|x| = 8`, asymptotic rational approximation beyond;
/// absolute error stays under 1e-6 on `|x| <= 50`.
pub fn bessel_j0(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 8.0 {
        // sum of (-1)^m (x^2/4)^m / (m!)^2
        let q = 0.25 * x * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        for m in 1..64 {
            term *= -q / ((m * m) as f64);
            sum += term;
            if term.abs() < 1e-18 * sum.abs().max(1.0) {
                break;
            }
        }
        sum
    } else {
        let z = 8.0 / ax;
        let y = z * z;
        let p1 = 1.0
            + y * (-0.1098628627e-2
                + y * (0.2734510407e-4 + y * (-0.2073370639e-5 + y * 0.2093887211e-6)));
        let p2 = -0.1562499995e-1
            + y * (0.1430488765e-3
                + y * (-0.6911147651e-5 + y * (0.7621095161e-6 + y * (-0.934935152e-7))));
        let xx = ax - std::f64::consts::FRAC_PI_4;
        (2.0 / (std::f64::consts::PI * ax)).sqrt() * (xx.cos() * p1 - z * xx.sin() * p2)
    }
}

/// Shannon uplink rate in bits/s; the channel enters as the squared
/// magnitude of the complex coefficient.
pub fn transmission_rate(vehicle: &VehicleState, cfg: &EnvConfig) -> f64 {
    let d = distance(vehicle, cfg);
    let snr = cfg.tx_power_w * vehicle.gain.norm_sqr() * d.powf(-cfg.path_loss_exp)
        / cfg.noise_power_w;
    cfg.bandwidth_hz * (1.0 + snr).log2()
}

/// Largest achievable rate under this config (unit power gain at the point
/// of closest approach); used to normalize rate observations.
pub fn max_rate(cfg: &EnvConfig) -> f64 {
    let d_min_sq =
        cfg.antenna_height_m * cfg.antenna_height_m + cfg.lateral_offset_m * cfg.lateral_offset_m;
    let snr = cfg.tx_power_w * d_min_sq.powf(-cfg.path_loss_exp / 2.0) / cfg.noise_power_w;
    cfg.bandwidth_hz * (1.0 + snr).log2()
}

/// Local training delay `D * C0 / mu`, s.
pub fn local_training_delay(vehicle: &VehicleState, cfg: &EnvConfig) -> Result<f64> {
    if vehicle.compute_hz <= 0.0 {
        return Err(Error::InvalidConfig(
            "vehicle compute resources must be > 0".into(),
        ));
    }
    if vehicle.data_size == 0 {
        return Err(Error::InvalidConfig("vehicle data size must be >= 1".into()));
    }
    Ok(vehicle.data_size as f64 * cfg.cycles_per_sample / vehicle.compute_hz)
}

/// Model upload delay `|w| / rate`, s. A zero rate yields `+inf`: the
/// vehicle is effectively unusable this slot.
pub fn upload_delay(vehicle: &VehicleState, cfg: &EnvConfig) -> f64 {
    let rate = transmission_rate(vehicle, cfg);
    if rate <= 0.0 {
        if cfg.model_size_bits == 0.0 {
            return 0.0;
        }
        return f64::INFINITY;
    }
    cfg.model_size_bits / rate
}
