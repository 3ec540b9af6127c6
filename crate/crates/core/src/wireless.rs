//! Link budgets and per-round delay/energy accounting.
//!
//! Covers the sidelink multicast used for data sharing, the downlink
//! broadcast of the global model, local computation on each device and the
//! OFDMA upload of local models. All quantities are SI: W, Hz, s, J, bits.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jfvo::SharingPlan;
use crate::rng::rng_for;

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm) * 1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioParams {
    /// W/Hz
    pub noise_density: f64,
    pub multicast_bandwidth: f64,
    pub downlink_bandwidth: f64,
    pub uplink_bandwidth: f64,
    pub num_subcarriers: usize,
    pub bs_power: f64,
    pub ue_power: f64,
    pub multicast_interference: f64,
    pub downlink_interference: f64,
    pub uplink_interference: f64,
}

impl RadioParams {
    /// System parameters of the reference deployment. The multicast
    /// interference of 3 dB is taken relative to the multicast noise power.
    pub fn reference() -> Self {
        let noise_density = dbm_to_watts(-174.0);
        let multicast_bandwidth = 1e9;
        Self {
            noise_density,
            multicast_bandwidth,
            downlink_bandwidth: 20e6,
            uplink_bandwidth: 1e6,
            num_subcarriers: 10,
            bs_power: 1.0,
            ue_power: 0.01,
            multicast_interference: db_to_linear(3.0) * noise_density * multicast_bandwidth,
            downlink_interference: 0.0,
            uplink_interference: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("noise_density", self.noise_density),
            ("multicast_bandwidth", self.multicast_bandwidth),
            ("downlink_bandwidth", self.downlink_bandwidth),
            ("uplink_bandwidth", self.uplink_bandwidth),
            ("bs_power", self.bs_power),
            ("ue_power", self.ue_power),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("multicast_interference", self.multicast_interference),
            ("downlink_interference", self.downlink_interference),
            ("uplink_interference", self.uplink_interference),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.num_subcarriers == 0 {
            return Err(Error::validation("num_subcarriers must be positive"));
        }
        Ok(())
    }

    pub fn multicast_noise_plus_interference(&self) -> f64 {
        self.noise_density * self.multicast_bandwidth + self.multicast_interference
    }

    pub fn downlink_noise_plus_interference(&self) -> f64 {
        self.downlink_interference + self.downlink_bandwidth * self.noise_density
    }

    pub fn uplink_noise_plus_interference(&self) -> f64 {
        self.uplink_interference + self.uplink_bandwidth * self.noise_density
    }
}

/// One propagation state of the sidelink path-loss model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathLossState {
    pub probability: f64,
    pub coefficient: f64,
    pub exponent: f64,
    pub shadow: f64,
    pub small_scale: f64,
}

impl PathLossState {
    /// Free-space line of sight at the given carrier frequency.
    pub fn free_space(carrier_hz: f64) -> Self {
        let k = 4.0 * std::f64::consts::PI * carrier_hz / SPEED_OF_LIGHT;
        Self {
            probability: 1.0,
            coefficient: k * k,
            exponent: 2.0,
            shadow: 1.0,
            small_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidelinkGeometry {
    pub distance: f64,
    pub tx_gain: f64,
    pub rx_gain: f64,
    pub states: Vec<PathLossState>,
}

fn validate_states(states: &[PathLossState]) -> Result<()> {
    if states.is_empty() {
        return Err(Error::validation("at least one path-loss state is required"));
    }
    let mut total = 0.0;
    for s in states {
        if s.probability < 0.0 || !(s.coefficient > 0.0) {
            return Err(Error::validation(format!("invalid path-loss state {s:?}")));
        }
        total += s.probability;
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "path-loss state probabilities sum to {total}"
        )));
    }
    Ok(())
}

/// Linear SINR of a sidelink: the probability-weighted sum over path-loss
/// states of `P·G_m·G_c·A⁻¹·d^{−ζ}·S·U`, over `N0·B_s + I`.
pub fn multicast_sinr(tx_power: f64, geom: &SidelinkGeometry, radio: &RadioParams) -> Result<f64> {
    if !(geom.distance > 0.0) {
        return Err(Error::Domain(format!(
            "sidelink distance must be positive, got {}",
            geom.distance
        )));
    }
    validate_states(&geom.states)?;
    let c = tx_power * geom.tx_gain * geom.rx_gain;
    let received: f64 = geom
        .states
        .iter()
        .map(|s| {
            c / s.coefficient * geom.distance.powf(-s.exponent) * s.probability * s.shadow * s.small_scale
        })
        .sum();
    Ok(received / radio.multicast_noise_plus_interference())
}

pub fn shannon_rate(bandwidth: f64, sinr: f64) -> f64 {
    bandwidth * (1.0 + sinr).log2()
}

/// Transmitter side of the sidelink: power, antenna gains and path-loss states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidelinkChannel {
    pub tx_power: f64,
    pub tx_gain: f64,
    pub rx_gain: f64,
    pub states: Vec<PathLossState>,
}

impl SidelinkChannel {
    /// Single line-of-sight state at 28 GHz with unit antenna gains.
    pub fn reference(tx_power: f64) -> Self {
        Self {
            tx_power,
            tx_gain: 1.0,
            rx_gain: 1.0,
            states: vec![PathLossState::free_space(28e9)],
        }
    }

    pub fn geometry(&self, distance: f64) -> SidelinkGeometry {
        SidelinkGeometry {
            distance,
            tx_gain: self.tx_gain,
            rx_gain: self.rx_gain,
            states: self.states.clone(),
        }
    }

    pub fn sinr(&self, distance: f64, radio: &RadioParams) -> Result<f64> {
        multicast_sinr(self.tx_power, &self.geometry(distance), radio)
    }

    pub fn rate(&self, distance: f64, radio: &RadioParams) -> Result<f64> {
        Ok(shannon_rate(radio.multicast_bandwidth, self.sinr(distance, radio)?))
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Multicast rate of a cluster, limited by its worst member link.
pub fn cluster_multicast_rate(
    head: usize,
    members: &BTreeSet<usize>,
    positions: &[[f64; 2]],
    channel: &SidelinkChannel,
    radio: &RadioParams,
) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::validation(format!(
            "cluster {head} has no members and therefore no multicast rate"
        )));
    }
    let mut rate = f64::INFINITY;
    for &c in members {
        let d = distance(positions[head], positions[c]);
        rate = rate.min(channel.rate(d, radio)?);
    }
    Ok(rate)
}

/// Worst-link rate given per-member SINRs.
pub fn min_link_rate(bandwidth: f64, member_sinrs: &[f64]) -> Result<f64> {
    if member_sinrs.is_empty() {
        return Err(Error::validation("multicast rate of an empty member set"));
    }
    Ok(member_sinrs
        .iter()
        .map(|&s| shannon_rate(bandwidth, s))
        .fold(f64::INFINITY, f64::min))
}

/// Sharing completes when the slowest cluster finishes its multicast.
pub fn sharing_delay_real(
    volumes: &BTreeMap<usize, f64>,
    rates: &BTreeMap<usize, f64>,
    bits_per_sample: f64,
) -> Result<f64> {
    let mut delay: f64 = 0.0;
    for (&m, &n_s) in volumes {
        if n_s <= 0.0 {
            continue;
        }
        let rate = rates.get(&m).copied().unwrap_or(0.0);
        if !(rate > 0.0) {
            return Err(Error::Infeasible(format!(
                "cluster {m} shares {n_s} samples over a zero-rate link"
            )));
        }
        delay = delay.max(bits_per_sample * n_s / rate);
    }
    Ok(delay)
}

pub fn sharing_delay(
    plan: &SharingPlan,
    rates: &BTreeMap<usize, f64>,
    bits_per_sample: f64,
) -> Result<f64> {
    sharing_delay_real(&plan.real_volumes(), rates, bits_per_sample)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FadingDistribution {
    /// Rayleigh amplitude with `E|h|² = scale²`.
    Rayleigh { scale: f64 },
    /// Fixed power gain `|h|² = gain`.
    Deterministic { gain: f64 },
}

/// Channel-gain law used for the expected broadcast and upload delays.
///
/// Under Rayleigh fading `E[1/log(1 + c|h|²)]` diverges at deep fades, so
/// power gains are floored at `outage_floor·scale²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadingModel {
    pub distribution: FadingDistribution,
    pub num_draws: usize,
    pub rng_seed: u64,
    #[serde(default = "default_outage_floor")]
    pub outage_floor: f64,
}

fn default_outage_floor() -> f64 {
    0.01
}

impl FadingModel {
    pub fn deterministic(gain: f64) -> Self {
        Self {
            distribution: FadingDistribution::Deterministic { gain },
            num_draws: 1,
            rng_seed: 0,
            outage_floor: default_outage_floor(),
        }
    }

    pub fn rayleigh(scale: f64, num_draws: usize, rng_seed: u64) -> Self {
        Self {
            distribution: FadingDistribution::Rayleigh { scale },
            num_draws,
            rng_seed,
            outage_floor: default_outage_floor(),
        }
    }

    /// Rayleigh fading whose mean received SNR equals `snr`.
    pub fn rayleigh_for_mean_snr(
        snr: f64,
        tx_power: f64,
        noise_plus_interference: f64,
        num_draws: usize,
        rng_seed: u64,
    ) -> Self {
        let scale = (snr * noise_plus_interference / tx_power).sqrt();
        Self::rayleigh(scale, num_draws, rng_seed)
    }

    /// Same law, independent stream for one client.
    pub fn for_client(&self, client: usize) -> Self {
        let mut f = self.clone();
        f.rng_seed = crate::rng::derive_seed(self.rng_seed, &[0xFAD, client as u64]);
        f
    }

    fn validate(&self) -> Result<()> {
        if self.num_draws == 0 {
            return Err(Error::validation("fading model needs at least one draw"));
        }
        match self.distribution {
            FadingDistribution::Rayleigh { scale } if !(scale > 0.0) => {
                Err(Error::validation(format!("rayleigh scale must be positive, got {scale}")))
            }
            FadingDistribution::Deterministic { gain } if !(gain > 0.0) => {
                Err(Error::validation(format!("channel gain must be positive, got {gain}")))
            }
            _ => Ok(()),
        }
    }

    /// Monte-Carlo mean of `f(|h|²)`.
    fn expectation(&self, f: impl Fn(f64) -> f64) -> Result<f64> {
        self.validate()?;
        match self.distribution {
            FadingDistribution::Deterministic { gain } => Ok(f(gain)),
            FadingDistribution::Rayleigh { scale } => {
                let mean_power = scale * scale;
                let floor = self.outage_floor * mean_power;
                let mut rng = rng_for(self.rng_seed, &[0x5EED]);
                let mut acc = 0.0;
                for _ in 0..self.num_draws {
                    let x: f64 = Exp1.sample(&mut rng);
                    acc += f((x * mean_power).max(floor));
                }
                // Keep the stream usage explicit so prefixes stay comparable.
                let _ = rng.random::<u8>();
                Ok(acc / self.num_draws as f64)
            }
        }
    }
}

/// Expected time to broadcast `model_bits` over the downlink.
pub fn expected_download_delay(radio: &RadioParams, fading: &FadingModel, model_bits: f64) -> Result<f64> {
    if !(model_bits > 0.0) {
        return Err(Error::validation("model size must be positive"));
    }
    let denom = radio.downlink_noise_plus_interference();
    fading.expectation(|h2| {
        model_bits / shannon_rate(radio.downlink_bandwidth, radio.bs_power * h2 / denom)
    })
}

/// Expected upload time of `model_bits` on `subcarriers` uplink subcarriers.
pub fn expected_upload_delay(
    radio: &RadioParams,
    fading: &FadingModel,
    subcarriers: usize,
    model_bits: f64,
) -> Result<f64> {
    if subcarriers == 0 {
        return Err(Error::Allocation("client has no uplink subcarrier".into()));
    }
    if subcarriers > radio.num_subcarriers {
        return Err(Error::Allocation(format!(
            "{subcarriers} subcarriers assigned but only {} exist",
            radio.num_subcarriers
        )));
    }
    if !(model_bits > 0.0) {
        return Err(Error::validation("model size must be positive"));
    }
    let denom = radio.uplink_noise_plus_interference();
    fading.expectation(|h2| {
        let per_carrier = shannon_rate(radio.uplink_bandwidth, radio.ue_power * h2 / denom);
        model_bits / (subcarriers as f64 * per_carrier)
    })
}

pub fn upload_energy(ue_power: f64, upload_delay: f64) -> f64 {
    ue_power * upload_delay
}

/// Static equal split of `R` subcarriers: `⌊R/K⌋` each, remainder to the
/// lowest client ids.
pub fn equal_subcarrier_split(num_subcarriers: usize, num_clients: usize) -> Result<Vec<usize>> {
    if num_clients == 0 {
        return Err(Error::validation("no clients to allocate subcarriers to"));
    }
    if num_clients > num_subcarriers {
        return Err(Error::Allocation(format!(
            "{num_clients} clients need at least one of {num_subcarriers} subcarriers each"
        )));
    }
    let base = num_subcarriers / num_clients;
    let extra = num_subcarriers % num_clients;
    Ok((0..num_clients)
        .map(|k| base + usize::from(k < extra))
        .collect())
}

/// Local computation and energy parameters of a device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeParams {
    pub cycles_per_sample: f64,
    pub local_epochs: usize,
    pub frequency: f64,
    pub max_frequency: f64,
    /// Effective switched capacitance.
    pub energy_coeff: f64,
    pub energy_budget: f64,
    pub bits_per_sample: f64,
    pub model_size: f64,
}

impl ComputeParams {
    /// Reference device: 2.5e5 cycles/sample, 1.2 GHz cap, ς = 4e-26,
    /// 5 mJ per round and 28×28-byte samples.
    pub fn reference(model_size: f64) -> Self {
        Self {
            cycles_per_sample: 2.5e5,
            local_epochs: 1,
            frequency: 1.2e9,
            max_frequency: 1.2e9,
            energy_coeff: 4e-26,
            energy_budget: 0.005,
            bits_per_sample: 6272.0,
            model_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::validation("local_epochs must be at least 1"));
        }
        if !(self.frequency > 0.0) || self.frequency > self.max_frequency * (1.0 + 1e-12) {
            return Err(Error::validation(format!(
                "frequency {} outside (0, {}]",
                self.frequency, self.max_frequency
            )));
        }
        for (name, v) in [
            ("cycles_per_sample", self.cycles_per_sample),
            ("energy_coeff", self.energy_coeff),
            ("energy_budget", self.energy_budget),
            ("bits_per_sample", self.bits_per_sample),
            ("model_size", self.model_size),
        ] {
            if !(v > 0.0) {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn cycles_per_round(&self, samples: f64) -> f64 {
        self.cycles_per_sample * self.local_epochs as f64 * samples
    }
}

/// `L·E·ñ/f`.
pub fn computation_delay(c: &ComputeParams, samples: f64) -> f64 {
    c.cycles_per_round(samples) / c.frequency
}

/// `ς·L·E·ñ·f²`.
pub fn computation_energy(c: &ComputeParams, samples: f64) -> f64 {
    c.energy_coeff * c.cycles_per_round(samples) * c.frequency * c.frequency
}

/// One round lasts until the slowest broadcast lands, then until the slowest
/// compute-plus-upload path finishes; the two maxima may be different clients.
pub fn round_delay(downloads: &[f64], computes: &[f64], uploads: &[f64]) -> Result<f64> {
    if downloads.len() != computes.len() || computes.len() != uploads.len() {
        return Err(Error::Dimension {
            expected: downloads.len(),
            got: computes.len().max(uploads.len()),
        });
    }
    if downloads.is_empty() {
        return Err(Error::validation("round delay of zero clients"));
    }
    let down = downloads.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rest = computes
        .iter()
        .zip(uploads)
        .map(|(c, u)| c + u)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(down + rest)
}

pub fn round_energy(computation: f64, upload: f64) -> f64 {
    computation + upload
}
