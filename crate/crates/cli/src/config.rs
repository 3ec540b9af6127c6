//! Run configuration. Every field has a default, so `{}` is a valid config
//! and reproduces the reference deployment.

use std::path::{Path, PathBuf};

use fedshare_core::datagen::{SampleCounts, Scenario, SkewMode};
use fedshare_core::fedsim::{num_params, ModelKind, TrainConfig};
use fedshare_core::jfvo::SscaSchedule;
use fedshare_core::theory::ProbeConfig;
use fedshare_core::wireless::{
    db_to_linear, dbm_to_watts, ComputeParams, FadingModel, PathLossState, RadioParams, SidelinkChannel,
};
use fedshare_core::EmdWeighting;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub radio: RadioConfig,
    pub compute: ComputeConfig,
    pub channel: ChannelConfig,
    pub fading: FadingConfig,
    pub geometry: GeometryConfig,
    pub closeness: ClosenessConfig,
    pub thresholds: Thresholds,
    /// `target_accuracy` and `rng_seed` are overridden by the thresholds and
    /// the derived seeds.
    pub train: TrainConfig,
    pub ssca: SscaSchedule,
    pub calibration: CalibrationConfig,
    pub weighting: EmdWeighting,
    pub sweep: SweepConfig,
    pub theory: TheoryConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut scenario = Scenario::label_skew(10, 10, 500, 0.7, 0);
        scenario.class_radius = 3.15;
        scenario.test_fraction = 2.0;
        Self {
            scenario,
            radio: RadioConfig::default(),
            compute: ComputeConfig::default(),
            channel: ChannelConfig::default(),
            fading: FadingConfig::default(),
            geometry: GeometryConfig::default(),
            closeness: ClosenessConfig::default(),
            thresholds: Thresholds::default(),
            train: TrainConfig {
                learning_rate: 0.005,
                local_epochs: 1,
                batch_size: 20,
                max_rounds: 400,
                target_accuracy: 0.9,
                rng_seed: 0,
                model: ModelKind::Logistic,
                l2: 1e-3,
                stop_at_target: true,
            },
            ssca: SscaSchedule { starts: vec![0.0, 0.5, 1.0], ..SscaSchedule::default() },
            calibration: CalibrationConfig::default(),
            weighting: EmdWeighting::PreSharing,
            sweep: SweepConfig::default(),
            theory: TheoryConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            seed: 2024,
            workers: 0,
        }
    }
}

/// Powers in watts, densities and interference in dB/dBm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub noise_density_dbm_hz: f64,
    pub multicast_bandwidth: f64,
    pub downlink_bandwidth: f64,
    pub uplink_bandwidth: f64,
    pub num_subcarriers: usize,
    pub bs_power: f64,
    pub ue_power: f64,
    /// Interference relative to the noise power of each link; `null` is none.
    pub multicast_interference_db: Option<f64>,
    pub downlink_interference_db: Option<f64>,
    pub uplink_interference_db: Option<f64>,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            noise_density_dbm_hz: -174.0,
            multicast_bandwidth: 1e9,
            downlink_bandwidth: 20e6,
            uplink_bandwidth: 1e6,
            num_subcarriers: 10,
            bs_power: 1.0,
            ue_power: 0.01,
            multicast_interference_db: Some(3.0),
            downlink_interference_db: None,
            uplink_interference_db: None,
        }
    }
}

impl RadioConfig {
    pub fn params(&self) -> RadioParams {
        let n0 = dbm_to_watts(self.noise_density_dbm_hz);
        let rel = |db: Option<f64>, bw: f64| db.map_or(0.0, |d| db_to_linear(d) * n0 * bw);
        RadioParams {
            noise_density: n0,
            multicast_bandwidth: self.multicast_bandwidth,
            downlink_bandwidth: self.downlink_bandwidth,
            uplink_bandwidth: self.uplink_bandwidth,
            num_subcarriers: self.num_subcarriers,
            bs_power: self.bs_power,
            ue_power: self.ue_power,
            multicast_interference: rel(self.multicast_interference_db, self.multicast_bandwidth),
            downlink_interference: rel(self.downlink_interference_db, self.downlink_bandwidth),
            uplink_interference: rel(self.uplink_interference_db, self.uplink_bandwidth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComputeConfig {
    pub cycles_per_sample: f64,
    pub max_frequency: f64,
    pub energy_coeff: f64,
    pub bits_per_sample: f64,
    /// Bits per model parameter.
    pub bits_per_param: f64,
}

impl Default for ComputeConfig {
    fn default() -> Self {
        Self {
            cycles_per_sample: 2.5e5,
            max_frequency: 1.2e9,
            energy_coeff: 4e-26,
            bits_per_sample: 6272.0,
            bits_per_param: 32.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub carrier_hz: f64,
    /// Linear antenna array gains.
    pub tx_gain: f64,
    pub rx_gain: f64,
    /// Replaces the single free-space state when given.
    pub states: Option<Vec<PathLossState>>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { carrier_hz: 28e9, tx_gain: 10.0, rx_gain: 10.0, states: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FadingConfig {
    pub downlink_snr_db: f64,
    pub uplink_snr_db: f64,
    pub num_draws: usize,
    pub outage_floor: f64,
}

impl Default for FadingConfig {
    fn default() -> Self {
        Self { downlink_snr_db: 20.0, uplink_snr_db: 10.0, num_draws: 10_000, outage_floor: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Clients are dropped uniformly in a disc of this radius (m).
    pub cell_radius: f64,
    /// Fixed positions; overrides the random drop.
    pub positions: Option<Vec<[f64; 2]>>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { cell_radius: 1000.0, positions: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClosenessConfig {
    /// Symmetric, i.i.d. uniform on `[low, high]` off the diagonal, 1 on it.
    Uniform { low: f64, high: f64 },
    Matrix { values: Vec<Vec<f64>> },
    /// CSV file, one row per client, no header.
    File { path: PathBuf },
}

impl Default for ClosenessConfig {
    fn default() -> Self {
        ClosenessConfig::Uniform { low: 0.0, high: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub e_th: f64,
    /// Minimum sidelink rate in bit/s. `"inf"` disables sharing.
    #[serde(with = "float_or_inf")]
    pub v_th: f64,
    pub theta_th: f64,
    /// Per-round energy budget (J).
    pub gamma_th: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { e_th: 0.3, v_th: 1e6, theta_th: 0.9, gamma_th: 0.005 }
    }
}

mod float_or_inf {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(s) if matches!(s.to_ascii_lowercase().as_str(), "inf" | "infinity") => Ok(f64::INFINITY),
            Raw::Text(s) => Err(de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

/// Rounds-law calibration: runs on the main scenario family at several
/// shared fractions of every head's data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub fractions: Vec<f64>,
    pub seeds: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { fractions: vec![0.0, 0.125, 0.25, 0.5], seeds: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: usize,
    /// Shared fraction used on the cluster-count axis.
    pub cluster_alpha: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { seeds: 3, cluster_alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub probe: ProbeConfig,
    pub drift_seeds: usize,
    pub drift_rounds: usize,
    pub rate_seeds: usize,
    pub rate_rounds: usize,
    pub inflation: f64,
    /// Client counts for the bound-versus-K table, at fixed total data.
    pub trend_clients: Vec<usize>,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            drift_seeds: 10,
            drift_rounds: 5,
            rate_seeds: 5,
            rate_rounds: 20,
            inflation: 2.0,
            trend_clients: vec![2, 4, 5, 10],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.into(), source })?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.scenario.validate()?;
        self.radio.params().validate()?;
        self.compute_params(1.0).validate()?;
        self.train.validate()?;
        self.ssca.validate()?;
        let t = &self.thresholds;
        if !(0.0..=1.0).contains(&t.e_th) {
            return bad(format!("e_th {} outside [0, 1]", t.e_th));
        }
        if !(t.v_th >= 0.0) {
            return bad(format!("v_th {} must be non-negative", t.v_th));
        }
        if !(t.theta_th > 0.0 && t.theta_th <= 1.0) {
            return bad(format!("theta_th {} outside (0, 1]", t.theta_th));
        }
        if !(t.gamma_th > 0.0) || !t.gamma_th.is_finite() {
            return bad(format!("gamma_th {} must be positive", t.gamma_th));
        }
        if self.scenario.num_clients > self.radio.num_subcarriers {
            return bad(format!(
                "{} clients need at least one of {} uplink subcarriers each",
                self.scenario.num_clients, self.radio.num_subcarriers
            ));
        }
        let c = &self.calibration;
        if c.fractions.len() < 4 {
            return bad(format!("calibration needs at least 4 levels, got {}", c.fractions.len()));
        }
        if c.seeds < 3 {
            return bad(format!("calibration needs at least 3 seeds, got {}", c.seeds));
        }
        if c.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("calibration fractions must lie in [0, 1]".into());
        }
        if self.sweep.seeds == 0 || !(0.0..=1.0).contains(&self.sweep.cluster_alpha) {
            return bad("sweep needs at least one seed and cluster_alpha in [0, 1]".into());
        }
        if !(self.theory.inflation >= 1.0) {
            return bad(format!("theory inflation {} must be at least 1", self.theory.inflation));
        }
        if !(self.geometry.cell_radius > 0.0) {
            return bad("cell_radius must be positive".into());
        }
        if let Some(p) = &self.geometry.positions {
            if p.len() != self.scenario.num_clients {
                return bad(format!("{} positions for {} clients", p.len(), self.scenario.num_clients));
            }
        }
        match &self.closeness {
            ClosenessConfig::Uniform { low, high } => {
                if !(0.0 <= *low && low <= high && *high <= 1.0) {
                    return bad(format!("closeness range [{low}, {high}] not inside [0, 1]"));
                }
            }
            ClosenessConfig::Matrix { values } => {
                if values.len() != self.scenario.num_clients {
                    return bad(format!("closeness matrix has {} rows", values.len()));
                }
            }
            ClosenessConfig::File { path } => {
                if !path.is_file() {
                    return bad(format!("closeness file {} does not exist", path.display()));
                }
            }
        }
        if let SampleCounts::PerClient(_) = self.scenario.samples_per_client {
            log::debug!("per-client sample counts: theory checks will reject this scenario");
        }
        Ok(())
    }

    pub fn model_size_bits(&self) -> f64 {
        num_params(self.train.model, self.scenario.feature_dim, self.scenario.num_classes) as f64
            * self.compute.bits_per_param
    }

    pub fn compute_params(&self, model_size: f64) -> ComputeParams {
        ComputeParams {
            cycles_per_sample: self.compute.cycles_per_sample,
            local_epochs: self.train.local_epochs,
            frequency: self.compute.max_frequency,
            max_frequency: self.compute.max_frequency,
            energy_coeff: self.compute.energy_coeff,
            energy_budget: self.thresholds.gamma_th,
            bits_per_sample: self.compute.bits_per_sample,
            model_size,
        }
    }

    pub fn sidelink(&self) -> SidelinkChannel {
        SidelinkChannel {
            tx_power: self.radio.ue_power,
            tx_gain: self.channel.tx_gain,
            rx_gain: self.channel.rx_gain,
            states: self
                .channel
                .states
                .clone()
                .unwrap_or_else(|| vec![PathLossState::free_space(self.channel.carrier_hz)]),
        }
    }

    pub fn downlink_fading(&self, seed: u64) -> FadingModel {
        let radio = self.radio.params();
        let mut f = FadingModel::rayleigh_for_mean_snr(
            db_to_linear(self.fading.downlink_snr_db),
            radio.bs_power,
            radio.downlink_noise_plus_interference(),
            self.fading.num_draws,
            seed,
        );
        f.outage_floor = self.fading.outage_floor;
        f
    }

    pub fn uplink_fading(&self, seed: u64) -> FadingModel {
        let radio = self.radio.params();
        let mut f = FadingModel::rayleigh_for_mean_snr(
            db_to_linear(self.fading.uplink_snr_db),
            radio.ue_power,
            radio.uplink_noise_plus_interference(),
            self.fading.num_draws,
            seed,
        );
        f.outage_floor = self.fading.outage_floor;
        f
    }

    /// Training config with the accuracy target and seed filled in.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            target_accuracy: self.thresholds.theta_th,
            rng_seed: seed,
            ..self.train.clone()
        }
    }

    /// Single-class fraction of the scenario, when it has one.
    pub fn skew_fraction(&self) -> Option<f64> {
        match self.scenario.skew_mode {
            SkewMode::SingleClassFraction { fraction } => Some(fraction),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_the_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig::default();
        cfg.thresholds.v_th = f64::INFINITY;
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn reference_radio_matches_core() {
        let p = RadioConfig::default().params();
        let r = RadioParams::reference();
        assert!((p.noise_density - r.noise_density).abs() < 1e-30);
        assert!((p.multicast_interference - r.multicast_interference).abs() / r.multicast_interference < 1e-12);
        assert_eq!(p.num_subcarriers, r.num_subcarriers);
    }

    #[test]
    fn default_model_is_330_parameters() {
        assert_eq!(RunConfig::default().model_size_bits(), 330.0 * 32.0);
    }

    #[test]
    fn rejects_bad_thresholds_and_missing_files() {
        let mut cfg = RunConfig::default();
        cfg.thresholds.e_th = 1.5;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.closeness = ClosenessConfig::File { path: "/nonexistent/closeness.csv".into() };
        assert!(cfg.validate().unwrap_err().to_string().contains("does not exist"));
        let mut cfg = RunConfig::default();
        cfg.calibration.fractions = vec![0.0, 1.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"thresholds": {"eth": 0.2}}"#).is_err());
    }
}
