//! Experiment configuration: one TOML file, every field defaulted.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DEFAULT_MAX_GAP_NS;
use crate::eskf::{EskfConfig, ImuNoise, InitialSigmas};
use crate::pgo::{LmOptions, PgoConfig};
use crate::synth::SyntheticSpec;
use crate::toa_sim::{
    stations_from_positions, BaseStation, NoiseModel, Scenario, Sequence, DEFAULT_RATE_HZ,
    REFERENCE_STATIONS,
};

/// Range sigma handed to the estimators never drops below this, so a
/// noiseless preset still yields a finite measurement weight.
pub const MIN_RANGE_SIGMA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Synthetic,
    Euroc,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    Eskf,
    Pgo,
    #[default]
    Both,
}

impl EstimatorChoice {
    pub fn runs_eskf(self) -> bool {
        matches!(self, Self::Eskf | Self::Both)
    }

    pub fn runs_pgo(self) -> bool {
        matches!(self, Self::Pgo | Self::Both)
    }
}

/// Rigid transform applied to ground truth before evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extrinsic {
    pub rotation_wxyz: [f64; 4],
    pub translation: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub source: Source,
    /// EuRoC IMU CSV (source = "euroc").
    pub imu: Option<PathBuf>,
    /// EuRoC ground-truth CSV (source = "euroc").
    pub groundtruth: Option<PathBuf>,
    pub extrinsic: Option<Extrinsic>,
    pub synthetic: SyntheticSpec,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            imu: None,
            groundtruth: None,
            extrinsic: None,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationConfig {
    /// World positions, ids assigned 1.. in order.
    pub positions: Vec<[f64; 3]>,
    /// Use the first `count` stations.
    pub count: usize,
}

impl Default for StationConfig {
    fn default() -> Self {
        Self {
            positions: REFERENCE_STATIONS.to_vec(),
            count: REFERENCE_STATIONS.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToaConfig {
    pub scenario: Scenario,
    pub sequence: Sequence,
    pub rate_hz: f64,
    /// Explicit per-station mean/std; overrides the preset when both are set.
    pub mean: Option<Vec<f64>>,
    pub std: Option<Vec<f64>>,
    /// Read ranges from this CSV instead of simulating them.
    pub file: Option<PathBuf>,
}

impl Default for ToaConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Mmmagic78ghz,
            sequence: Sequence::V101,
            rate_hz: DEFAULT_RATE_HZ,
            mean: None,
            std: None,
            file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EskfSection {
    pub emit_imu_rate: bool,
    /// Also write the covariance diagonal at every output.
    pub write_covariance: bool,
}

impl Default for EskfSection {
    fn default() -> Self {
        Self {
            emit_imu_rate: false,
            write_covariance: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgoSection {
    pub keyframe_rate_hz: f64,
    pub window: usize,
    pub station_sigma: f64,
    pub batch: bool,
    pub max_iters: usize,
}

impl Default for PgoSection {
    fn default() -> Self {
        let d = PgoConfig::default();
        Self {
            keyframe_rate_hz: d.keyframe_rate_hz,
            window: d.window,
            station_sigma: d.station_sigma,
            batch: d.batch,
            max_iters: d.lm.max_iters,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// 0 means one per available core.
    pub workers: usize,
    pub record_timing: bool,
    pub rpe_step: usize,
    pub max_gap_ms: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            workers: 0,
            record_timing: true,
            rpe_step: 1,
            max_gap_ms: DEFAULT_MAX_GAP_NS as f64 / 1e6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub scenarios: Vec<Scenario>,
    pub bs_counts: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            scenarios: Scenario::ALL_CHANNELS.to_vec(),
            bs_counts: vec![2, 3, 4, 5],
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub estimator: EstimatorChoice,
    pub input: InputConfig,
    pub stations: StationConfig,
    pub toa: ToaConfig,
    /// IMU noise densities assumed by both estimators.
    pub imu_noise: ImuNoise,
    pub initial: InitialSigmas,
    pub eskf: EskfSection,
    pub pgo: PgoSection,
    pub run: RunConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let k = self.stations.positions.len();
        if self.stations.count < 2 || self.stations.count > k {
            return bad(format!("stations.count = {} must lie in [2, {k}]", self.stations.count));
        }
        for &n in &self.sweep.bs_counts {
            if n < 2 || n > k {
                return bad(format!("sweep.bs_counts entry {n} must lie in [2, {k}]"));
            }
        }
        if self.input.source == Source::Euroc
            && (self.input.imu.is_none() || self.input.groundtruth.is_none())
        {
            return bad("input.source = \"euroc\" needs input.imu and input.groundtruth".into());
        }
        if !(self.toa.rate_hz > 0.0 && self.toa.rate_hz.is_finite()) {
            return bad(format!("toa.rate_hz = {} must be positive", self.toa.rate_hz));
        }
        match (&self.toa.mean, &self.toa.std) {
            (Some(m), Some(s)) if m.len() < k || s.len() < k => {
                return bad(format!("toa.mean/toa.std need {k} entries"));
            }
            (Some(_), None) | (None, Some(_)) => {
                return bad("toa.mean and toa.std must be given together".into());
            }
            _ => {}
        }
        if self.toa.std.iter().flatten().any(|s| *s < 0.0 || !s.is_finite()) {
            return bad("toa.std entries must be finite and non-negative".into());
        }
        if !(self.pgo.keyframe_rate_hz > 0.0) || self.pgo.window < 2 {
            return bad("pgo.keyframe_rate_hz must be positive and pgo.window ≥ 2".into());
        }
        if self.run.seeds.is_empty() || self.sweep.seeds.is_empty() {
            return bad("seed lists must not be empty".into());
        }
        if !(self.run.max_gap_ms >= 0.0) {
            return bad("run.max_gap_ms must be non-negative".into());
        }
        Ok(())
    }

    /// Every configured station (ids 1..=K).
    pub fn all_stations(&self) -> Vec<BaseStation> {
        stations_from_positions(&self.stations.positions)
    }

    pub fn active_stations(&self) -> Vec<BaseStation> {
        self.all_stations()
            .into_iter()
            .take(self.stations.count)
            .collect()
    }

    /// Noise model for all configured stations under `scenario`.
    pub fn noise_model(&self, scenario: Scenario, seed: u64) -> NoiseModel {
        let k = self.stations.positions.len();
        let mut model = match (&self.toa.mean, &self.toa.std) {
            (Some(mean), Some(std)) => NoiseModel {
                mean: mean.clone(),
                std: std.clone(),
                seed,
            },
            _ => NoiseModel::preset(scenario, self.toa.sequence, seed),
        };
        // Presets cover five stations; extra stations reuse the last entry.
        for v in [&mut model.mean, &mut model.std] {
            let last = v.last().copied().unwrap_or(0.0);
            v.resize(k.max(v.len()), last);
        }
        model
    }

    /// Estimator range sigmas: the model's stds, floored.
    pub fn range_sigma(model: &NoiseModel) -> Vec<f64> {
        model.std.iter().map(|s| s.max(MIN_RANGE_SIGMA)).collect()
    }

    pub fn eskf_config(&self, range_sigma: Vec<f64>) -> EskfConfig {
        EskfConfig {
            noise: self.imu_noise,
            initial: self.initial,
            range_sigma,
            emit_imu_rate: self.eskf.emit_imu_rate,
            record_timing: self.run.record_timing,
        }
    }

    pub fn pgo_config(&self, range_sigma: Vec<f64>) -> PgoConfig {
        PgoConfig {
            keyframe_rate_hz: self.pgo.keyframe_rate_hz,
            window: self.pgo.window,
            noise: self.imu_noise,
            initial: self.initial,
            range_sigma,
            station_sigma: self.pgo.station_sigma,
            lm: LmOptions {
                max_iters: self.pgo.max_iters,
                ..LmOptions::default()
            },
            record_timing: self.run.record_timing,
            batch: self.pgo.batch,
        }
    }

    pub fn max_gap_ns(&self) -> i64 {
        (self.run.max_gap_ms * 1e6).round() as i64
    }
}

/// Commented template whose values equal the built-in defaults.
pub const TEMPLATE: &str = r#"# toa-nav experiment configuration. Every key is optional; the values
# shown are the defaults.

# Which estimators to run: "eskf", "pgo" or "both".
estimator = "both"

[input]
# "synthetic" generates IMU and ground truth; "euroc" reads CSV files.
source = "synthetic"
# imu = "data/V1_01_easy/mav0/imu0/data.csv"
# groundtruth = "data/V1_01_easy/mav0/state_groundtruth_estimate0/data.csv"
# Optional ground-truth frame correction (applied as gt <- T * gt):
# extrinsic = { rotation_wxyz = [1.0, 0.0, 0.0, 0.0], translation = [0.0, 0.0, 0.0] }

[input.synthetic]
# hover | circle | figure_eight | hover_then_dash
kind = "circle"
duration_s = 60.0
speed = 1.0          # m/s (peak speed for the dash)
size = 3.0           # circle radius / figure-eight half-width, m
center = [0.0, 0.0, 1.5]
imu_rate_hz = 200.0
gt_rate_hz = 100.0
imu_noise = false    # add white noise and bias random walk
seed = 0             # replaced per run by the run seed

[input.synthetic.noise]
sigma_g = 0.00017
sigma_a = 0.002
sigma_wg = 0.000019
sigma_wa = 0.003

[stations]
# Base-station world positions (m); ids are 1.. in this order.
positions = [
    [-10.0, -7.0, 2.0],
    [7.0, 13.0, 3.0],
    [25.0, -35.0, 4.0],
    [-6.0, 9.0, 5.0],
    [-4.0, -14.0, 6.0],
]
# Use the first `count` stations.
count = 5

[toa]
# industrial_5ghz | indoor_28ghz | mmmagic_78ghz | noiseless
scenario = "mmmagic_78ghz"
# Sequence whose per-station statistics the preset uses: V101 .. V203.
sequence = "V101"
rate_hz = 5.0
# Explicit per-station statistics (override the preset):
# mean = [0.0, 0.0, 0.0, 0.0, 0.0]
# std = [0.2, 0.2, 0.2, 0.2, 0.2]
# Read ranges from a CSV instead of simulating them:
# file = "out/toa_mmmagic_78ghz_seed0.csv"

# IMU noise densities assumed by the estimators.
[imu_noise]
sigma_g = 0.00017    # rad/s/sqrt(Hz)
sigma_a = 0.002      # m/s^2/sqrt(Hz)
sigma_wg = 0.000019  # rad/s^2/sqrt(Hz)
sigma_wa = 0.003     # m/s^3/sqrt(Hz)

# Initial one-sigma uncertainties.
[initial]
attitude = 0.01      # rad
bias_gyro = 0.01     # rad/s
velocity = 0.1       # m/s
bias_accel = 0.01    # m/s^2
position = 0.1       # m

[eskf]
emit_imu_rate = false
write_covariance = false

[pgo]
keyframe_rate_hz = 10.0
window = 100         # keyframes in the sliding window
station_sigma = 0.001
batch = true         # final full-batch pass, used for evaluation
max_iters = 50

[run]
seeds = [0]          # `run` uses the first seed; `simulate` uses all
out_dir = "out"
workers = 0          # 0 = one per core
record_timing = true # wall-clock timing; disable for byte-identical output
rpe_step = 1
max_gap_ms = 10.0

[sweep]
scenarios = ["industrial_5ghz", "indoor_28ghz", "mmmagic_78ghz"]
bs_counts = [2, 3, 4, 5]
seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_parses_to_defaults() {
        assert_eq!(ExperimentConfig::from_toml(TEMPLATE).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("[run]\nseedz = [1]\n"),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn station_count_bounds() {
        for n in [1, 6] {
            let text = format!("[stations]\ncount = {n}\n");
            assert!(matches!(ExperimentConfig::from_toml(&text), Err(ConfigError::Invalid(_))));
        }
        let cfg = ExperimentConfig::from_toml("[stations]\ncount = 3\n").unwrap();
        assert_eq!(cfg.active_stations().len(), 3);
    }

    #[test]
    fn euroc_requires_paths() {
        assert!(matches!(
            ExperimentConfig::from_toml("[input]\nsource = \"euroc\"\n"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn range_sigma_is_floored() {
        let cfg = ExperimentConfig::default();
        let model = cfg.noise_model(Scenario::Noiseless, 0);
        assert_eq!(ExperimentConfig::range_sigma(&model), vec![MIN_RANGE_SIGMA; 5]);
        let model = cfg.noise_model(Scenario::Industrial5ghz, 0);
        assert_eq!(ExperimentConfig::range_sigma(&model)[0], 0.568);
    }

    #[test]
    fn explicit_noise_overrides_preset() {
        let cfg = ExperimentConfig::from_toml(
            "[toa]\nmean = [0.1, 0.1, 0.1, 0.1, 0.1]\nstd = [0.5, 0.5, 0.5, 0.5, 0.5]\n",
        )
        .unwrap();
        let model = cfg.noise_model(Scenario::Mmmagic78ghz, 4);
        assert_eq!(model.std, vec![0.5; 5]);
        assert_eq!(model.seed, 4);
    }

    #[test]
    fn missing_file_names_path() {
        let err = ExperimentConfig::load(std::path::Path::new("/nonexistent/cfg.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cfg.toml"));
    }
}
