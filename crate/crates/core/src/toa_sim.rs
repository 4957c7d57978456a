//! Parametric ToA range simulator.
//!
//! Each base station gets an independent Gaussian range error with a fixed
//! bias; the per-scenario presets carry the published per-station error
//! moments of the three indoor 5G channel scenarios.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{GroundTruthPose, Timestamp, ToaMeasurement, NANOS_PER_SEC};

/// Smallest distance ever emitted; noisier draws are clamped to this.
pub const MIN_DISTANCE: f64 = 1e-6;
pub const DEFAULT_RATE_HZ: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("ground-truth trajectory is empty")]
    EmptyTrajectory,
    #[error("rate must be positive, got {0}")]
    InvalidRate(f64),
    #[error("noise model covers {model} stations but {stations} were given")]
    ModelSizeMismatch { model: usize, stations: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseStation {
    /// 1-based id as written in ToA files.
    pub id: u32,
    pub position: Vector3<f64>,
}

/// The five station positions of the reference deployment, world frame.
pub const REFERENCE_STATIONS: [[f64; 3]; 5] = [
    [-10.0, -7.0, 2.0],
    [7.0, 13.0, 3.0],
    [25.0, -35.0, 4.0],
    [-6.0, 9.0, 5.0],
    [-4.0, -14.0, 6.0],
];

/// Stations with ids `1..=n` from a list of positions.
pub fn stations_from_positions(positions: &[[f64; 3]]) -> Vec<BaseStation> {
    positions
        .iter()
        .enumerate()
        .map(|(i, p)| BaseStation {
            id: i as u32 + 1,
            position: Vector3::new(p[0], p[1], p[2]),
        })
        .collect()
}

pub fn reference_stations() -> Vec<BaseStation> {
    stations_from_positions(&REFERENCE_STATIONS)
}

pub fn true_distance(p: &Vector3<f64>, bs: &BaseStation) -> f64 {
    (p - bs.position).norm()
}

/// Channel scenario used to pick range-error statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// 5 GHz industrial hall, 100 MHz bandwidth.
    #[serde(rename = "industrial_5ghz")]
    Industrial5ghz,
    /// 28 GHz indoor office, 200 MHz bandwidth.
    #[serde(rename = "indoor_28ghz")]
    Indoor28ghz,
    /// 78 GHz indoor, 400 MHz bandwidth.
    #[serde(rename = "mmmagic_78ghz")]
    Mmmagic78ghz,
    /// Zero bias and zero spread.
    Noiseless,
}

impl Scenario {
    pub const ALL_CHANNELS: [Scenario; 3] = [
        Scenario::Industrial5ghz,
        Scenario::Indoor28ghz,
        Scenario::Mmmagic78ghz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Industrial5ghz => "industrial_5ghz",
            Scenario::Indoor28ghz => "indoor_28ghz",
            Scenario::Mmmagic78ghz => "mmmagic_78ghz",
            Scenario::Noiseless => "noiseless",
        }
    }

    pub fn bandwidth_mhz(self) -> Option<f64> {
        match self {
            Scenario::Industrial5ghz => Some(100.0),
            Scenario::Indoor28ghz => Some(200.0),
            Scenario::Mmmagic78ghz => Some(400.0),
            Scenario::Noiseless => None,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Scenario::Noiseless]
            .into_iter()
            .chain(Scenario::ALL_CHANNELS)
            .find(|sc| sc.name() == s)
            .ok_or_else(|| format!("unknown scenario {s:?}"))
    }
}

/// Flight sequence whose published error statistics a preset reproduces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sequence {
    #[default]
    V101,
    V102,
    V103,
    V201,
    V202,
    V203,
}

impl Sequence {
    fn row(self) -> usize {
        self as usize
    }
}

/// Per-station (mean, std) in meters, indexed `[sequence][channel][bs]`,
/// channel order industrial, indoor, mmMAGIC.
#[rustfmt::skip]
const ERROR_TABLE: [[[(f64, f64); 5]; 3]; 6] = [
    // V101
    [
        [(0.129, 0.568), (-0.045, 0.81), (0.006, 0.763), (-0.081, 0.872), (-0.023, 0.718)],
        [(-0.024, 0.344), (-0.021, 0.368), (-0.059, 0.352), (0.041, 0.394), (-0.06, 0.369)],
        [(0.002, 0.185), (0.01, 0.171), (-0.008, 0.173), (0.003, 0.159), (-0.01, 0.176)],
    ],
    // V102
    [
        [(0.16, 0.645), (-0.033, 0.874), (-0.135, 0.722), (-0.129, 0.739), (-0.156, 0.677)],
        [(-0.104, 0.358), (0.104, 0.39), (0.106, 0.404), (-0.122, 0.367), (-0.052, 0.322)],
        [(0.037, 0.174), (-0.011, 0.153), (-0.018, 0.154), (0.016, 0.16), (-0.046, 0.193)],
    ],
    // V103
    [
        [(0.043, 0.775), (-0.065, 0.784), (1.232, 1.628), (-0.066, 0.772), (-0.387, 1.275)],
        [(-0.042, 0.353), (0.053, 0.382), (0.008, 0.387), (-0.033, 0.36), (-0.022, 0.369)],
        [(0.001, 0.176), (-0.011, 0.166), (0.012, 0.17), (0.0, 0.18), (-0.013, 0.183)],
    ],
    // V201
    [
        [(0.059, 0.751), (0.108, 0.897), (-0.182, 0.592), (-0.154, 0.986), (-0.27, 0.79)],
        [(0.025, 0.364), (-0.07, 0.379), (-0.045, 0.392), (0.054, 0.302), (0.12, 0.367)],
        [(-0.012, 0.164), (0.026, 0.177), (0.015, 0.163), (-0.019, 0.18), (0.015, 0.192)],
    ],
    // V202
    [
        [(0.027, 0.716), (0.141, 0.674), (0.072, 0.908), (0.082, 0.933), (-0.204, 0.631)],
        [(0.052, 0.391), (-0.053, 0.348), (-0.039, 0.427), (0.012, 0.359), (0.043, 0.351)],
        [(-0.007, 0.178), (0.007, 0.168), (-0.018, 0.17), (0.013, 0.19), (0.011, 0.192)],
    ],
    // V203
    [
        [(0.067, 0.754), (-0.017, 0.73), (0.273, 1.343), (-0.13, 0.724), (-0.045, 0.684)],
        [(0.009, 0.376), (-0.022, 0.351), (-0.046, 0.317), (0.043, 0.37), (0.02, 0.358)],
        [(0.018, 0.17), (0.017, 0.181), (0.002, 0.174), (0.004, 0.178), (-0.009, 0.174)],
    ],
];

/// Per-station biased Gaussian range error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub seed: u64,
}

impl NoiseModel {
    pub fn noiseless(num_bs: usize, seed: u64) -> Self {
        Self {
            mean: vec![0.0; num_bs],
            std: vec![0.0; num_bs],
            seed,
        }
    }

    /// Statistics of `scenario` for the five reference stations.
    pub fn preset(scenario: Scenario, sequence: Sequence, seed: u64) -> Self {
        let channel = match scenario {
            Scenario::Industrial5ghz => 0,
            Scenario::Indoor28ghz => 1,
            Scenario::Mmmagic78ghz => 2,
            Scenario::Noiseless => return Self::noiseless(REFERENCE_STATIONS.len(), seed),
        };
        let row = &ERROR_TABLE[sequence.row()][channel];
        Self {
            mean: row.iter().map(|(m, _)| *m).collect(),
            std: row.iter().map(|(_, s)| *s).collect(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.std.len()
    }

    pub fn is_empty(&self) -> bool {
        self.std.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub measurements: Vec<ToaMeasurement>,
    /// Draws that fell below [`MIN_DISTANCE`] and were clamped.
    pub clamped: usize,
}

/// Linearly interpolated ground-truth position at `t` (clamped to the ends).
pub fn interpolate_position(gt: &[GroundTruthPose], t: Timestamp) -> Vector3<f64> {
    let idx = gt.partition_point(|g| g.t <= t);
    if idx == 0 {
        return gt[0].position;
    }
    if idx == gt.len() {
        return gt[gt.len() - 1].position;
    }
    let (a, b) = (&gt[idx - 1], &gt[idx]);
    let s = (t - a.t) as f64 / (b.t - a.t) as f64;
    a.position + (b.position - a.position) * s
}

/// Tick period in nanoseconds for a measurement rate.
pub fn period_ns(rate_hz: f64) -> Timestamp {
    (NANOS_PER_SEC / rate_hz).round() as Timestamp
}

/// Emits one range per station at every tick from the first ground-truth
/// timestamp to the last: `‖p(t) − L_k‖ + mean_k + std_k·n`.
pub fn simulate(
    gt: &[GroundTruthPose],
    stations: &[BaseStation],
    model: &NoiseModel,
    rate_hz: f64,
) -> Result<Simulation, SimError> {
    if gt.is_empty() {
        return Err(SimError::EmptyTrajectory);
    }
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(SimError::InvalidRate(rate_hz));
    }
    if model.len() < stations.len() || model.mean.len() != model.std.len() {
        return Err(SimError::ModelSizeMismatch {
            model: model.len(),
            stations: stations.len(),
        });
    }
    let period = period_ns(rate_hz);
    let (start, end) = (gt[0].t, gt[gt.len() - 1].t);
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let ticks = ((end - start) / period + 1) as usize;
    let mut measurements = Vec::with_capacity(ticks * stations.len());
    let mut clamped = 0;
    for k in 0..ticks {
        let t = start + k as Timestamp * period;
        let p = interpolate_position(gt, t);
        for (i, bs) in stations.iter().enumerate() {
            let n: f64 = StandardNormal.sample(&mut rng);
            let mut d = true_distance(&p, bs) + model.mean[i] + model.std[i] * n;
            if d < MIN_DISTANCE {
                d = MIN_DISTANCE;
                clamped += 1;
            }
            measurements.push(ToaMeasurement {
                t,
                bs_id: bs.id,
                distance: d,
            });
        }
    }
    Ok(Simulation {
        measurements,
        clamped,
    })
}
