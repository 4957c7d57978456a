//! Analytic synthetic flights with exactly consistent IMU readings.
//!
//! Each trajectory kind gives position, velocity and acceleration plus
//! Z-Y-X Euler angles and their rates in closed form. The IMU reports the
//! body angular rate and the specific force `Rᵀ(a − g)`; ground truth is
//! sampled on its own clock.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{GroundTruthPose, ImuSample, Timestamp};
use crate::eskf::{gravity, ImuNoise};
use crate::geometry::rot_to_quat;
use crate::toa_sim::period_ns;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic trajectory: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Hover,
    #[default]
    Circle,
    FigureEight,
    HoverThenDash,
}

impl TrajectoryKind {
    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::Hover => "hover",
            TrajectoryKind::Circle => "circle",
            TrajectoryKind::FigureEight => "figure_eight",
            TrajectoryKind::HoverThenDash => "hover_then_dash",
        }
    }
}

impl std::str::FromStr for TrajectoryKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hover" => Ok(Self::Hover),
            "circle" => Ok(Self::Circle),
            "figure_eight" => Ok(Self::FigureEight),
            "hover_then_dash" => Ok(Self::HoverThenDash),
            _ => Err(SynthError::InvalidSpec(format!("unknown trajectory kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: TrajectoryKind,
    pub duration_s: f64,
    /// Cruise speed in m/s (peak speed for the dash).
    pub speed: f64,
    /// Circle radius or figure-eight half-width, m.
    pub size: f64,
    /// Centre of the pattern, world frame.
    pub center: [f64; 3],
    pub imu_rate_hz: f64,
    pub gt_rate_hz: f64,
    /// Add white noise and bias random walk to the IMU readings.
    pub imu_noise: bool,
    pub noise: ImuNoise,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Circle,
            duration_s: 60.0,
            speed: 1.0,
            size: 3.0,
            center: [0.0, 0.0, 1.5],
            imu_rate_hz: 200.0,
            gt_rate_hz: 100.0,
            imu_noise: false,
            noise: ImuNoise::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub imu: Vec<ImuSample>,
    pub gt: Vec<GroundTruthPose>,
}

/// Closed-form state at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    /// Roll, pitch, yaw.
    pub euler: Vector3<f64>,
    pub euler_rate: Vector3<f64>,
}

impl Kinematics {
    /// `R = Rz(ψ)·Ry(θ)·Rx(φ)`, body to world.
    pub fn rotation(&self) -> Matrix3<f64> {
        let (sr, cr) = self.euler.x.sin_cos();
        let (sp, cp) = self.euler.y.sin_cos();
        let (sy, cy) = self.euler.z.sin_cos();
        Matrix3::new(
            cy * cp,
            cy * sp * sr - sy * cr,
            cy * sp * cr + sy * sr,
            sy * cp,
            sy * sp * sr + cy * cr,
            sy * sp * cr - cy * sr,
            -sp,
            cp * sr,
            cp * cr,
        )
    }

    pub fn body_rate(&self) -> Vector3<f64> {
        let (sr, cr) = self.euler.x.sin_cos();
        let (sp, cp) = self.euler.y.sin_cos();
        let d = self.euler_rate;
        Vector3::new(
            d.x - d.z * sp,
            d.y * cr + d.z * cp * sr,
            -d.y * sr + d.z * cp * cr,
        )
    }

    pub fn specific_force(&self) -> Vector3<f64> {
        self.rotation().transpose() * (self.a - gravity())
    }
}

fn validate(spec: &SyntheticSpec) -> Result<(), SynthError> {
    let positive = [
        ("duration_s", spec.duration_s),
        ("imu_rate_hz", spec.imu_rate_hz),
        ("gt_rate_hz", spec.gt_rate_hz),
    ];
    for (name, v) in positive {
        if !(v > 0.0 && v.is_finite()) {
            return Err(SynthError::InvalidSpec(format!("{name} must be positive")));
        }
    }
    if spec.kind != TrajectoryKind::Hover && !(spec.speed > 0.0 && spec.size > 0.0) {
        return Err(SynthError::InvalidSpec("speed and size must be positive".into()));
    }
    Ok(())
}

/// Position, velocity, acceleration and attitude at time `t` seconds.
pub fn kinematics(spec: &SyntheticSpec, t: f64) -> Kinematics {
    let c = Vector3::from(spec.center);
    let zero = Vector3::zeros();
    match spec.kind {
        TrajectoryKind::Hover => Kinematics {
            p: c,
            v: zero,
            a: zero,
            euler: zero,
            euler_rate: zero,
        },
        TrajectoryKind::Circle => {
            let r = spec.size;
            let w = spec.speed / r;
            let (s, co) = (w * t).sin_cos();
            Kinematics {
                p: c + r * Vector3::new(co, s, 0.0),
                v: r * w * Vector3::new(-s, co, 0.0),
                a: -r * w * w * Vector3::new(co, s, 0.0),
                euler: Vector3::new(0.0, 0.0, w * t + FRAC_PI_2),
                euler_rate: Vector3::new(0.0, 0.0, w),
            }
        }
        TrajectoryKind::FigureEight => {
            let a = spec.size;
            let w = spec.speed / a;
            let (s1, c1) = (w * t).sin_cos();
            let (s2, c2) = (2.0 * w * t).sin_cos();
            let dz = 0.3;
            let (att_r, att_p, att_y) = (0.08, 0.06, 0.4);
            Kinematics {
                p: c + Vector3::new(a * s1, 0.5 * a * s2, dz * s1),
                v: Vector3::new(a * w * c1, a * w * c2, dz * w * c1),
                a: Vector3::new(-a * w * w * s1, -2.0 * a * w * w * s2, -dz * w * w * s1),
                euler: Vector3::new(att_r * s2, att_p * c1, att_y * s1),
                euler_rate: Vector3::new(2.0 * w * att_r * c2, -w * att_p * s1, w * att_y * c1),
            }
        }
        TrajectoryKind::HoverThenDash => {
            let hover = spec.duration_s / 3.0;
            let dash = spec.duration_s - hover;
            let d = spec.speed * dash / 2.0;
            if t <= hover {
                return Kinematics {
                    p: c,
                    v: zero,
                    a: zero,
                    euler: zero,
                    euler_rate: zero,
                };
            }
            let tau = (t - hover).min(dash);
            let ph = 2.0 * PI * tau / dash;
            let x = d * (tau / dash - ph.sin() / (2.0 * PI));
            let vx = d / dash * (1.0 - ph.cos());
            let ax = d / dash * (2.0 * PI / dash) * ph.sin();
            Kinematics {
                p: c + Vector3::new(x, 0.0, 0.0),
                v: Vector3::new(vx, 0.0, 0.0),
                a: Vector3::new(ax, 0.0, 0.0),
                euler: zero,
                euler_rate: zero,
            }
        }
    }
}

fn ticks(duration_s: f64, rate_hz: f64) -> impl Iterator<Item = Timestamp> {
    let period = period_ns(rate_hz);
    let end = (duration_s * 1e9).round() as Timestamp;
    (0..=end / period).map(move |k| k * period)
}

/// IMU samples and ground truth over `[0, duration]`, both endpoints included
/// when they fall on a sample tick.
pub fn generate_synthetic_trajectory(spec: &SyntheticSpec) -> Result<SyntheticData, SynthError> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let imu_dt = period_ns(spec.imu_rate_hz) as f64 * 1e-9;
    let white_g = spec.noise.sigma_g / imu_dt.sqrt();
    let white_a = spec.noise.sigma_a / imu_dt.sqrt();
    let walk_g = spec.noise.sigma_wg * imu_dt.sqrt();
    let walk_a = spec.noise.sigma_wa * imu_dt.sqrt();
    let normal3 = |rng: &mut ChaCha8Rng| {
        Vector3::from_fn(|_, _| StandardNormal.sample(rng))
    };

    let mut bias_g = Vector3::zeros();
    let mut bias_a = Vector3::zeros();
    let mut imu = Vec::new();
    let mut biases = Vec::new();
    for t in ticks(spec.duration_s, spec.imu_rate_hz) {
        let k = kinematics(spec, t as f64 * 1e-9);
        let mut omega = k.body_rate();
        let mut accel = k.specific_force();
        if spec.imu_noise {
            omega += bias_g + white_g * normal3(&mut rng);
            accel += bias_a + white_a * normal3(&mut rng);
        }
        imu.push(ImuSample { t, omega, accel });
        biases.push((t, bias_g, bias_a));
        if spec.imu_noise {
            bias_g += walk_g * normal3(&mut rng);
            bias_a += walk_a * normal3(&mut rng);
        }
    }

    let gt = ticks(spec.duration_s, spec.gt_rate_hz)
        .map(|t| {
            let k = kinematics(spec, t as f64 * 1e-9);
            let i = biases.partition_point(|b| b.0 <= t).saturating_sub(1);
            GroundTruthPose {
                t,
                position: k.p,
                orientation: rot_to_quat(&k.rotation()),
                velocity: Some(k.v),
                bias_gyro: Some(biases[i].1),
                bias_accel: Some(biases[i].2),
            }
        })
        .collect();
    Ok(SyntheticData { imu, gt })
}
