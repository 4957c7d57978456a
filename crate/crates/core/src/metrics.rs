//! Trajectory accuracy (ATE, per-axis RMSE, RPE) and timing statistics.

use thiserror::Error;

use crate::dataset::{associate_nearest, GroundTruthPose, Timestamp, TrajectoryPoint};
use crate::geometry::{log_so3, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no matched pose pairs")]
    EmptyPairs,
    #[error("need at least {needed} matched pairs, got {got}")]
    InsufficientPairs { needed: usize, got: usize },
    #[error("no timing samples")]
    EmptySamples,
}

/// An estimate matched to the temporally closest ground-truth pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosePair {
    pub t: Timestamp,
    pub est: Pose,
    pub gt: Pose,
}

/// Pairs every estimate with the nearest ground-truth pose within `max_gap`.
pub fn pair_trajectories(
    est: &[TrajectoryPoint],
    gt: &[GroundTruthPose],
    max_gap: Timestamp,
) -> Vec<PosePair> {
    let gt_t: Vec<Timestamp> = gt.iter().map(|g| g.t).collect();
    let est_t: Vec<Timestamp> = est.iter().map(|e| e.t).collect();
    associate_nearest(&gt_t, &est_t, max_gap)
        .into_iter()
        .map(|a| PosePair {
            t: est[a.query].t,
            est: est[a.query].pose(),
            gt: gt[a.reference].pose(),
        })
        .collect()
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    (sum / n as f64).sqrt()
}

/// RMSE of absolute position error, no alignment.
pub fn ate(pairs: &[PosePair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyPairs);
    }
    Ok(rms(pairs.iter().map(|p| (p.est.trans - p.gt.trans).norm())))
}

pub fn per_axis_rmse(pairs: &[PosePair]) -> Result<[f64; 3], MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyPairs);
    }
    Ok([0, 1, 2].map(|k| rms(pairs.iter().map(|p| p.est.trans[k] - p.gt.trans[k]))))
}

/// Relative pose error over index offset `step`: (translation m, rotation deg).
pub fn rpe(pairs: &[PosePair], step: usize) -> Result<(f64, f64), MetricsError> {
    let step = step.max(1);
    if pairs.len() < step + 1 {
        return Err(MetricsError::InsufficientPairs {
            needed: step + 1,
            got: pairs.len(),
        });
    }
    let errors: Vec<Pose> = pairs
        .windows(step + 1)
        .map(|w| {
            let (a, b) = (&w[0], &w[step]);
            let rel_gt = a.gt.inverse() * b.gt;
            let rel_est = a.est.inverse() * b.est;
            rel_gt.inverse() * rel_est
        })
        .collect();
    let t = rms(errors.iter().map(|e| e.trans.norm()));
    let r = rms(errors.iter().map(|e| log_so3(&e.rot).norm().to_degrees()));
    Ok((t, r))
}

/// Mean and population standard deviation.
pub fn timing_stats(samples: &[f64]) -> Result<(f64, f64), MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub ate: f64,
    pub e_x: f64,
    pub e_y: f64,
    pub e_z: f64,
    pub rpe_t: f64,
    pub rpe_r_deg: f64,
    /// Zero when no timing was recorded.
    pub time_mean_ms: f64,
    pub time_std_ms: f64,
    pub pairs: usize,
    pub timing_samples: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "ate_m,e_x_m,e_y_m,e_z_m,rpe_t_m,rpe_r_deg,time_mean_ms,time_std_ms";

    pub fn evaluate(pairs: &[PosePair], rpe_step: usize, timing_ms: &[f64]) -> Result<Self, MetricsError> {
        let ate = ate(pairs)?;
        let [e_x, e_y, e_z] = per_axis_rmse(pairs)?;
        let (rpe_t, rpe_r_deg) = rpe(pairs, rpe_step)?;
        let (time_mean_ms, time_std_ms) = if timing_ms.is_empty() {
            (0.0, 0.0)
        } else {
            timing_stats(timing_ms)?
        };
        Ok(Self {
            ate,
            e_x,
            e_y,
            e_z,
            rpe_t,
            rpe_r_deg,
            time_mean_ms,
            time_std_ms,
            pairs: pairs.len(),
            timing_samples: timing_ms.len(),
        })
    }

    fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("ate_m", self.ate),
            ("e_x_m", self.e_x),
            ("e_y_m", self.e_y),
            ("e_z_m", self.e_z),
            ("rpe_t_m", self.rpe_t),
            ("rpe_r_deg", self.rpe_r_deg),
            ("time_mean_ms", self.time_mean_ms),
            ("time_std_ms", self.time_std_ms),
        ]
    }

    /// Values in [`Self::CSV_HEADER`] order.
    pub fn csv_row(&self) -> String {
        self.fields()
            .iter()
            .map(|(_, v)| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.fields() {
            out.push_str(&format!("{k} = {v:.9}\n"));
        }
        out.push_str(&format!("pairs = {}\n", self.pairs));
        out.push_str(&format!("timing_samples = {}\n", self.timing_samples));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, Quat};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector3};
    use proptest::prelude::*;

    fn pair(est: Vector3<f64>, gt: Vector3<f64>) -> PosePair {
        PosePair {
            t: 0,
            est: Pose::new(Matrix3::identity(), est),
            gt: Pose::new(Matrix3::identity(), gt),
        }
    }

    fn random_pose(v: [f64; 6]) -> Pose {
        Pose::new(
            exp_so3(&Vector3::new(v[0], v[1], v[2])),
            Vector3::new(v[3], v[4], v[5]) * 5.0,
        )
    }

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        prop::array::uniform6(-1.0..1.0f64).prop_map(random_pose)
    }

    fn pairs_strategy(min: usize) -> impl Strategy<Value = Vec<PosePair>> {
        prop::collection::vec((pose_strategy(), pose_strategy()), min..30).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (est, gt))| PosePair { t: i as i64, est, gt })
                .collect()
        })
    }

    #[test]
    fn ate_examples() {
        let a = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(ate(&[pair(a, a)]).unwrap(), 0.0);
        let shifted = [pair(a + Vector3::x(), a), pair(Vector3::zeros() + Vector3::x(), Vector3::zeros())];
        assert_relative_eq!(ate(&shifted).unwrap(), 1.0, epsilon = 1e-15);
        let two = [
            pair(Vector3::new(3.0, 0.0, 0.0), Vector3::zeros()),
            pair(Vector3::new(0.0, 4.0, 0.0), Vector3::zeros()),
        ];
        assert_relative_eq!(ate(&two).unwrap(), 5.0 / 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(ate(&[]), Err(MetricsError::EmptyPairs));
    }

    #[test]
    fn per_axis_examples() {
        let a = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(per_axis_rmse(&[pair(a + Vector3::x(), a)]).unwrap(), [1.0, 0.0, 0.0]);
        assert_eq!(per_axis_rmse(&[]), Err(MetricsError::EmptyPairs));
    }

    #[test]
    fn rpe_hand_built() {
        // Ground truth moves 1 m along x per step; the estimate adds a 0.1 m
        // sideways slip and a 1° yaw to every relative step.
        let slip = Pose::new(exp_so3(&Vector3::new(0.0, 0.0, 1f64.to_radians())), Vector3::new(0.0, 0.1, 0.0));
        let step_gt = Pose::new(Matrix3::identity(), Vector3::x());
        let mut gt = Pose::identity();
        let mut est = Pose::identity();
        let mut pairs = Vec::new();
        for i in 0..6 {
            pairs.push(PosePair { t: i, est, gt });
            gt = gt * step_gt;
            est = est * step_gt * slip;
        }
        let (t, r) = rpe(&pairs, 1).unwrap();
        assert_relative_eq!(t, 0.1, epsilon = 1e-12);
        assert_relative_eq!(r, 1.0, epsilon = 1e-9);
        assert_eq!(
            rpe(&pairs[..1], 1),
            Err(MetricsError::InsufficientPairs { needed: 2, got: 1 })
        );
    }

    #[test]
    fn rpe_identical_is_zero() {
        let poses: Vec<PosePair> = (0..5)
            .map(|i| {
                let p = random_pose([0.1 * i as f64, 0.2, -0.3, i as f64, 0.5, 0.1]);
                PosePair { t: i, est: p, gt: p }
            })
            .collect();
        let (t, r) = rpe(&poses, 1).unwrap();
        assert!(t < 1e-12 && r < 1e-6);
    }

    #[test]
    fn timing_examples() {
        assert_eq!(timing_stats(&[2.0, 2.0, 2.0]).unwrap(), (2.0, 0.0));
        assert_eq!(timing_stats(&[1.0, 3.0]).unwrap(), (2.0, 1.0));
        assert_eq!(timing_stats(&[]), Err(MetricsError::EmptySamples));
    }

    #[test]
    fn pairing_uses_nearest_ground_truth() {
        let gt: Vec<GroundTruthPose> = (0..5)
            .map(|i| GroundTruthPose {
                t: i * 10,
                position: Vector3::new(i as f64, 0.0, 0.0),
                orientation: Quat::identity(),
                velocity: None,
                bias_gyro: None,
                bias_accel: None,
            })
            .collect();
        let est: Vec<TrajectoryPoint> = [4, 26, 100]
            .iter()
            .map(|&t| TrajectoryPoint {
                t,
                position: Vector3::zeros(),
                orientation: Quat::identity(),
                velocity: Vector3::zeros(),
            })
            .collect();
        let pairs = pair_trajectories(&est, &gt, 5);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].gt.trans.x, 0.0);
        assert_eq!(pairs[1].gt.trans.x, 3.0);
    }

    #[test]
    fn report_formats() {
        let a = Vector3::new(1.0, 2.0, 3.0);
        let pairs = [pair(a + Vector3::z(), a), pair(a + Vector3::z(), a)];
        let report = MetricsReport::evaluate(&pairs, 1, &[1.0, 3.0]).unwrap();
        assert_eq!(
            report.csv_row(),
            "1.000000,0.000000,0.000000,1.000000,0.000000,0.000000,2.000000,1.000000"
        );
        assert_eq!(report.csv_row().split(',').count(), MetricsReport::CSV_HEADER.split(',').count());
        let kv = report.to_key_values();
        assert!(kv.starts_with("ate_m = 1.000000000\n"));
        assert!(kv.ends_with("pairs = 2\ntiming_samples = 2\n"));
    }

    proptest! {
        #[test]
        fn ate_decomposes_into_axes(pairs in pairs_strategy(1)) {
            let a = ate(&pairs).unwrap();
            let [x, y, z] = per_axis_rmse(&pairs).unwrap();
            prop_assert!((a * a - (x * x + y * y + z * z)).abs() <= 1e-9 * a * a.max(1.0));
            prop_assert!(a + 1e-12 >= x.max(y).max(z));
        }

        #[test]
        fn per_axis_matches_direct_formula(pairs in pairs_strategy(1)) {
            let got = per_axis_rmse(&pairs).unwrap();
            for k in 0..3 {
                let mut s = 0.0;
                for p in &pairs {
                    s += (p.est.trans[k] - p.gt.trans[k]).powi(2);
                }
                let want = (s / pairs.len() as f64).sqrt();
                prop_assert!((got[k] - want).abs() <= 1e-12 * want.max(1.0));
            }
        }

        #[test]
        fn rpe_ignores_common_rigid_transform(pairs in pairs_strategy(2), g in pose_strategy()) {
            let moved: Vec<PosePair> = pairs
                .iter()
                .map(|p| PosePair { t: p.t, est: g * p.est, gt: g * p.gt })
                .collect();
            let (t0, r0) = rpe(&pairs, 1).unwrap();
            let (t1, r1) = rpe(&moved, 1).unwrap();
            prop_assert!((t0 - t1).abs() < 1e-9 * t0.max(1.0));
            prop_assert!((r0 - r1).abs() < 1e-6 * r0.max(1.0));
        }

        #[test]
        fn rpe_ignores_global_offset_of_estimate(pairs in pairs_strategy(2), g in pose_strategy()) {
            let offset: Vec<PosePair> = pairs
                .iter()
                .map(|p| PosePair { t: p.t, est: g * p.gt, gt: p.gt })
                .collect();
            let (t, r) = rpe(&offset, 1).unwrap();
            prop_assert!(t < 1e-9 && r < 1e-5);
        }

        #[test]
        fn ate_is_order_independent(mut pairs in pairs_strategy(1)) {
            let a = ate(&pairs).unwrap();
            pairs.reverse();
            prop_assert!((a - ate(&pairs).unwrap()).abs() < 1e-12 * a.max(1.0));
        }

        #[test]
        fn timing_matches_two_pass(samples in prop::collection::vec(0.0..100.0f64, 1..50)) {
            let (mean, std) = timing_stats(&samples).unwrap();
            let n = samples.len() as f64;
            let m: f64 = samples.iter().sum::<f64>() / n;
            let sq: f64 = samples.iter().map(|s| s * s).sum::<f64>() / n;
            prop_assert!((mean - m).abs() < 1e-9);
            prop_assert!((std - (sq - m * m).max(0.0).sqrt()).abs() < 1e-5);
            prop_assert!(std >= 0.0);
        }
    }
}
