//! Simulate → estimate → evaluate pipeline behind the CLI subcommands.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Source};
use crate::dataset::{
    self, apply_extrinsic, format_groundtruth, format_imu, format_toa, format_trajectory,
    write_atomic, DatasetError, GroundTruthPose, ImuSample, Timestamp, ToaMeasurement,
    TrajectoryPoint, NANOS_PER_SEC,
};
use crate::eskf::{run_filter, EskfError, NavState};
use crate::geometry::{Pose, Quat};
use crate::metrics::{pair_trajectories, MetricsError, MetricsReport};
use crate::pgo::{run_sliding_window, PgoError};
use crate::synth::{generate_synthetic_trajectory, SynthError};
use crate::toa_sim::{simulate, Scenario, SimError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Synthetic(#[from] SynthError),
    #[error("{0}")]
    Data(String),
    #[error("evaluation failed: {0}")]
    Metrics(#[from] MetricsError),
    #[error("ESKF failed: {0}")]
    Eskf(#[from] EskfError),
    #[error("PGO failed: {0}")]
    Pgo(#[from] PgoError),
    #[error("worker pool: {0}")]
    Pool(String),
}

impl ExperimentError {
    /// 1 config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Synthetic(_) | Self::Pool(_) => 1,
            Self::Dataset(_) | Self::Simulation(_) | Self::Data(_) | Self::Metrics(_) => 2,
            Self::Eskf(_) | Self::Pgo(_) => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    Eskf,
    Pgo,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Self::Eskf => "eskf",
            Self::Pgo => "pgo",
        }
    }

    pub fn selected(cfg: &ExperimentConfig) -> Vec<Estimator> {
        let mut out = Vec::new();
        if cfg.estimator.runs_eskf() {
            out.push(Self::Eskf);
        }
        if cfg.estimator.runs_pgo() {
            out.push(Self::Pgo);
        }
        out
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// ToA noise draws use a seed stream separate from the IMU noise.
pub fn toa_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// IMU readings, ground truth and the starting point for the estimators.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub imu: Vec<ImuSample>,
    pub gt: Vec<GroundTruthPose>,
    pub t0: Timestamp,
    pub initial: NavState,
}

pub fn load_inputs(cfg: &ExperimentConfig, seed: u64) -> Result<Inputs, ExperimentError> {
    let (imu, mut gt) = match cfg.input.source {
        Source::Synthetic => {
            let mut spec = cfg.input.synthetic.clone();
            spec.seed = seed;
            let data = generate_synthetic_trajectory(&spec)?;
            (data.imu, data.gt)
        }
        Source::Euroc => {
            let imu_path = cfg.input.imu.as_ref().expect("validated");
            let gt_path = cfg.input.groundtruth.as_ref().expect("validated");
            (dataset::load_imu(imu_path)?, dataset::load_groundtruth(gt_path)?)
        }
    };
    if let Some(ext) = &cfg.input.extrinsic {
        let [w, x, y, z] = ext.rotation_wxyz;
        let q = Quat::from_wxyz(w, x, y, z).normalized();
        apply_extrinsic(&mut gt, &Pose::new(q.to_rot(), Vector3::from(ext.translation)));
    }
    let (t0, initial) = initial_state(&imu, &gt)?;
    Ok(Inputs { imu, gt, t0, initial })
}

/// Starts at the first IMU reading not earlier than the first ground-truth
/// pose, with the state of the nearest ground-truth pose.
pub fn initial_state(
    imu: &[ImuSample],
    gt: &[GroundTruthPose],
) -> Result<(Timestamp, NavState), ExperimentError> {
    let first_gt = gt
        .first()
        .ok_or_else(|| ExperimentError::Data("ground truth is empty".into()))?;
    let t0 = imu
        .iter()
        .find(|s| s.t >= first_gt.t)
        .ok_or_else(|| ExperimentError::Data("no IMU reading after the first ground-truth pose".into()))?
        .t;
    let i = gt.partition_point(|g| g.t <= t0).saturating_sub(1);
    let i = if i + 1 < gt.len() && gt[i + 1].t - t0 < t0 - gt[i].t {
        i + 1
    } else {
        i
    };
    let g = &gt[i];
    let velocity = g.velocity.unwrap_or_else(|| {
        let (a, b) = if i + 1 < gt.len() {
            (&gt[i], &gt[i + 1])
        } else if i > 0 {
            (&gt[i - 1], &gt[i])
        } else {
            return Vector3::zeros();
        };
        (b.position - a.position) / ((b.t - a.t) as f64 / NANOS_PER_SEC)
    });
    Ok((
        t0,
        NavState {
            q: g.orientation,
            bias_gyro: g.bias_gyro.unwrap_or_default(),
            v: velocity,
            bias_accel: g.bias_accel.unwrap_or_default(),
            p: g.position,
        },
    ))
}

/// Ranges to every configured station under `scenario`.
pub fn simulate_toa(
    cfg: &ExperimentConfig,
    gt: &[GroundTruthPose],
    scenario: Scenario,
    seed: u64,
) -> Result<Vec<ToaMeasurement>, ExperimentError> {
    let model = cfg.noise_model(scenario, toa_seed(seed));
    Ok(simulate(gt, &cfg.all_stations(), &model, cfg.toa.rate_hz)?.measurements)
}

/// Keeps ranges from stations `1..=n`.
pub fn restrict(toa: &[ToaMeasurement], n: usize) -> Vec<ToaMeasurement> {
    toa.iter().filter(|m| (m.bs_id as usize) <= n).copied().collect()
}

#[derive(Clone, Debug)]
pub struct EstimateResult {
    pub estimator: Estimator,
    pub trajectory: Vec<TrajectoryPoint>,
    pub report: MetricsReport,
    /// PGO batch LM log (`iter,cost,damping`).
    pub cost_log: Option<String>,
    /// ESKF covariance diagonal CSV.
    pub cov_diag: Option<String>,
}

/// Runs one estimator with the first `n_bs` stations and evaluates it.
pub fn estimate(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    toa: &[ToaMeasurement],
    scenario: Scenario,
    n_bs: usize,
    estimator: Estimator,
) -> Result<EstimateResult, ExperimentError> {
    let stations: Vec<_> = cfg.all_stations().into_iter().take(n_bs).collect();
    let toa = restrict(toa, n_bs);
    let model = cfg.noise_model(scenario, 0);
    let mut sigma = ExperimentConfig::range_sigma(&model);
    sigma.truncate(n_bs);
    let (trajectory, timing, cost_log, cov_diag) = match estimator {
        Estimator::Eskf => {
            let run = run_filter(
                &inputs.imu,
                &toa,
                &stations,
                inputs.initial,
                inputs.t0,
                &cfg.eskf_config(sigma),
            )?;
            let cov = cfg.eskf.write_covariance.then(|| covariance_csv(&run));
            (run.trajectory(), run.cycle_ms, None, cov)
        }
        Estimator::Pgo => {
            let run = run_sliding_window(
                &inputs.imu,
                &toa,
                &stations,
                &inputs.initial,
                inputs.t0,
                &cfg.pgo_config(sigma),
            )?;
            let log = run.batch_report.as_ref().map(|r| r.to_csv());
            (run.trajectory().to_vec(), run.step_ms, log, None)
        }
    };
    let pairs = pair_trajectories(&trajectory, &inputs.gt, cfg.max_gap_ns());
    let report = MetricsReport::evaluate(&pairs, cfg.run.rpe_step, &timing)?;
    Ok(EstimateResult {
        estimator,
        trajectory,
        report,
        cost_log,
        cov_diag,
    })
}

fn covariance_csv(run: &crate::eskf::FilterRun) -> String {
    let mut s = String::from("t_ns");
    for name in ["th", "bg", "v", "ba", "p"] {
        for axis in ["x", "y", "z"] {
            s.push_str(&format!(",{name}_{axis}"));
        }
    }
    s.push('\n');
    for o in &run.outputs {
        s.push_str(&o.t.to_string());
        for v in o.cov.diagonal().iter() {
            s.push_str(&format!(",{v:.9e}"));
        }
        s.push('\n');
    }
    s
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, ExperimentError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))
}

/// Creates parent directories and writes atomically.
pub fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    Ok(write_atomic(path, contents.as_bytes())?)
}

pub fn toa_file_name(scenario: Scenario, seed: u64) -> String {
    format!("toa_{}_seed{seed}.csv", scenario.name())
}

/// Writes one ToA file per configured seed.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let scenario = cfg.toa.scenario;
    let files = pool(cfg.run.workers)?.install(|| {
        cfg.run
            .seeds
            .par_iter()
            .map(|&seed| {
                let inputs = load_inputs(cfg, seed)?;
                let toa = simulate_toa(cfg, &inputs.gt, scenario, seed)?;
                let path = out.join(toa_file_name(scenario, seed));
                write_file(&path, &format_toa(&toa))?;
                Ok(path)
            })
            .collect::<Result<Vec<_>, ExperimentError>>()
    })?;
    Ok(files)
}

/// Writes IMU and ground-truth CSVs for the first seed.
pub fn cmd_gen_traj(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut spec = cfg.input.synthetic.clone();
    spec.seed = cfg.run.seeds[0];
    let data = generate_synthetic_trajectory(&spec)?;
    let imu = out.join("imu.csv");
    let gt = out.join("groundtruth.csv");
    write_file(&imu, &format_imu(&data.imu))?;
    write_file(&gt, &format_groundtruth(&data.gt))?;
    Ok(vec![imu, gt])
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub results: Vec<EstimateResult>,
    pub files: Vec<PathBuf>,
}

/// Runs the selected estimators on the first seed and writes trajectories
/// and metrics.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput, ExperimentError> {
    let seed = cfg.run.seeds[0];
    let inputs = load_inputs(cfg, seed)?;
    let toa = match &cfg.toa.file {
        Some(path) => dataset::load_toa(path, cfg.stations.positions.len())?,
        None => simulate_toa(cfg, &inputs.gt, cfg.toa.scenario, seed)?,
    };
    let estimators = Estimator::selected(cfg);
    let n = cfg.stations.count;
    let results = pool(cfg.run.workers)?.install(|| {
        estimators
            .par_iter()
            .map(|&e| estimate(cfg, &inputs, &toa, cfg.toa.scenario, n, e))
            .collect::<Result<Vec<_>, ExperimentError>>()
    })?;

    let mut files = Vec::new();
    let mut kv = String::new();
    let mut csv = format!("estimator,{}\n", MetricsReport::CSV_HEADER);
    for r in &results {
        let name = r.estimator.name();
        let path = out.join(format!("{name}_trajectory.csv"));
        write_file(&path, &format_trajectory(&r.trajectory))?;
        files.push(path);
        if let Some(log) = &r.cost_log {
            let path = out.join(format!("{name}_cost.csv"));
            write_file(&path, log)?;
            files.push(path);
        }
        if let Some(cov) = &r.cov_diag {
            let path = out.join(format!("{name}_covariance.csv"));
            write_file(&path, cov)?;
            files.push(path);
        }
        kv.push_str(&format!("[{name}]\n{}", r.report.to_key_values()));
        csv.push_str(&format!("{name},{}\n", r.report.csv_row()));
    }
    for (name, contents) in [("metrics.txt", kv), ("metrics.csv", csv)] {
        let path = out.join(name);
        write_file(&path, &contents)?;
        files.push(path);
    }
    Ok(RunOutput { results, files })
}

/// One estimator run inside a sweep.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub scenario: Scenario,
    pub estimator: Estimator,
    pub bs_count: usize,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Every (scenario, seed, station count, estimator) combination.
pub fn sweep_cases(cfg: &ExperimentConfig) -> Result<Vec<CaseResult>, ExperimentError> {
    let estimators = Estimator::selected(cfg);
    let mut jobs = Vec::new();
    for &scenario in &cfg.sweep.scenarios {
        for &seed in &cfg.sweep.seeds {
            for &n in &cfg.sweep.bs_counts {
                for &e in &estimators {
                    jobs.push((scenario, seed, n, e));
                }
            }
        }
    }
    pool(cfg.run.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(scenario, seed, n, estimator)| {
                let inputs = load_inputs(cfg, seed)?;
                let toa = simulate_toa(cfg, &inputs.gt, scenario, seed)?;
                let r = estimate(cfg, &inputs, &toa, scenario, n, estimator)?;
                Ok(CaseResult {
                    scenario,
                    estimator,
                    bs_count: n,
                    seed,
                    report: r.report,
                })
            })
            .collect()
    })
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median over seeds of every metric for one combination.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub scenario: Scenario,
    pub estimator: Estimator,
    pub bs_count: usize,
    pub report: MetricsReport,
    pub seeds: usize,
}

pub const SWEEP_HEADER: &str = "scenario,estimator,bs_count,ate_m,e_x_m,e_y_m,e_z_m,rpe_t_m,rpe_r_deg,time_mean_ms,time_std_ms,seeds";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.scenario.name(),
            self.estimator.name(),
            self.bs_count,
            self.report.csv_row(),
            self.seeds
        )
    }
}

/// Groups cases by (scenario, estimator, station count), in config order.
pub fn aggregate(cfg: &ExperimentConfig, cases: &[CaseResult]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &scenario in &cfg.sweep.scenarios {
        for estimator in Estimator::selected(cfg) {
            for &n in &cfg.sweep.bs_counts {
                let group: Vec<&MetricsReport> = cases
                    .iter()
                    .filter(|c| c.scenario == scenario && c.estimator == estimator && c.bs_count == n)
                    .map(|c| &c.report)
                    .collect();
                if group.is_empty() {
                    continue;
                }
                let med = |f: fn(&MetricsReport) -> f64| {
                    median(&mut group.iter().map(|r| f(r)).collect::<Vec<_>>())
                };
                rows.push(SweepRow {
                    scenario,
                    estimator,
                    bs_count: n,
                    report: MetricsReport {
                        ate: med(|r| r.ate),
                        e_x: med(|r| r.e_x),
                        e_y: med(|r| r.e_y),
                        e_z: med(|r| r.e_z),
                        rpe_t: med(|r| r.rpe_t),
                        rpe_r_deg: med(|r| r.rpe_r_deg),
                        time_mean_ms: med(|r| r.time_mean_ms),
                        time_std_ms: med(|r| r.time_std_ms),
                        pairs: group.iter().map(|r| r.pairs).sum(),
                        timing_samples: group.iter().map(|r| r.timing_samples).sum(),
                    },
                    seeds: group.len(),
                });
            }
        }
    }
    rows
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRow>, ExperimentError> {
    let cases = sweep_cases(cfg)?;
    let rows = aggregate(cfg, &cases);
    write_file(&out.join("sweep.csv"), &format_sweep(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EstimatorChoice;
    use crate::synth::TrajectoryKind;

    fn short(kind: TrajectoryKind, secs: f64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.input.synthetic.kind = kind;
        cfg.input.synthetic.duration_s = secs;
        cfg.run.record_timing = false;
        cfg
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn initial_state_from_nearest_pose() {
        let gt: Vec<GroundTruthPose> = (0..3)
            .map(|i| GroundTruthPose {
                t: 100 + 10 * i,
                position: Vector3::new(i as f64, 0.0, 0.0),
                orientation: Quat::identity(),
                velocity: None,
                bias_gyro: None,
                bias_accel: None,
            })
            .collect();
        let imu: Vec<ImuSample> = [95, 108, 113]
            .iter()
            .map(|&t| ImuSample {
                t,
                omega: Vector3::zeros(),
                accel: Vector3::zeros(),
            })
            .collect();
        let (t0, s) = initial_state(&imu, &gt).unwrap();
        assert_eq!(t0, 108);
        assert_eq!(s.p.x, 1.0);
        // 1 m per 10 ns
        assert_eq!(s.v.x, 1e8);
        assert!(initial_state(&imu, &[]).is_err());
    }

    #[test]
    fn restrict_keeps_first_stations() {
        let toa: Vec<ToaMeasurement> = (1..=5)
            .map(|id| ToaMeasurement {
                t: 0,
                bs_id: id,
                distance: 1.0,
            })
            .collect();
        assert_eq!(restrict(&toa, 3).len(), 3);
    }

    #[test]
    fn seed_streams_differ() {
        assert_ne!(toa_seed(0), 0);
        assert_ne!(toa_seed(1), toa_seed(2));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(ExperimentError::Config(ConfigError::Invalid("x".into())).exit_code(), 1);
        assert_eq!(ExperimentError::Data("x".into()).exit_code(), 2);
        assert_eq!(ExperimentError::Pgo(PgoError::EmptyInput).exit_code(), 3);
    }

    #[test]
    fn aggregate_takes_medians() {
        let mut cfg = short(TrajectoryKind::Circle, 1.0);
        cfg.estimator = EstimatorChoice::Eskf;
        cfg.sweep.scenarios = vec![Scenario::Mmmagic78ghz];
        cfg.sweep.bs_counts = vec![3];
        let cases: Vec<CaseResult> = [1.0, 5.0, 2.0]
            .iter()
            .enumerate()
            .map(|(i, &ate)| CaseResult {
                scenario: Scenario::Mmmagic78ghz,
                estimator: Estimator::Eskf,
                bs_count: 3,
                seed: i as u64,
                report: MetricsReport {
                    ate,
                    ..MetricsReport::default()
                },
            })
            .collect();
        let rows = aggregate(&cfg, &cases);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].report.ate, 2.0);
        assert_eq!(rows[0].seeds, 3);
        assert!(rows[0].csv_row().starts_with("mmmagic_78ghz,eskf,3,2.000000,"));
        assert_eq!(rows[0].csv_row().split(',').count(), SWEEP_HEADER.split(',').count());
    }

    #[test]
    fn noiseless_hover_estimates_are_exact() {
        let mut cfg = short(TrajectoryKind::Hover, 3.0);
        cfg.toa.scenario = Scenario::Noiseless;
        let inputs = load_inputs(&cfg, 0).unwrap();
        let toa = simulate_toa(&cfg, &inputs.gt, Scenario::Noiseless, 0).unwrap();
        for e in [Estimator::Eskf, Estimator::Pgo] {
            let r = estimate(&cfg, &inputs, &toa, Scenario::Noiseless, 5, e).unwrap();
            assert!(r.report.ate < 1e-6, "{e}: {}", r.report.ate);
        }
    }
}
