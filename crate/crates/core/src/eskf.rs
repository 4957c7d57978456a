//! Error-state Kalman filter fusing IMU propagation with ToA range updates.
//!
//! The nominal state is integrated with RK4 from bias-corrected IMU
//! readings; the 15-dimensional error state `(δθ, δb_g, δv, δb_a, δp)` is
//! tracked through its covariance, propagated with the continuous Lyapunov
//! equation and corrected jointly by all ranges that share a timestamp.
//!
//! Attitude errors are body-frame: `R_true = R̂·Exp(δθ)`, i.e. the true
//! quaternion is `q̂ ⊗ δq` with Hamilton products. Earth rotation is ignored.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ImuSample, Timestamp, ToaMeasurement, TrajectoryPoint, NANOS_PER_SEC};
use crate::geometry::{quat_from_small_angle, skew, Quat};
use crate::toa_sim::BaseStation;

pub const STANDARD_GRAVITY: f64 = 9.81;

/// World-frame gravity, z up.
pub fn gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -STANDARD_GRAVITY)
}

/// Smallest accepted Cholesky pivot of the innovation covariance, relative to its largest diagonal entry.
const SINGULAR_PIVOT_RATIO: f64 = 1e-12;

/// Longest single integration step accepted by the propagators.
pub const MAX_DT: f64 = 0.1;

/// Offsets of each block inside the error state.
pub mod idx {
    pub const THETA: usize = 0;
    pub const BG: usize = 3;
    pub const V: usize = 6;
    pub const BA: usize = 9;
    pub const P: usize = 12;
}

pub type ErrorState = SVector<f64, 15>;
pub type Covariance = SMatrix<f64, 15, 15>;
pub type ProcessJacobian = SMatrix<f64, 15, 15>;
pub type NoiseJacobian = SMatrix<f64, 15, 12>;
pub type ImuCovariance = SMatrix<f64, 12, 12>;

#[derive(Debug, Error, PartialEq)]
pub enum EskfError {
    #[error("integration step {0} s outside (0, {MAX_DT}]")]
    InvalidDt(f64),
    #[error("position within 1e-6 m of base station {0}")]
    DegenerateGeometry(u32),
    #[error("innovation covariance is not positive definite")]
    SingularInnovation,
    #[error("measurement references unknown base station {0}")]
    UnknownStation(u32),
    #[error("measurement covariance is {got}x{got} but {expected} ranges were given")]
    CovarianceSize { expected: usize, got: usize },
}

/// Nominal navigation state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavState {
    /// Body-to-world attitude.
    pub q: Quat,
    pub bias_gyro: Vector3<f64>,
    /// World-frame velocity.
    pub v: Vector3<f64>,
    pub bias_accel: Vector3<f64>,
    /// World-frame position.
    pub p: Vector3<f64>,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            q: Quat::identity(),
            bias_gyro: Vector3::zeros(),
            v: Vector3::zeros(),
            bias_accel: Vector3::zeros(),
            p: Vector3::zeros(),
        }
    }
}

impl NavState {
    pub fn is_finite(&self) -> bool {
        [self.q.x, self.q.y, self.q.z, self.q.w]
            .iter()
            .chain(self.bias_gyro.iter())
            .chain(self.v.iter())
            .chain(self.bias_accel.iter())
            .chain(self.p.iter())
            .all(|x| x.is_finite())
    }

    /// `X ⊕ δX`: body-frame rotation increment, additive elsewhere.
    pub fn inject(&self, dx: &ErrorState) -> NavState {
        let dtheta = dx.fixed_rows::<3>(idx::THETA).into_owned();
        NavState {
            q: self.q * quat_from_small_angle(&dtheta),
            bias_gyro: self.bias_gyro + dx.fixed_rows::<3>(idx::BG),
            v: self.v + dx.fixed_rows::<3>(idx::V),
            bias_accel: self.bias_accel + dx.fixed_rows::<3>(idx::BA),
            p: self.p + dx.fixed_rows::<3>(idx::P),
        }
    }

    pub fn to_point(&self, t: Timestamp) -> TrajectoryPoint {
        TrajectoryPoint {
            t,
            position: self.p,
            orientation: self.q,
            velocity: self.v,
        }
    }
}

/// Continuous-time IMU noise densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoise {
    /// Gyro white noise, rad/s/√Hz.
    pub sigma_g: f64,
    /// Accelerometer white noise, m/s²/√Hz.
    pub sigma_a: f64,
    /// Gyro bias random walk, rad/s²/√Hz.
    pub sigma_wg: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub sigma_wa: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            sigma_g: 1.7e-4,
            sigma_a: 2.0e-3,
            sigma_wg: 1.9e-5,
            sigma_wa: 3.0e-3,
        }
    }
}

impl ImuNoise {
    pub fn zero() -> Self {
        Self {
            sigma_g: 0.0,
            sigma_a: 0.0,
            sigma_wg: 0.0,
            sigma_wa: 0.0,
        }
    }

    /// `Q^IMU` in noise order `(η_g, η_wg, η_a, η_wa)`.
    pub fn covariance(&self) -> ImuCovariance {
        let mut q = ImuCovariance::zeros();
        for (block, sigma) in [self.sigma_g, self.sigma_wg, self.sigma_a, self.sigma_wa]
            .into_iter()
            .enumerate()
        {
            for i in 0..3 {
                q[(3 * block + i, 3 * block + i)] = sigma * sigma;
            }
        }
        q
    }
}

/// Initial one-sigma uncertainties.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialSigmas {
    pub attitude: f64,
    pub bias_gyro: f64,
    pub velocity: f64,
    pub bias_accel: f64,
    pub position: f64,
}

impl Default for InitialSigmas {
    fn default() -> Self {
        Self {
            attitude: 0.01,
            bias_gyro: 0.01,
            velocity: 0.1,
            bias_accel: 0.01,
            position: 0.1,
        }
    }
}

impl InitialSigmas {
    pub fn covariance(&self) -> Covariance {
        let mut p = Covariance::zeros();
        for (start, s) in [
            (idx::THETA, self.attitude),
            (idx::BG, self.bias_gyro),
            (idx::V, self.velocity),
            (idx::BA, self.bias_accel),
            (idx::P, self.position),
        ] {
            for i in 0..3 {
                p[(start + i, start + i)] = s * s;
            }
        }
        p
    }
}

fn check_dt(dt: f64) -> Result<(), EskfError> {
    if dt > 0.0 && dt <= MAX_DT {
        Ok(())
    } else {
        Err(EskfError::InvalidDt(dt))
    }
}

/// `Ω(ω)` acting on scalar-last quaternion coordinates `(x, y, z, w)`.
fn omega_matrix(w: &Vector3<f64>) -> SMatrix<f64, 4, 4> {
    let s = skew(w);
    let mut m = SMatrix::<f64, 4, 4>::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-s));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(w);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-w.transpose()));
    m
}

#[derive(Clone, Copy)]
struct Kinematic {
    q: SVector<f64, 4>,
    v: Vector3<f64>,
    p: Vector3<f64>,
}

impl Kinematic {
    fn axpy(&self, h: f64, d: &Kinematic) -> Kinematic {
        Kinematic {
            q: self.q + d.q * h,
            v: self.v + d.v * h,
            p: self.p + d.p * h,
        }
    }
}

fn kinematic_rate(x: &Kinematic, omega: &Vector3<f64>, accel: &Vector3<f64>) -> Kinematic {
    let qn = x.q.normalize();
    let rot = Quat {
        x: qn[0],
        y: qn[1],
        z: qn[2],
        w: qn[3],
    };
    Kinematic {
        q: 0.5 * omega_matrix(omega) * x.q,
        v: rot.rotate(accel) + gravity(),
        p: x.v,
    }
}

/// RK4 step of the nominal kinematics with IMU readings interpolated
/// linearly from `start` to `end` across the step. Biases stay constant.
pub fn propagate_nominal_interp(
    state: &NavState,
    start: &ImuSample,
    end: &ImuSample,
    dt: f64,
) -> Result<NavState, EskfError> {
    check_dt(dt)?;
    let w0 = start.omega - state.bias_gyro;
    let w1 = end.omega - state.bias_gyro;
    let a0 = start.accel - state.bias_accel;
    let a1 = end.accel - state.bias_accel;
    let wm = 0.5 * (w0 + w1);
    let am = 0.5 * (a0 + a1);

    let x0 = Kinematic {
        q: SVector::<f64, 4>::new(state.q.x, state.q.y, state.q.z, state.q.w),
        v: state.v,
        p: state.p,
    };
    let k1 = kinematic_rate(&x0, &w0, &a0);
    let k2 = kinematic_rate(&x0.axpy(0.5 * dt, &k1), &wm, &am);
    let k3 = kinematic_rate(&x0.axpy(0.5 * dt, &k2), &wm, &am);
    let k4 = kinematic_rate(&x0.axpy(dt, &k3), &w1, &a1);
    let x1 = Kinematic {
        q: x0.q + (k1.q + 2.0 * k2.q + 2.0 * k3.q + k4.q) * (dt / 6.0),
        v: x0.v + (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v) * (dt / 6.0),
        p: x0.p + (k1.p + 2.0 * k2.p + 2.0 * k3.p + k4.p) * (dt / 6.0),
    };
    Ok(NavState {
        q: Quat::new(x1.q[0], x1.q[1], x1.q[2], x1.q[3]),
        v: x1.v,
        p: x1.p,
        ..*state
    })
}

/// RK4 step holding one IMU sample constant over `dt`.
pub fn propagate_nominal(
    state: &NavState,
    imu: &ImuSample,
    dt: f64,
) -> Result<NavState, EskfError> {
    propagate_nominal_interp(state, imu, imu, dt)
}

/// Continuous error-dynamics Jacobians `(F, G)` at the nominal state.
pub fn error_jacobians(state: &NavState, imu: &ImuSample) -> (ProcessJacobian, NoiseJacobian) {
    let w = imu.omega - state.bias_gyro;
    let a = imu.accel - state.bias_accel;
    let r = state.q.to_rot();
    let eye = Matrix3::identity();

    let mut f = ProcessJacobian::zeros();
    f.fixed_view_mut::<3, 3>(idx::THETA, idx::THETA)
        .copy_from(&(-skew(&w)));
    f.fixed_view_mut::<3, 3>(idx::THETA, idx::BG)
        .copy_from(&(-eye));
    f.fixed_view_mut::<3, 3>(idx::V, idx::THETA)
        .copy_from(&(-r * skew(&a)));
    f.fixed_view_mut::<3, 3>(idx::V, idx::BA).copy_from(&(-r));
    f.fixed_view_mut::<3, 3>(idx::P, idx::V).copy_from(&eye);

    let mut g = NoiseJacobian::zeros();
    g.fixed_view_mut::<3, 3>(idx::THETA, 0).copy_from(&(-eye));
    g.fixed_view_mut::<3, 3>(idx::BG, 3).copy_from(&eye);
    g.fixed_view_mut::<3, 3>(idx::V, 6).copy_from(&(-r));
    g.fixed_view_mut::<3, 3>(idx::BA, 9).copy_from(&eye);
    (f, g)
}

fn symmetrize(p: &Covariance) -> Covariance {
    0.5 * (p + p.transpose())
}

/// RK4 integration of `Ṗ = FP + PFᵀ + GQGᵀ` over `dt`, F and G held fixed.
pub fn propagate_covariance(
    p: &Covariance,
    f: &ProcessJacobian,
    g: &NoiseJacobian,
    q_imu: &ImuCovariance,
    dt: f64,
) -> Covariance {
    let gqg = g * q_imu * g.transpose();
    let rate = |p: &Covariance| f * p + p * f.transpose() + gqg;
    let k1 = rate(p);
    let k2 = rate(&(p + k1 * (0.5 * dt)));
    let k3 = rate(&(p + k2 * (0.5 * dt)));
    let k4 = rate(&(p + k3 * dt));
    symmetrize(&(p + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (dt / 6.0)))
}

fn station<'a>(stations: &'a [BaseStation], id: u32) -> Result<&'a BaseStation, EskfError> {
    stations
        .iter()
        .find(|b| b.id == id)
        .ok_or(EskfError::UnknownStation(id))
}

/// `H`: one row `[0₁ₓ₁₂, (p̂ − L_k)ᵀ/d_k]` per station, in the given order.
pub fn measurement_jacobian(
    state: &NavState,
    stations: &[&BaseStation],
) -> Result<DMatrix<f64>, EskfError> {
    let mut h = DMatrix::zeros(stations.len(), 15);
    for (row, bs) in stations.iter().enumerate() {
        let diff = state.p - bs.position;
        let d = diff.norm();
        if d < 1e-6 {
            return Err(EskfError::DegenerateGeometry(bs.id));
        }
        for i in 0..3 {
            h[(row, idx::P + i)] = diff[i] / d;
        }
    }
    Ok(h)
}

/// Joint Kalman update from a set of simultaneous ranges. `r_cov` is the
/// measurement covariance in the order of `meas`.
pub fn update(
    state: &NavState,
    p: &Covariance,
    meas: &[ToaMeasurement],
    stations: &[BaseStation],
    r_cov: &DMatrix<f64>,
) -> Result<(NavState, Covariance), EskfError> {
    if meas.is_empty() {
        return Ok((*state, *p));
    }
    if r_cov.nrows() != meas.len() || r_cov.ncols() != meas.len() {
        return Err(EskfError::CovarianceSize {
            expected: meas.len(),
            got: r_cov.nrows(),
        });
    }
    let used = meas
        .iter()
        .map(|m| station(stations, m.bs_id))
        .collect::<Result<Vec<_>, _>>()?;
    let h = measurement_jacobian(state, &used)?;
    let residual = DVector::from_iterator(
        meas.len(),
        meas.iter()
            .zip(&used)
            .map(|(m, bs)| m.distance - (state.p - bs.position).norm()),
    );
    let p_dyn = DMatrix::from_column_slice(15, 15, p.as_slice());
    let pht = &p_dyn * h.transpose();
    let s = &h * &pht + r_cov;
    let chol = s.clone().cholesky().ok_or(EskfError::SingularInnovation)?;
    let pivot_min = chol.l_dirty().diagonal().map(|x| x * x).min();
    if pivot_min <= SINGULAR_PIVOT_RATIO * s.diagonal().max() {
        return Err(EskfError::SingularInnovation);
    }
    // K = P Hᵀ S⁻¹, computed as (S⁻¹ H P)ᵀ
    let gain = chol.solve(&pht.transpose()).transpose();
    let dx = &gain * residual;
    let kh = &gain * &h;
    let i_kh = DMatrix::<f64>::identity(15, 15) - kh;
    let p_new = i_kh * p_dyn;
    let p_new = Covariance::from_column_slice(p_new.as_slice());
    let dx = ErrorState::from_column_slice(dx.as_slice());
    Ok((state.inject(&dx), symmetrize(&p_new)))
}

/// Estimator configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct EskfConfig {
    pub noise: ImuNoise,
    pub initial: InitialSigmas,
    /// One-sigma range noise per station, in station order.
    pub range_sigma: Vec<f64>,
    /// Emit the state after every IMU sample, not only after updates.
    pub emit_imu_rate: bool,
    /// Measure wall-clock time of each predict + update cycle.
    pub record_timing: bool,
}

impl Default for EskfConfig {
    fn default() -> Self {
        Self {
            noise: ImuNoise::default(),
            initial: InitialSigmas::default(),
            range_sigma: vec![0.2; 5],
            emit_imu_rate: false,
            record_timing: false,
        }
    }
}

/// Filter state machine: nominal state plus error covariance.
#[derive(Clone, Debug)]
pub struct Eskf {
    pub state: NavState,
    pub cov: Covariance,
    q_imu: ImuCovariance,
}

impl Eskf {
    pub fn new(state: NavState, cov: Covariance, noise: &ImuNoise) -> Self {
        Self {
            state,
            cov,
            q_imu: noise.covariance(),
        }
    }

    /// Propagates nominal state and covariance across `[start.t, end.t]`,
    /// splitting steps longer than [`MAX_DT`].
    pub fn predict(&mut self, start: &ImuSample, end: &ImuSample) -> Result<(), EskfError> {
        let total = (end.t - start.t) as f64 / NANOS_PER_SEC;
        if total <= 0.0 {
            return Err(EskfError::InvalidDt(total));
        }
        let steps = (total / MAX_DT).ceil().max(1.0) as usize;
        let dt = total / steps as f64;
        for k in 0..steps {
            let s0 = lerp_sample(start, end, k as f64 / steps as f64);
            let s1 = lerp_sample(start, end, (k + 1) as f64 / steps as f64);
            let (f, g) = error_jacobians(&self.state, &s0);
            self.state = propagate_nominal_interp(&self.state, &s0, &s1, dt)?;
            self.cov = propagate_covariance(&self.cov, &f, &g, &self.q_imu, dt);
        }
        Ok(())
    }

    pub fn correct(
        &mut self,
        meas: &[ToaMeasurement],
        stations: &[BaseStation],
        range_sigma: &[f64],
    ) -> Result<(), EskfError> {
        let mut r = DMatrix::zeros(meas.len(), meas.len());
        for (i, m) in meas.iter().enumerate() {
            let k = stations
                .iter()
                .position(|b| b.id == m.bs_id)
                .ok_or(EskfError::UnknownStation(m.bs_id))?;
            let sigma = range_sigma.get(k).copied().unwrap_or(1.0);
            r[(i, i)] = sigma * sigma;
        }
        let (state, cov) = update(&self.state, &self.cov, meas, stations, &r)?;
        self.state = state;
        self.cov = cov;
        Ok(())
    }
}

fn lerp_sample(a: &ImuSample, b: &ImuSample, s: f64) -> ImuSample {
    ImuSample {
        t: a.t + ((b.t - a.t) as f64 * s).round() as Timestamp,
        omega: a.omega + (b.omega - a.omega) * s,
        accel: a.accel + (b.accel - a.accel) * s,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutput {
    pub t: Timestamp,
    pub state: NavState,
    pub cov: Covariance,
}

#[derive(Clone, Debug, Default)]
pub struct FilterRun {
    pub outputs: Vec<FilterOutput>,
    /// Milliseconds per predict + update cycle (empty unless timing is on).
    pub cycle_ms: Vec<f64>,
    pub updates: usize,
}

impl FilterRun {
    pub fn trajectory(&self) -> Vec<TrajectoryPoint> {
        self.outputs.iter().map(|o| o.state.to_point(o.t)).collect()
    }
}

/// Runs the filter over time-sorted IMU and ToA streams, starting from
/// `initial` at time `t0`. Ranges are applied once the IMU clock reaches
/// their timestamp; all ranges sharing a timestamp form one update.
pub fn run_filter(
    imu: &[ImuSample],
    toa: &[ToaMeasurement],
    stations: &[BaseStation],
    initial: NavState,
    t0: Timestamp,
    config: &EskfConfig,
) -> Result<FilterRun, EskfError> {
    let mut filter = Eskf::new(initial, config.initial.covariance(), &config.noise);
    let mut run = FilterRun::default();
    let mut next_toa = toa.partition_point(|m| m.t < t0);
    let mut prev: Option<&ImuSample> = None;

    for sample in imu.iter().filter(|s| s.t >= t0) {
        let started = config.record_timing.then(Instant::now);
        if let Some(prev) = prev {
            filter.predict(prev, sample)?;
        }
        let mut updated = false;
        while next_toa < toa.len() && toa[next_toa].t <= sample.t {
            let tick = toa[next_toa].t;
            let end = next_toa + toa[next_toa..].partition_point(|m| m.t == tick);
            filter.correct(&toa[next_toa..end], stations, &config.range_sigma)?;
            next_toa = end;
            updated = true;
        }
        if updated {
            run.updates += 1;
            if let Some(started) = started {
                run.cycle_ms.push(started.elapsed().as_secs_f64() * 1e3);
            }
        }
        if updated || config.emit_imu_rate {
            run.outputs.push(FilterOutput {
                t: sample.t,
                state: filter.state,
                cov: filter.cov,
            });
        }
        prev = Some(sample);
    }
    Ok(run)
}
