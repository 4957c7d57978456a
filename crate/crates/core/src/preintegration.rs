//! IMU preintegration between keyframes and the residuals built on it.
//!
//! Increments use the convention `ΔR̄ = ΔR·Exp(δφ)`, `Δv̄ = Δv + δv`,
//! `Δp̄ = Δp + δp`, with covariance blocks ordered `(R, p, v)`. State
//! perturbations are `R ← R·Exp(δθ)`, `p ← p + δp`, `v ← v + δv`.
//!
//! Small bias changes are folded in to first order; past
//! [`REINTEGRATION_THRESHOLD`] the owner re-integrates from raw readings.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

use crate::eskf::{ImuNoise, NavState, MAX_DT};
use crate::geometry::{exp_so3, log_so3, right_jacobian, right_jacobian_inv, skew};

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Vector9 = SVector<f64, 9>;
pub type Vector6 = SVector<f64, 6>;

/// Bias drift beyond which increments are recomputed.
pub const REINTEGRATION_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum PreintegrationError {
    #[error("integration step {0} s outside (0, {MAX_DT}]")]
    InvalidDt(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImuBias {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuBias {
    pub fn of(state: &NavState) -> Self {
        Self {
            gyro: state.bias_gyro,
            accel: state.bias_accel,
        }
    }

    pub fn max_abs_diff(&self, other: &ImuBias) -> f64 {
        (self.gyro - other.gyro)
            .abs()
            .max()
            .max((self.accel - other.accel).abs().max())
    }
}

/// One raw IMU reading held over `dt` seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuStep {
    pub omega: Vector3<f64>,
    pub accel: Vector3<f64>,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreintegratedImu {
    pub dr: Matrix3<f64>,
    pub dv: Vector3<f64>,
    pub dp: Vector3<f64>,
    pub dt_total: f64,
    /// Covariance of `(δφ, δp, δv)`.
    pub cov: Matrix9,
    pub bias_lin: ImuBias,
    pub count: usize,
    /// First-order sensitivities of the increments to the biases.
    pub jac: BiasJacobians,
    noise: ImuNoise,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasJacobians {
    pub rot_gyro: Matrix3<f64>,
    pub vel_gyro: Matrix3<f64>,
    pub vel_accel: Matrix3<f64>,
    pub pos_gyro: Matrix3<f64>,
    pub pos_accel: Matrix3<f64>,
}

impl Default for BiasJacobians {
    fn default() -> Self {
        Self {
            rot_gyro: Matrix3::zeros(),
            vel_gyro: Matrix3::zeros(),
            vel_accel: Matrix3::zeros(),
            pos_gyro: Matrix3::zeros(),
            pos_accel: Matrix3::zeros(),
        }
    }
}

/// Increments evaluated at a given bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Increments {
    pub dr: Matrix3<f64>,
    pub dv: Vector3<f64>,
    pub dp: Vector3<f64>,
    /// `Jr(J_Rg·δb_g)`, needed by the rotation residual's bias Jacobian.
    pub rot_jr: Matrix3<f64>,
}

impl PreintegratedImu {
    pub fn new(bias_lin: ImuBias, noise: ImuNoise) -> Self {
        Self {
            dr: Matrix3::identity(),
            dv: Vector3::zeros(),
            dp: Vector3::zeros(),
            dt_total: 0.0,
            cov: Matrix9::zeros(),
            bias_lin,
            count: 0,
            jac: BiasJacobians::default(),
            noise,
        }
    }

    /// Increments corrected to `bias` to first order.
    pub fn corrected(&self, bias: &ImuBias) -> Increments {
        let dbg = bias.gyro - self.bias_lin.gyro;
        let dba = bias.accel - self.bias_lin.accel;
        let phi = self.jac.rot_gyro * dbg;
        Increments {
            dr: self.dr * exp_so3(&phi),
            dv: self.dv + self.jac.vel_gyro * dbg + self.jac.vel_accel * dba,
            dp: self.dp + self.jac.pos_gyro * dbg + self.jac.pos_accel * dba,
            rot_jr: right_jacobian(&phi),
        }
    }

    pub fn noise(&self) -> &ImuNoise {
        &self.noise
    }

    /// Absorbs one sample with forward-Euler integration.
    pub fn integrate(
        &mut self,
        omega: &Vector3<f64>,
        accel: &Vector3<f64>,
        dt: f64,
    ) -> Result<(), PreintegrationError> {
        if !(dt > 0.0 && dt <= MAX_DT) {
            return Err(PreintegrationError::InvalidDt(dt));
        }
        let w = omega - self.bias_lin.gyro;
        let a = accel - self.bias_lin.accel;
        let phi = w * dt;
        let inc = exp_so3(&phi);
        let r_prev = self.dr;
        let ra_skew = r_prev * skew(&a);

        let mut lin = Matrix9::identity();
        lin.fixed_view_mut::<3, 3>(0, 0).copy_from(&inc.transpose());
        lin.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-0.5 * dt * dt * ra_skew));
        lin.fixed_view_mut::<3, 3>(3, 6)
            .copy_from(&(Matrix3::identity() * dt));
        lin.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-dt * ra_skew));

        let mut noise_map = SMatrix::<f64, 9, 6>::zeros();
        noise_map
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(right_jacobian(&phi) * dt));
        noise_map
            .fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(0.5 * dt * dt * r_prev));
        noise_map.fixed_view_mut::<3, 3>(6, 3).copy_from(&(dt * r_prev));
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        for i in 0..3 {
            q[(i, i)] = self.noise.sigma_g.powi(2) / dt;
            q[(3 + i, 3 + i)] = self.noise.sigma_a.powi(2) / dt;
        }
        let cov = lin * self.cov * lin.transpose() + noise_map * q * noise_map.transpose();
        self.cov = 0.5 * (cov + cov.transpose());

        let j = &mut self.jac;
        let rot_term = ra_skew * j.rot_gyro;
        j.pos_accel += j.vel_accel * dt - 0.5 * dt * dt * r_prev;
        j.pos_gyro += j.vel_gyro * dt - 0.5 * dt * dt * rot_term;
        j.vel_accel -= dt * r_prev;
        j.vel_gyro -= dt * rot_term;
        j.rot_gyro = inc.transpose() * j.rot_gyro - right_jacobian(&phi) * dt;

        self.dp += self.dv * dt + 0.5 * r_prev * a * dt * dt;
        self.dv += r_prev * a * dt;
        self.dr = r_prev * inc;
        self.dt_total += dt;
        self.count += 1;
        Ok(())
    }

    /// Increments of `self` followed by `next` (same linearization point).
    pub fn compose(&self, next: &PreintegratedImu) -> PreintegratedImu {
        let r1 = self.dr;
        let mut lin = Matrix9::identity();
        lin.fixed_view_mut::<3, 3>(0, 0).copy_from(&next.dr.transpose());
        lin.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-r1 * skew(&next.dp)));
        lin.fixed_view_mut::<3, 3>(3, 6)
            .copy_from(&(Matrix3::identity() * next.dt_total));
        lin.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-r1 * skew(&next.dv)));
        let mut rot = Matrix9::identity();
        rot.fixed_view_mut::<3, 3>(3, 3).copy_from(&r1);
        rot.fixed_view_mut::<3, 3>(6, 6).copy_from(&r1);
        let cov = lin * self.cov * lin.transpose() + rot * next.cov * rot.transpose();

        PreintegratedImu {
            dr: r1 * next.dr,
            dv: self.dv + r1 * next.dv,
            dp: self.dp + self.dv * next.dt_total + r1 * next.dp,
            dt_total: self.dt_total + next.dt_total,
            cov: 0.5 * (cov + cov.transpose()),
            bias_lin: self.bias_lin,
            count: self.count + next.count,
            jac: BiasJacobians {
                rot_gyro: next.dr.transpose() * self.jac.rot_gyro + next.jac.rot_gyro,
                vel_gyro: self.jac.vel_gyro - r1 * skew(&next.dv) * self.jac.rot_gyro
                    + r1 * next.jac.vel_gyro,
                vel_accel: self.jac.vel_accel + r1 * next.jac.vel_accel,
                pos_gyro: self.jac.pos_gyro
                    + self.jac.vel_gyro * next.dt_total
                    - r1 * skew(&next.dp) * self.jac.rot_gyro
                    + r1 * next.jac.pos_gyro,
                pos_accel: self.jac.pos_accel
                    + self.jac.vel_accel * next.dt_total
                    + r1 * next.jac.pos_accel,
            },
            noise: self.noise,
        }
    }

    pub fn needs_reintegration(&self, bias: &ImuBias) -> bool {
        self.bias_lin.max_abs_diff(bias) > REINTEGRATION_THRESHOLD
    }
}

/// Integrates a whole batch of readings from scratch.
pub fn preintegrate(
    steps: &[ImuStep],
    bias_lin: ImuBias,
    noise: ImuNoise,
) -> Result<PreintegratedImu, PreintegrationError> {
    let mut pre = PreintegratedImu::new(bias_lin, noise);
    for s in steps {
        pre.integrate(&s.omega, &s.accel, s.dt)?;
    }
    Ok(pre)
}

/// `Log(ΔR̄ᵀ·R_iᵀ·R_j)` at the linearization bias.
pub fn residual_rotation(pre: &PreintegratedImu, ri: &Matrix3<f64>, rj: &Matrix3<f64>) -> Vector3<f64> {
    rotation_error(&pre.dr, ri, rj)
}

fn rotation_error(dr: &Matrix3<f64>, ri: &Matrix3<f64>, rj: &Matrix3<f64>) -> Vector3<f64> {
    log_so3(&(dr.transpose() * ri.transpose() * rj))
}

pub fn residual_position(
    pre: &PreintegratedImu,
    si: &NavState,
    sj: &NavState,
    g: &Vector3<f64>,
) -> Vector3<f64> {
    let dt = pre.dt_total;
    let inc = pre.corrected(&ImuBias::of(si));
    si.q.to_rot().transpose() * (sj.p - si.p - si.v * dt - 0.5 * g * dt * dt) - inc.dp
}

pub fn residual_velocity(
    pre: &PreintegratedImu,
    si: &NavState,
    sj: &NavState,
    g: &Vector3<f64>,
) -> Vector3<f64> {
    let inc = pre.corrected(&ImuBias::of(si));
    si.q.to_rot().transpose() * (sj.v - si.v - g * pre.dt_total) - inc.dv
}

/// Stacked bias change `(b_g,j − b_g,i; b_a,j − b_a,i)`.
pub fn residual_bias(bi: &ImuBias, bj: &ImuBias) -> Vector6 {
    let mut r = Vector6::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&(bj.gyro - bi.gyro));
    r.fixed_rows_mut::<3>(3).copy_from(&(bj.accel - bi.accel));
    r
}

/// Bias random-walk covariance over `dt` seconds, stacked like [`residual_bias`].
pub fn bias_covariance(noise: &ImuNoise, dt: f64) -> SMatrix<f64, 6, 6> {
    let mut c = SMatrix::<f64, 6, 6>::zeros();
    for i in 0..3 {
        c[(i, i)] = noise.sigma_wg.powi(2) * dt;
        c[(3 + i, 3 + i)] = noise.sigma_wa.powi(2) * dt;
    }
    c
}

/// Stacked `(r_R, r_p, r_v)` with increments corrected to node i's biases.
pub fn residual(pre: &PreintegratedImu, si: &NavState, sj: &NavState, g: &Vector3<f64>) -> Vector9 {
    let inc = pre.corrected(&ImuBias::of(si));
    let mut r = Vector9::zeros();
    r.fixed_rows_mut::<3>(0)
        .copy_from(&rotation_error(&inc.dr, &si.q.to_rot(), &sj.q.to_rot()));
    r.fixed_rows_mut::<3>(3)
        .copy_from(&residual_position(pre, si, sj, g));
    r.fixed_rows_mut::<3>(6)
        .copy_from(&residual_velocity(pre, si, sj, g));
    r
}

pub type NodeJacobian = SMatrix<f64, 9, 15>;

/// Jacobians of [`residual`] with respect to node i and node j, each over
/// the block `(δθ, δp, δv, δb_g, δb_a)`.
pub fn residual_jacobians(
    pre: &PreintegratedImu,
    si: &NavState,
    sj: &NavState,
    g: &Vector3<f64>,
) -> (NodeJacobian, NodeJacobian) {
    let dt = pre.dt_total;
    let inc = pre.corrected(&ImuBias::of(si));
    let ri = si.q.to_rot();
    let rj = sj.q.to_rot();
    let rit = ri.transpose();
    let r_rot = rotation_error(&inc.dr, &ri, &rj);
    let jr_inv = right_jacobian_inv(&r_rot);

    let mut ji = NodeJacobian::zeros();
    let mut jj = NodeJacobian::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-jr_inv * rj.transpose() * ri));
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);

    let pos = rit * (sj.p - si.p - si.v * dt - 0.5 * g * dt * dt);
    ji.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&pos));
    ji.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-rit));
    ji.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-rit * dt));
    jj.fixed_view_mut::<3, 3>(3, 3).copy_from(&rit);

    let vel = rit * (sj.v - si.v - g * dt);
    ji.fixed_view_mut::<3, 3>(6, 0).copy_from(&skew(&vel));
    ji.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-rit));
    jj.fixed_view_mut::<3, 3>(6, 6).copy_from(&rit);

    ji.fixed_view_mut::<3, 3>(0, 9).copy_from(
        &(-jr_inv * exp_so3(&r_rot).transpose() * inc.rot_jr * pre.jac.rot_gyro),
    );
    ji.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-pre.jac.pos_gyro));
    ji.fixed_view_mut::<3, 3>(3, 12).copy_from(&(-pre.jac.pos_accel));
    ji.fixed_view_mut::<3, 3>(6, 9).copy_from(&(-pre.jac.vel_gyro));
    ji.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-pre.jac.vel_accel));
    (ji, jj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eskf::gravity;
    use crate::geometry::Quat;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    fn rand_steps(rng: &mut impl Rng, n: usize) -> Vec<ImuStep> {
        (0..n)
            .map(|_| ImuStep {
                omega: rand_vec(rng, 1.0),
                accel: rand_vec(rng, 3.0) - gravity(),
                dt: 0.005,
            })
            .collect()
    }

    fn rand_state(rng: &mut impl Rng) -> NavState {
        NavState {
            q: Quat::from_rotation_vector(&rand_vec(rng, 2.0)),
            v: rand_vec(rng, 2.0),
            p: rand_vec(rng, 10.0),
            ..NavState::default()
        }
    }

    fn perturb(s: &NavState, d: &SVector<f64, 15>) -> NavState {
        NavState {
            q: s.q * Quat::from_rotation_vector(&d.fixed_rows::<3>(0).into_owned()),
            p: s.p + d.fixed_rows::<3>(3),
            v: s.v + d.fixed_rows::<3>(6),
            bias_gyro: s.bias_gyro + d.fixed_rows::<3>(9),
            bias_accel: s.bias_accel + d.fixed_rows::<3>(12),
        }
    }

    /// Forward Euler in the world frame, holding each reading over its step.
    fn world_euler(s0: &NavState, steps: &[ImuStep]) -> NavState {
        let mut r = s0.q.to_rot();
        let mut v = s0.v;
        let mut p = s0.p;
        for st in steps {
            let a_w = r * (st.accel - s0.bias_accel) + gravity();
            p += v * st.dt + 0.5 * a_w * st.dt * st.dt;
            v += a_w * st.dt;
            r *= exp_so3(&((st.omega - s0.bias_gyro) * st.dt));
        }
        NavState {
            q: crate::geometry::rot_to_quat(&r),
            v,
            p,
            ..*s0
        }
    }

    #[test]
    fn zero_inputs_leave_increments_unchanged() {
        let mut pre = PreintegratedImu::new(ImuBias::default(), ImuNoise::default());
        for _ in 0..50 {
            pre.integrate(&Vector3::zeros(), &Vector3::zeros(), 0.01).unwrap();
        }
        assert_eq!(pre.dr, Matrix3::identity());
        assert_eq!(pre.dv, Vector3::zeros());
        assert_eq!(pre.dp, Vector3::zeros());
        assert_eq!(pre.count, 50);
        assert_relative_eq!(pre.dt_total, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn constant_acceleration_closed_form() {
        let mut pre = PreintegratedImu::new(ImuBias::default(), ImuNoise::default());
        for _ in 0..200 {
            pre.integrate(&Vector3::zeros(), &Vector3::new(1.0, 0.0, 0.0), 0.005)
                .unwrap();
        }
        assert_relative_eq!(pre.dv, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-6);
        assert_relative_eq!(pre.dp, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-6);
    }

    #[test]
    fn invalid_dt() {
        let mut pre = PreintegratedImu::new(ImuBias::default(), ImuNoise::default());
        let z = Vector3::zeros();
        assert_eq!(pre.integrate(&z, &z, 0.0), Err(PreintegrationError::InvalidDt(0.0)));
        assert_eq!(pre.integrate(&z, &z, 0.5), Err(PreintegrationError::InvalidDt(0.5)));
    }

    #[test]
    fn split_batches_compose_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bias = ImuBias {
            gyro: rand_vec(&mut rng, 0.01),
            accel: rand_vec(&mut rng, 0.1),
        };
        let steps = rand_steps(&mut rng, 40);
        for split in [1, 13, 20, 39] {
            let full = preintegrate(&steps, bias, ImuNoise::default()).unwrap();
            let a = preintegrate(&steps[..split], bias, ImuNoise::default()).unwrap();
            let b = preintegrate(&steps[split..], bias, ImuNoise::default()).unwrap();
            let c = a.compose(&b);
            assert_relative_eq!(c.dr, full.dr, epsilon = 1e-9);
            assert_relative_eq!(c.dv, full.dv, epsilon = 1e-9);
            assert_relative_eq!(c.dp, full.dp, epsilon = 1e-9);
            assert_relative_eq!(c.dt_total, full.dt_total, epsilon = 1e-12);
            assert_eq!(c.count, full.count);
            assert_relative_eq!(c.jac.rot_gyro, full.jac.rot_gyro, epsilon = 1e-9);
            assert_relative_eq!(c.jac.vel_gyro, full.jac.vel_gyro, epsilon = 1e-9);
            assert_relative_eq!(c.jac.pos_gyro, full.jac.pos_gyro, epsilon = 1e-9);
            assert_relative_eq!(c.jac.vel_accel, full.jac.vel_accel, epsilon = 1e-9);
            assert_relative_eq!(c.jac.pos_accel, full.jac.pos_accel, epsilon = 1e-9);
            assert!((c.cov - full.cov).norm() <= 1e-9 * full.cov.norm());
        }
    }

    #[test]
    fn covariance_psd_and_trace_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pre = PreintegratedImu::new(ImuBias::default(), ImuNoise::default());
        let mut last = 0.0;
        for st in rand_steps(&mut rng, 100) {
            pre.integrate(&st.omega, &st.accel, st.dt).unwrap();
            let tr = pre.cov.trace();
            assert!(tr > last);
            last = tr;
            let eig = nalgebra::SymmetricEigen::new(pre.cov);
            assert!(eig.eigenvalues.min() > -1e-15);
        }
    }

    #[test]
    fn rotation_residual_examples() {
        let pre = PreintegratedImu::new(ImuBias::default(), ImuNoise::default());
        let rj = exp_so3(&Vector3::new(0.0, 0.0, 0.1));
        assert_relative_eq!(
            residual_rotation(&pre, &Matrix3::identity(), &rj),
            Vector3::new(0.0, 0.0, 0.1),
            epsilon = 1e-12
        );
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pre = preintegrate(&rand_steps(&mut rng, 20), ImuBias::default(), ImuNoise::default()).unwrap();
        let ri = exp_so3(&rand_vec(&mut rng, 2.0));
        assert!(residual_rotation(&pre, &ri, &(ri * pre.dr)).norm() < 1e-12);
    }

    #[test]
    fn hover_residuals_vanish() {
        let mut pre = PreintegratedImu::new(ImuBias::default(), ImuNoise::default());
        for _ in 0..40 {
            pre.integrate(&Vector3::zeros(), &(-gravity()), 0.005).unwrap();
        }
        let s = NavState {
            p: Vector3::new(1.0, 2.0, 3.0),
            ..NavState::default()
        };
        assert!(residual_position(&pre, &s, &s, &gravity()).norm() < 1e-12);
        assert!(residual_velocity(&pre, &s, &s, &gravity()).norm() < 1e-12);
    }

    #[test]
    fn free_fall_velocity_residual() {
        let mut pre = PreintegratedImu::new(ImuBias::default(), ImuNoise::default());
        for _ in 0..20 {
            pre.integrate(&Vector3::zeros(), &Vector3::zeros(), 0.005).unwrap();
        }
        let si = NavState::default();
        let sj = NavState {
            v: gravity() * pre.dt_total,
            ..si
        };
        assert!(residual_velocity(&pre, &si, &sj, &gravity()).norm() < 1e-12);
    }

    #[test]
    fn residuals_linear_in_node_j() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pre = preintegrate(&rand_steps(&mut rng, 20), ImuBias::default(), ImuNoise::default()).unwrap();
        let si = rand_state(&mut rng);
        let sj = rand_state(&mut rng);
        let eps = Vector3::new(0.3, 0.0, 0.0);
        let rit = si.q.to_rot().transpose();
        let moved = NavState { p: sj.p + eps, ..sj };
        assert_relative_eq!(
            residual_position(&pre, &si, &moved, &gravity()) - residual_position(&pre, &si, &sj, &gravity()),
            rit * eps,
            epsilon = 1e-12
        );
        let moved = NavState { v: sj.v + eps, ..sj };
        assert_relative_eq!(
            residual_velocity(&pre, &si, &moved, &gravity()) - residual_velocity(&pre, &si, &sj, &gravity()),
            rit * eps,
            epsilon = 1e-12
        );
    }

    #[test]
    fn residuals_vanish_on_forward_simulated_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let mut s0 = rand_state(&mut rng);
            s0.bias_gyro = rand_vec(&mut rng, 0.01);
            s0.bias_accel = rand_vec(&mut rng, 0.1);
            let steps = rand_steps(&mut rng, 40);
            let pre = preintegrate(&steps, ImuBias::of(&s0), ImuNoise::default()).unwrap();
            let s1 = world_euler(&s0, &steps);
            assert!(residual(&pre, &s0, &s1, &gravity()).norm() < 1e-8);
        }
    }

    #[test]
    fn residuals_vanish_on_rk4_states_when_inputs_align() {
        // With the rotation axis parallel to the specific force, Euler and RK4 agree.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let axis = rand_vec(&mut rng, 1.0).normalize();
            let omega = axis * 0.7;
            let accel = axis * 4.0;
            let steps: Vec<ImuStep> = (0..40)
                .map(|_| ImuStep { omega, accel, dt: 0.005 })
                .collect();
            let s0 = rand_state(&mut rng);
            let mut s = s0;
            let sample = crate::dataset::ImuSample { t: 0, omega, accel };
            for st in &steps {
                s = crate::eskf::propagate_nominal(&s, &sample, st.dt).unwrap();
            }
            let pre = preintegrate(&steps, ImuBias::default(), ImuNoise::default()).unwrap();
            assert!(residual(&pre, &s0, &s, &gravity()).norm() < 1e-6);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let eps = 1e-6;
        for _ in 0..100 {
            let pre = preintegrate(&rand_steps(&mut rng, 20), ImuBias::default(), ImuNoise::default()).unwrap();
            let mut si = rand_state(&mut rng);
            si.bias_gyro = rand_vec(&mut rng, 5e-4);
            si.bias_accel = rand_vec(&mut rng, 5e-4);
            let sj = NavState {
                q: si.q
                    * Quat::from_rotation_vector(&log_so3(&pre.dr))
                    * Quat::from_rotation_vector(&rand_vec(&mut rng, 0.3)),
                p: si.p + rand_vec(&mut rng, 1.0),
                v: si.v + rand_vec(&mut rng, 1.0),
                ..si
            };
            let (ji, jj) = residual_jacobians(&pre, &si, &sj, &gravity());
            let mut ji_fd = NodeJacobian::zeros();
            let mut jj_fd = NodeJacobian::zeros();
            for k in 0..15 {
                let mut d = SVector::<f64, 15>::zeros();
                d[k] = eps;
                let c = (residual(&pre, &perturb(&si, &d), &sj, &gravity())
                    - residual(&pre, &perturb(&si, &-d), &sj, &gravity()))
                    / (2.0 * eps);
                ji_fd.set_column(k, &c);
                let c = (residual(&pre, &si, &perturb(&sj, &d), &gravity())
                    - residual(&pre, &si, &perturb(&sj, &-d), &gravity()))
                    / (2.0 * eps);
                jj_fd.set_column(k, &c);
            }
            assert!((ji - ji_fd).norm() / ji.norm() < 1e-5);
            assert!((jj - jj_fd).norm() / jj.norm() < 1e-5);
        }
    }

    #[test]
    fn bias_jacobians_match_reintegration() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let eps = 1e-6;
        for _ in 0..100 {
            let steps = rand_steps(&mut rng, 20);
            let lin = ImuBias {
                gyro: rand_vec(&mut rng, 0.01),
                accel: rand_vec(&mut rng, 0.1),
            };
            let pre = preintegrate(&steps, lin, ImuNoise::default()).unwrap();
            let mut fd_rot = Matrix3::zeros();
            let mut fd = SMatrix::<f64, 6, 6>::zeros();
            for k in 0..6 {
                let shifted = |sign: f64| {
                    let mut b = lin;
                    if k < 3 {
                        b.gyro[k] += sign * eps;
                    } else {
                        b.accel[k - 3] += sign * eps;
                    }
                    preintegrate(&steps, b, ImuNoise::default()).unwrap()
                };
                let (hi, lo) = (shifted(1.0), shifted(-1.0));
                if k < 3 {
                    let col = (log_so3(&(pre.dr.transpose() * hi.dr))
                        - log_so3(&(pre.dr.transpose() * lo.dr)))
                        / (2.0 * eps);
                    fd_rot.set_column(k, &col);
                }
                fd.fixed_view_mut::<3, 1>(0, k)
                    .copy_from(&((hi.dv - lo.dv) / (2.0 * eps)));
                fd.fixed_view_mut::<3, 1>(3, k)
                    .copy_from(&((hi.dp - lo.dp) / (2.0 * eps)));
            }
            let mut analytic = SMatrix::<f64, 6, 6>::zeros();
            analytic.fixed_view_mut::<3, 3>(0, 0).copy_from(&pre.jac.vel_gyro);
            analytic.fixed_view_mut::<3, 3>(0, 3).copy_from(&pre.jac.vel_accel);
            analytic.fixed_view_mut::<3, 3>(3, 0).copy_from(&pre.jac.pos_gyro);
            analytic.fixed_view_mut::<3, 3>(3, 3).copy_from(&pre.jac.pos_accel);
            assert!((fd_rot - pre.jac.rot_gyro).norm() / pre.jac.rot_gyro.norm() < 1e-5);
            assert!((fd - analytic).norm() / analytic.norm() < 1e-5);
        }
    }

    #[test]
    fn bias_residual_examples() {
        let a = ImuBias::default();
        assert_eq!(residual_bias(&a, &a), Vector6::zeros());
        let b = ImuBias {
            gyro: Vector3::new(1.0, 0.0, 0.0),
            ..a
        };
        assert_eq!(
            residual_bias(&a, &b),
            Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn reintegration_threshold() {
        let pre = PreintegratedImu::new(ImuBias::default(), ImuNoise::default());
        let mut b = ImuBias::default();
        b.accel.x = 5e-4;
        assert!(!pre.needs_reintegration(&b));
        b.gyro.z = -2e-3;
        assert!(pre.needs_reintegration(&b));
    }

    proptest! {
        #[test]
        fn bias_residual_antisymmetric(v in proptest::array::uniform12(-1.0f64..1.0)) {
            let a = ImuBias { gyro: Vector3::new(v[0], v[1], v[2]), accel: Vector3::new(v[3], v[4], v[5]) };
            let b = ImuBias { gyro: Vector3::new(v[6], v[7], v[8]), accel: Vector3::new(v[9], v[10], v[11]) };
            prop_assert_eq!(residual_bias(&a, &b), -residual_bias(&b, &a));
        }
    }
}
