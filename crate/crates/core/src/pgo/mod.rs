//! Pose-graph estimator: keyframes carrying pose, velocity and biases,
//! linked by preintegrated IMU factors and anchored by range factors to
//! base stations whose positions are tightly constrained variables.
//!
//! The MAP problem is solved with Levenberg–Marquardt on the manifold
//! (rotation retraction `R ← R·Exp(δθ)`), either over a sliding window with
//! a Gaussian prior standing in for marginalized keyframes, or in batch.

pub mod solver;

use std::ops::IndexMut;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, RowVector3, Vector3};
use thiserror::Error;

use crate::dataset::{associate_nearest, ImuSample, Timestamp, ToaMeasurement, TrajectoryPoint, NANOS_PER_SEC};
use crate::eskf::{gravity, ImuNoise, InitialSigmas, NavState, MAX_DT};
use crate::geometry::{log_so3, right_jacobian_inv, Quat};
use crate::preintegration::{
    bias_covariance, preintegrate, residual as imu_residual, residual_bias, residual_jacobians, ImuBias,
    ImuStep, PreintegratedImu, PreintegrationError,
};
use crate::toa_sim::BaseStation;
use solver::BlockSystem;

/// Size of one keyframe's variable block `(δθ, δp, δv, δb_g, δb_a)`.
pub const STATE_DIM: usize = 15;

pub mod idx {
    pub const THETA: usize = 0;
    pub const P: usize = 3;
    pub const V: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
}

/// Lower bound on the diagonal used to scale LM damping.
const DAMPING_FLOOR: f64 = 1e-6;
/// Damping beyond which a failing factorization is reported as singular.
const MAX_DAMPING: f64 = 1e16;
const MIN_DAMPING: f64 = 1e-15;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum PgoError {
    #[error("no IMU samples to build keyframes from")]
    EmptyInput,
    #[error("keyframe position within 1e-6 m of base station {0}")]
    DegenerateGeometry(u32),
    #[error("cost became non-finite")]
    NonFiniteCost,
    #[error("normal equations stayed singular after damping escalation")]
    SingularNormalEquations,
    #[error("measurement references unknown base station {0}")]
    UnknownStation(u32),
    #[error("covariance of a {0} factor is not positive definite")]
    BadCovariance(&'static str),
    #[error(transparent)]
    Preintegration(#[from] PreintegrationError),
}

/// `d − ‖p − L‖`.
pub fn range_residual(p: &Vector3<f64>, l: &Vector3<f64>, d: f64) -> Result<f64, f64> {
    let n = (p - l).norm();
    if n < 1e-6 {
        return Err(n);
    }
    Ok(d - n)
}

/// Gradient of [`range_residual`] with respect to `p`; the gradient with
/// respect to `L` is its negative.
pub fn range_gradient(p: &Vector3<f64>, l: &Vector3<f64>) -> Result<RowVector3<f64>, f64> {
    let diff = p - l;
    let n = diff.norm();
    if n < 1e-6 {
        return Err(n);
    }
    Ok(-diff.transpose() / n)
}

/// Zero-mean Gaussian noise with its whitening transform `W = L⁻¹`, `Σ = LLᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub cov: DMatrix<f64>,
    whitener: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(cov: DMatrix<f64>) -> Option<Self> {
        let l = cov.clone().cholesky()?.unpack();
        let n = l.nrows();
        let whitener = l.solve_lower_triangular(&DMatrix::identity(n, n))?;
        Some(Self { cov, whitener })
    }

    pub fn diagonal(sigmas: &[f64]) -> Option<Self> {
        let var: Vec<f64> = sigmas.iter().map(|s| s * s).collect();
        Self::new(DMatrix::from_diagonal(&DVector::from_vec(var)))
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn scaled(&self, factor: f64) -> Option<Self> {
        Self::new(&self.cov * factor)
    }

    pub fn whiten(&self, r: &DVector<f64>) -> DVector<f64> {
        &self.whitener * r
    }

    pub fn whiten_jacobian(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        // W is lower triangular; a direct loop beats a general product at
        // these sizes.
        let n = self.dim();
        let w = self.whitener.as_slice();
        let mut out = DMatrix::zeros(n, j.ncols());
        for (src, dst) in j.as_slice().chunks_exact(n).zip(out.as_mut_slice().chunks_exact_mut(n)) {
            for (k, &x) in src.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let wk = &w[k * n..(k + 1) * n];
                for i in k..n {
                    dst[i] += wk[i] * x;
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FactorKind {
    PriorPose,
    PriorVelocity,
    PriorBias,
    PriorStation,
    Imu,
    Range,
}

#[derive(Clone, Debug)]
pub struct ImuFactor {
    /// Keyframe `i`; the factor links `i` and `i + 1`.
    pub from: usize,
    pub steps: Vec<ImuStep>,
    pub pre: PreintegratedImu,
    /// Over the stacked `(r_R, r_p, r_v, r_b)` residual.
    pub noise: Gaussian,
}

impl ImuFactor {
    pub fn new(from: usize, steps: Vec<ImuStep>, bias: ImuBias, noise: ImuNoise) -> Result<Self, PgoError> {
        let pre = preintegrate(&steps, bias, noise)?;
        let noise = Self::covariance(&pre)?;
        Ok(Self {
            from,
            steps,
            pre,
            noise,
        })
    }

    fn covariance(pre: &PreintegratedImu) -> Result<Gaussian, PgoError> {
        let mut cov = DMatrix::zeros(15, 15);
        cov.view_mut((0, 0), (9, 9)).copy_from(&pre.cov);
        cov.view_mut((9, 9), (6, 6))
            .copy_from(&bias_covariance(pre.noise(), pre.dt_total));
        if let Some(g) = Gaussian::new(cov.clone()) {
            return Ok(g);
        }
        // Noise-free sensor settings leave the covariance singular.
        let jitter = 1e-12 * cov.diagonal().max().max(1e-12);
        Gaussian::new(cov + DMatrix::identity(15, 15) * jitter).ok_or(PgoError::BadCovariance("IMU"))
    }

    /// Re-integrates the readings when `bias` has drifted from the
    /// linearization point. Returns whether anything changed.
    pub fn refresh(&mut self, bias: &ImuBias) -> Result<bool, PgoError> {
        if !self.pre.needs_reintegration(bias) {
            return Ok(false);
        }
        self.pre = preintegrate(&self.steps, *bias, *self.pre.noise())?;
        self.noise = Self::covariance(&self.pre)?;
        Ok(true)
    }
}

#[derive(Clone, Debug)]
pub enum Factor {
    /// Residual `(Log(R₀ᵀR), p − p₀)`.
    PriorPose {
        kf: usize,
        rot: Matrix3<f64>,
        p: Vector3<f64>,
        noise: Gaussian,
    },
    PriorVelocity {
        kf: usize,
        v: Vector3<f64>,
        noise: Gaussian,
    },
    PriorBias {
        kf: usize,
        bias: ImuBias,
        noise: Gaussian,
    },
    PriorStation {
        station: usize,
        position: Vector3<f64>,
        noise: Gaussian,
    },
    Imu(ImuFactor),
    Range {
        kf: usize,
        station: usize,
        distance: f64,
        sigma: f64,
    },
}

/// A variable in the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    Keyframe(usize),
    Station(usize),
}

type Linearized = (DVector<f64>, Vec<(Var, DMatrix<f64>)>);

impl Factor {
    pub fn kind(&self) -> FactorKind {
        match self {
            Factor::PriorPose { .. } => FactorKind::PriorPose,
            Factor::PriorVelocity { .. } => FactorKind::PriorVelocity,
            Factor::PriorBias { .. } => FactorKind::PriorBias,
            Factor::PriorStation { .. } => FactorKind::PriorStation,
            Factor::Imu(_) => FactorKind::Imu,
            Factor::Range { .. } => FactorKind::Range,
        }
    }

    pub fn variables(&self) -> Vec<Var> {
        match self {
            Factor::PriorPose { kf, .. } | Factor::PriorVelocity { kf, .. } | Factor::PriorBias { kf, .. } => {
                vec![Var::Keyframe(*kf)]
            }
            Factor::PriorStation { station, .. } => vec![Var::Station(*station)],
            Factor::Imu(f) => vec![Var::Keyframe(f.from), Var::Keyframe(f.from + 1)],
            Factor::Range { kf, station, .. } => vec![Var::Keyframe(*kf), Var::Station(*station)],
        }
    }

    pub fn touches_keyframe(&self, k: usize) -> bool {
        self.variables().contains(&Var::Keyframe(k))
    }

    /// Unwhitened residual.
    pub fn residual(&self, values: &Values, graph: &FactorGraph) -> Result<DVector<f64>, PgoError> {
        Ok(match self {
            Factor::PriorPose { kf, rot, p, .. } => {
                let s = values.state(*kf);
                let mut r = DVector::zeros(6);
                r.rows_mut(0, 3)
                    .copy_from(&log_so3(&(rot.transpose() * s.q.to_rot())));
                r.rows_mut(3, 3).copy_from(&(s.p - p));
                r
            }
            Factor::PriorVelocity { kf, v, .. } => DVector::from_column_slice((values.state(*kf).v - v).as_slice()),
            Factor::PriorBias { kf, bias, .. } => {
                DVector::from_column_slice(residual_bias(bias, &ImuBias::of(values.state(*kf))).as_slice())
            }
            Factor::PriorStation { station, position, .. } => {
                DVector::from_column_slice((values.stations[*station] - position).as_slice())
            }
            Factor::Imu(f) => {
                let si = values.state(f.from);
                let sj = values.state(f.from + 1);
                let mut r = DVector::zeros(15);
                r.rows_mut(0, 9)
                    .copy_from(&imu_residual(&f.pre, si, sj, &graph.gravity));
                r.rows_mut(9, 6)
                    .copy_from(&residual_bias(&ImuBias::of(si), &ImuBias::of(sj)));
                r
            }
            Factor::Range {
                kf, station, distance, ..
            } => {
                let p = values.state(*kf).p;
                let l = values.stations[*station];
                let r = range_residual(&p, &l, *distance)
                    .map_err(|_| PgoError::DegenerateGeometry(graph.station_ids[*station]))?;
                DVector::from_element(1, r)
            }
        })
    }

    fn whiten(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            Factor::PriorPose { noise, .. }
            | Factor::PriorVelocity { noise, .. }
            | Factor::PriorBias { noise, .. }
            | Factor::PriorStation { noise, .. } => noise.whiten(r),
            Factor::Imu(f) => f.noise.whiten(r),
            Factor::Range { sigma, .. } => r / *sigma,
        }
    }

    fn whiten_jacobian(&self, j: DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Factor::PriorPose { noise, .. }
            | Factor::PriorVelocity { noise, .. }
            | Factor::PriorBias { noise, .. }
            | Factor::PriorStation { noise, .. } => noise.whiten_jacobian(&j),
            Factor::Imu(f) => f.noise.whiten_jacobian(&j),
            Factor::Range { sigma, .. } => j / *sigma,
        }
    }

    /// `rᵀΣ⁻¹r`.
    pub fn cost(&self, values: &Values, graph: &FactorGraph) -> Result<f64, PgoError> {
        Ok(self.whiten(&self.residual(values, graph)?).norm_squared())
    }

    /// Unwhitened Jacobian blocks, one per variable.
    pub fn jacobians(&self, values: &Values, graph: &FactorGraph) -> Result<Vec<(Var, DMatrix<f64>)>, PgoError> {
        Ok(match self {
            Factor::PriorPose { kf, rot, .. } => {
                let s = values.state(*kf);
                let r = log_so3(&(rot.transpose() * s.q.to_rot()));
                let mut j = DMatrix::zeros(6, STATE_DIM);
                j.view_mut((0, idx::THETA), (3, 3))
                    .copy_from(&right_jacobian_inv(&r));
                j.view_mut((3, idx::P), (3, 3))
                    .copy_from(&Matrix3::identity());
                vec![(Var::Keyframe(*kf), j)]
            }
            Factor::PriorVelocity { kf, .. } => {
                let mut j = DMatrix::zeros(3, STATE_DIM);
                j.view_mut((0, idx::V), (3, 3))
                    .copy_from(&Matrix3::identity());
                vec![(Var::Keyframe(*kf), j)]
            }
            Factor::PriorBias { kf, .. } => {
                let mut j = DMatrix::zeros(6, STATE_DIM);
                j.view_mut((0, idx::BG), (6, 6))
                    .copy_from(&DMatrix::identity(6, 6));
                vec![(Var::Keyframe(*kf), j)]
            }
            Factor::PriorStation { station, .. } => vec![(Var::Station(*station), DMatrix::identity(3, 3))],
            Factor::Imu(f) => {
                let si = values.state(f.from);
                let sj = values.state(f.from + 1);
                let (ji, jj) = residual_jacobians(&f.pre, si, sj, &graph.gravity);
                let mut a = DMatrix::zeros(15, STATE_DIM);
                let mut b = DMatrix::zeros(15, STATE_DIM);
                a.view_mut((0, 0), (9, STATE_DIM)).copy_from(&ji);
                b.view_mut((0, 0), (9, STATE_DIM)).copy_from(&jj);
                a.view_mut((9, idx::BG), (6, 6))
                    .copy_from(&-DMatrix::<f64>::identity(6, 6));
                b.view_mut((9, idx::BG), (6, 6))
                    .copy_from(&DMatrix::identity(6, 6));
                vec![(Var::Keyframe(f.from), a), (Var::Keyframe(f.from + 1), b)]
            }
            Factor::Range { kf, station, .. } => {
                let p = values.state(*kf).p;
                let l = values.stations[*station];
                let g = range_gradient(&p, &l)
                    .map_err(|_| PgoError::DegenerateGeometry(graph.station_ids[*station]))?;
                let mut jp = DMatrix::zeros(1, STATE_DIM);
                jp.view_mut((0, idx::P), (1, 3)).copy_from(&g);
                let jl = DMatrix::from_row_slice(1, 3, (-g).as_slice());
                vec![(Var::Keyframe(*kf), jp), (Var::Station(*station), jl)]
            }
        })
    }

    fn linearize(&self, values: &Values, graph: &FactorGraph) -> Result<Linearized, PgoError> {
        let r = self.whiten(&self.residual(values, graph)?);
        let blocks = self
            .jacobians(values, graph)?
            .into_iter()
            .map(|(v, j)| (v, self.whiten_jacobian(j)))
            .collect();
        Ok((r, blocks))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Keyframe {
    pub index: usize,
    pub t: Timestamp,
}

/// Variable values for keyframes `first..first + states.len()` and all stations.
#[derive(Clone, Debug, PartialEq)]
pub struct Values {
    pub first: usize,
    pub states: Vec<NavState>,
    pub stations: Vec<Vector3<f64>>,
}

impl Values {
    pub fn state(&self, kf: usize) -> &NavState {
        &self.states[kf - self.first]
    }

    pub fn dim(&self) -> usize {
        STATE_DIM * self.states.len() + 3 * self.stations.len()
    }

    /// `x ⊞ δ` over the packed layout used by the normal equations.
    pub fn retract(&self, delta: &DVector<f64>) -> Values {
        let mut out = self.clone();
        for (k, s) in out.states.iter_mut().enumerate() {
            let d = delta.rows(k * STATE_DIM, STATE_DIM);
            let dtheta = Vector3::new(d[idx::THETA], d[idx::THETA + 1], d[idx::THETA + 2]);
            s.q = s.q * Quat::from_rotation_vector(&dtheta);
            s.p += d.fixed_rows::<3>(idx::P);
            s.v += d.fixed_rows::<3>(idx::V);
            s.bias_gyro += d.fixed_rows::<3>(idx::BG);
            s.bias_accel += d.fixed_rows::<3>(idx::BA);
        }
        let base = STATE_DIM * self.states.len();
        for (i, l) in out.stations.iter_mut().enumerate() {
            *l += delta.fixed_rows::<3>(base + 3 * i);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct FactorGraph {
    pub keyframes: Vec<Keyframe>,
    pub factors: Vec<Factor>,
    pub station_ids: Vec<u32>,
    pub gravity: Vector3<f64>,
}

impl FactorGraph {
    pub fn count(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind() == kind).count()
    }

    /// Re-integrates IMU factors whose bias linearization point is stale.
    pub fn refresh(&mut self, values: &Values) -> Result<bool, PgoError> {
        let mut changed = false;
        for f in &mut self.factors {
            if let Factor::Imu(imu) = f {
                changed |= imu.refresh(&ImuBias::of(values.state(imu.from)))?;
            }
        }
        Ok(changed)
    }
}

/// `Σ rᵀΣ⁻¹r` over all factors.
pub fn total_cost(graph: &FactorGraph, values: &Values) -> Result<f64, PgoError> {
    let mut c = 0.0;
    for f in &graph.factors {
        c += f.cost(values, graph)?;
    }
    if !c.is_finite() {
        return Err(PgoError::NonFiniteCost);
    }
    Ok(c)
}

/// `dst += aᵀb`, skipping zero entries of `a` (factor Jacobians are sparse
/// and tiny, where a general matrix product mostly pays for packing).
fn add_at_b<D>(dst: &mut D, a: &DMatrix<f64>, b: &DMatrix<f64>)
where
    D: IndexMut<(usize, usize), Output = f64>,
{
    let rows = a.nrows();
    let (sa, sb) = (a.as_slice(), b.as_slice());
    for (i, ca) in sa.chunks_exact(rows).enumerate() {
        if ca.iter().all(|x| *x == 0.0) {
            continue;
        }
        for (j, cb) in sb.chunks_exact(rows).enumerate() {
            let dot: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
            dst[(i, j)] += dot;
        }
    }
}

/// Gauss–Newton system `(JᵀJ, Jᵀr)` in whitened form.
pub fn linearize(graph: &FactorGraph, values: &Values) -> Result<(BlockSystem<STATE_DIM>, DVector<f64>), PgoError> {
    let n = values.states.len();
    let m = 3 * values.stations.len();
    let mut sys = BlockSystem::zeros(n, m);
    let mut grad = DVector::zeros(values.dim());
    let offset = |v: Var| match v {
        Var::Keyframe(k) => (k - values.first) * STATE_DIM,
        Var::Station(s) => n * STATE_DIM + 3 * s,
    };
    for f in &graph.factors {
        let (r, blocks) = f.linearize(values, graph)?;
        for (va, ja) in &blocks {
            let oa = offset(*va);
            for row in 0..ja.nrows() {
                for c in 0..ja.ncols() {
                    grad[oa + c] += ja[(row, c)] * r[row];
                }
            }
            for (vb, jb) in &blocks {
                match (*va, *vb) {
                    (Var::Keyframe(a), Var::Keyframe(b)) if a == b => {
                        add_at_b(&mut sys.diag[a - values.first], ja, jb);
                    }
                    (Var::Keyframe(a), Var::Keyframe(b)) if a == b + 1 => {
                        add_at_b(&mut sys.off[b - values.first], ja, jb);
                    }
                    (Var::Keyframe(a), Var::Station(s)) => {
                        let mut view = sys
                            .border
                            .view_mut(((a - values.first) * STATE_DIM, 3 * s), (STATE_DIM, 3));
                        add_at_b(&mut view, ja, jb);
                    }
                    (Var::Station(s), Var::Station(t)) => {
                        let mut view = sys.corner.view_mut((3 * s, 3 * t), (3, 3));
                        add_at_b(&mut view, ja, jb);
                    }
                    // transposed counterparts are implied by symmetry
                    _ => {}
                }
            }
        }
    }
    Ok((sys, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmOptions {
    pub max_iters: usize,
    pub initial_damping: f64,
    pub cost_tol: f64,
    pub step_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            initial_damping: 1e-12,
            cost_tol: 1e-9,
            step_tol: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    CostConverged,
    StepConverged,
    /// No damped step lowered the cost.
    NoImprovement,
    MaxIterations,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub cost: f64,
    pub damping: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: Vec<IterationLog>,
    pub termination: Termination,
}

impl LmReport {
    /// CSV with header `iter,cost,damping`; row 0 is the starting cost.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,cost,damping\n");
        for it in &self.iterations {
            s.push_str(&format!("{},{},{}\n", it.iter, it.cost, it.damping));
        }
        s
    }
}

/// Levenberg–Marquardt with damping `λ·diag(JᵀJ)`.
pub fn optimize(graph: &mut FactorGraph, initial: Values, opts: &LmOptions) -> Result<(Values, LmReport), PgoError> {
    let mut values = initial;
    graph.refresh(&values)?;
    let mut cost = total_cost(graph, &values)?;
    let initial_cost = cost;
    let mut lambda = opts.initial_damping;
    let mut log = vec![IterationLog {
        iter: 0,
        cost,
        damping: lambda,
    }];
    let mut termination = Termination::MaxIterations;

    'outer: for iter in 1..=opts.max_iters {
        if graph.refresh(&values)? {
            cost = total_cost(graph, &values)?;
        }
        let (sys, grad) = linearize(graph, &values)?;
        let scale: Vec<f64> = sys.diagonal().iter().map(|d| d.max(DAMPING_FLOOR)).collect();
        let rhs = DMatrix::from_column_slice(grad.len(), 1, (-&grad).as_slice());
        loop {
            let mut damped = sys.clone();
            damped.add_diagonal(&scale.iter().map(|d| d * lambda).collect::<Vec<_>>());
            let Some(step) = damped.solve(&rhs) else {
                lambda *= 10.0;
                if lambda > MAX_DAMPING {
                    return Err(PgoError::SingularNormalEquations);
                }
                continue;
            };
            let step = step.column(0).into_owned();
            if step.norm() < opts.step_tol {
                termination = Termination::StepConverged;
                break 'outer;
            }
            let candidate = values.retract(&step);
            let new_cost = match total_cost(graph, &candidate) {
                Ok(c) => c,
                Err(PgoError::NonFiniteCost) | Err(PgoError::DegenerateGeometry(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if new_cost < cost {
                let decrease = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                values = candidate;
                cost = new_cost;
                lambda = (lambda / 10.0).max(MIN_DAMPING);
                log.push(IterationLog {
                    iter,
                    cost,
                    damping: lambda,
                });
                if decrease < opts.cost_tol {
                    termination = Termination::CostConverged;
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > MAX_DAMPING {
                termination = Termination::NoImprovement;
                break 'outer;
            }
        }
    }
    if !cost.is_finite() {
        return Err(PgoError::NonFiniteCost);
    }
    Ok((
        values,
        LmReport {
            initial_cost,
            final_cost: cost,
            iterations: log,
            termination,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgoConfig {
    pub keyframe_rate_hz: f64,
    /// Number of keyframes kept in the optimization window.
    pub window: usize,
    pub noise: ImuNoise,
    pub initial: InitialSigmas,
    /// One-sigma range noise per station, in station order.
    pub range_sigma: Vec<f64>,
    pub station_sigma: f64,
    pub lm: LmOptions,
    pub record_timing: bool,
    /// Re-optimize all keyframes at the end.
    pub batch: bool,
}

impl Default for PgoConfig {
    fn default() -> Self {
        Self {
            keyframe_rate_hz: 10.0,
            window: 100,
            noise: ImuNoise::default(),
            initial: InitialSigmas::default(),
            range_sigma: vec![0.2; 5],
            station_sigma: 1e-3,
            lm: LmOptions::default(),
            record_timing: false,
            batch: true,
        }
    }
}

/// Keyframe times and the IMU readings between consecutive keyframes.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub keyframes: Vec<Keyframe>,
    /// `intervals[k]` spans keyframe `k` to `k + 1`.
    pub intervals: Vec<Vec<ImuStep>>,
    /// `(station index, distance)` per keyframe.
    pub ranges: Vec<Vec<(usize, f64)>>,
}

/// Keyframes every `1/rate` seconds from `t0` up to the last IMU sample.
/// IMU readings are held over their sample interval and split at keyframe
/// boundaries; each range goes to the nearest keyframe (ties to the earlier).
pub fn schedule(
    imu: &[ImuSample],
    toa: &[ToaMeasurement],
    stations: &[BaseStation],
    t0: Timestamp,
    rate_hz: f64,
) -> Result<Schedule, PgoError> {
    let start = imu.partition_point(|s| s.t < t0);
    let imu = &imu[start..];
    let Some(last) = imu.last() else {
        return Err(PgoError::EmptyInput);
    };
    let period = (NANOS_PER_SEC / rate_hz).round() as Timestamp;
    let count = ((last.t - t0) / period + 1) as usize;
    let keyframes: Vec<Keyframe> = (0..count)
        .map(|k| Keyframe {
            index: k,
            t: t0 + k as Timestamp * period,
        })
        .collect();
    let mut intervals = vec![Vec::new(); count.saturating_sub(1)];
    let mut push = |a: Timestamp, b: Timestamp, s: &ImuSample| {
        let k = ((a - t0) / period) as usize;
        if k < intervals.len() && b > a {
            let total = (b - a) as f64 / NANOS_PER_SEC;
            let pieces = (total / MAX_DT).ceil().max(1.0) as usize;
            for _ in 0..pieces {
                intervals[k].push(ImuStep {
                    omega: s.omega,
                    accel: s.accel,
                    dt: total / pieces as f64,
                });
            }
        }
    };
    if imu[0].t > t0 {
        push(t0, imu[0].t.min(t0 + period), &imu[0]);
    }
    for w in imu.windows(2) {
        let (a, b) = (w[0].t, w[1].t);
        let mut cursor = a;
        loop {
            let next_kf = t0 + ((cursor - t0) / period + 1) * period;
            if next_kf >= b {
                push(cursor, b, &w[0]);
                break;
            }
            push(cursor, next_kf, &w[0]);
            cursor = next_kf;
        }
    }

    let mut ranges = vec![Vec::new(); count];
    let kf_times: Vec<Timestamp> = keyframes.iter().map(|k| k.t).collect();
    let toa_times: Vec<Timestamp> = toa.iter().map(|m| m.t).collect();
    for a in associate_nearest(&kf_times, &toa_times, period / 2) {
        let m = &toa[a.query];
        let s = stations
            .iter()
            .position(|b| b.id == m.bs_id)
            .ok_or(PgoError::UnknownStation(m.bs_id))?;
        ranges[a.reference].push((s, m.distance));
    }
    Ok(Schedule {
        keyframes,
        intervals,
        ranges,
    })
}

/// Inertial prediction of keyframe `j` from keyframe `i`.
pub fn dead_reckon(si: &NavState, pre: &PreintegratedImu, g: &Vector3<f64>) -> NavState {
    let inc = pre.corrected(&ImuBias::of(si));
    let ri = si.q.to_rot();
    let dt = pre.dt_total;
    NavState {
        q: si.q * crate::geometry::rot_to_quat(&inc.dr),
        v: si.v + g * dt + ri * inc.dv,
        p: si.p + si.v * dt + 0.5 * g * dt * dt + ri * inc.dp,
        ..*si
    }
}

fn first_priors(kf: usize, state: &NavState, sig: &InitialSigmas) -> Result<Vec<Factor>, PgoError> {
    let bad = PgoError::BadCovariance("prior");
    Ok(vec![
        Factor::PriorPose {
            kf,
            rot: state.q.to_rot(),
            p: state.p,
            noise: Gaussian::diagonal(&[sig.attitude, sig.attitude, sig.attitude, sig.position, sig.position, sig.position])
                .ok_or(bad.clone())?,
        },
        Factor::PriorVelocity {
            kf,
            v: state.v,
            noise: Gaussian::diagonal(&[sig.velocity; 3]).ok_or(bad.clone())?,
        },
        Factor::PriorBias {
            kf,
            bias: ImuBias::of(state),
            noise: Gaussian::diagonal(&[
                sig.bias_gyro,
                sig.bias_gyro,
                sig.bias_gyro,
                sig.bias_accel,
                sig.bias_accel,
                sig.bias_accel,
            ])
            .ok_or(bad)?,
        },
    ])
}

fn station_priors(stations: &[BaseStation], sigma: f64) -> Result<Vec<Factor>, PgoError> {
    stations
        .iter()
        .enumerate()
        .map(|(i, b)| {
            Ok(Factor::PriorStation {
                station: i,
                position: b.position,
                noise: Gaussian::diagonal(&[sigma; 3]).ok_or(PgoError::BadCovariance("station prior"))?,
            })
        })
        .collect()
}

fn range_factors(kf: usize, ranges: &[(usize, f64)], config: &PgoConfig) -> Vec<Factor> {
    ranges
        .iter()
        .map(|&(station, distance)| Factor::Range {
            kf,
            station,
            distance,
            sigma: config.range_sigma.get(station).copied().unwrap_or(1.0),
        })
        .collect()
}

/// Full-trajectory graph with dead-reckoned initial values.
pub fn build_graph(
    imu: &[ImuSample],
    toa: &[ToaMeasurement],
    stations: &[BaseStation],
    initial: &NavState,
    t0: Timestamp,
    config: &PgoConfig,
) -> Result<(FactorGraph, Values), PgoError> {
    let sched = schedule(imu, toa, stations, t0, config.keyframe_rate_hz)?;
    let g = gravity();
    let mut factors = first_priors(0, initial, &config.initial)?;
    factors.extend(station_priors(stations, config.station_sigma)?);
    let mut states = vec![*initial];
    for (k, steps) in sched.intervals.iter().enumerate() {
        let f = ImuFactor::new(k, steps.clone(), ImuBias::of(&states[k]), config.noise)?;
        states.push(dead_reckon(&states[k], &f.pre, &g));
        factors.push(Factor::Imu(f));
    }
    for (k, r) in sched.ranges.iter().enumerate() {
        factors.extend(range_factors(k, r, config));
    }
    Ok((
        FactorGraph {
            keyframes: sched.keyframes,
            factors,
            station_ids: stations.iter().map(|b| b.id).collect(),
            gravity: g,
        },
        Values {
            first: 0,
            states,
            stations: stations.iter().map(|b| b.position).collect(),
        },
    ))
}

/// Replaces keyframe `values.first` by Gaussian priors on its successor.
///
/// The factors touching the oldest keyframe are linearized at the current
/// values, the oldest block is eliminated, and the diagonal pose, velocity
/// and bias blocks of the resulting covariance become new priors centred on
/// the successor's current estimate.
fn marginalize_oldest(graph: &mut FactorGraph, values: &mut Values) -> Result<(), PgoError> {
    let k0 = values.first;
    let k1 = k0 + 1;
    let mut h = DMatrix::<f64>::zeros(2 * STATE_DIM, 2 * STATE_DIM);
    for f in graph.factors.iter().filter(|f| f.touches_keyframe(k0)) {
        let (_, blocks) = f.linearize(values, graph)?;
        for (va, ja) in &blocks {
            for (vb, jb) in &blocks {
                if let (Var::Keyframe(a), Var::Keyframe(b)) = (*va, *vb) {
                    let mut view = h.view_mut(((a - k0) * STATE_DIM, (b - k0) * STATE_DIM), (STATE_DIM, STATE_DIM));
                    view += ja.transpose() * jb;
                }
            }
        }
    }
    let h00 = h.view((0, 0), (STATE_DIM, STATE_DIM)).into_owned();
    let h01 = h.view((0, STATE_DIM), (STATE_DIM, STATE_DIM)).into_owned();
    let h11 = h.view((STATE_DIM, STATE_DIM), (STATE_DIM, STATE_DIM)).into_owned();
    let chol = h00.cholesky().ok_or(PgoError::SingularNormalEquations)?;
    let info = h11 - h01.transpose() * chol.solve(&h01);
    let info = 0.5 * (&info + info.transpose());
    let cov = info
        .cholesky()
        .ok_or(PgoError::SingularNormalEquations)?
        .inverse();

    let s1 = *values.state(k1);
    let block = |a: usize, n: usize| {
        let c = cov.view((a, a), (n, n)).into_owned();
        Gaussian::new(0.5 * (&c + c.transpose())).ok_or(PgoError::BadCovariance("marginal prior"))
    };
    let priors = [
        Factor::PriorPose {
            kf: k1,
            rot: s1.q.to_rot(),
            p: s1.p,
            noise: block(idx::THETA, 6)?,
        },
        Factor::PriorVelocity {
            kf: k1,
            v: s1.v,
            noise: block(idx::V, 3)?,
        },
        Factor::PriorBias {
            kf: k1,
            bias: ImuBias::of(&s1),
            noise: block(idx::BG, 6)?,
        },
    ];
    graph.factors.retain(|f| !f.touches_keyframe(k0));
    graph.factors.extend(priors);
    graph.keyframes.remove(0);
    values.states.remove(0);
    values.first = k1;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct PgoRun {
    pub keyframes: Vec<Keyframe>,
    /// Newest keyframe after each window optimization.
    pub streamed: Vec<TrajectoryPoint>,
    /// Final estimate of every keyframe from the batch pass.
    pub batch: Option<Vec<TrajectoryPoint>>,
    pub batch_report: Option<LmReport>,
    /// Wall-clock milliseconds per window step (empty unless timing is on).
    pub step_ms: Vec<f64>,
    /// Latest window estimate of every keyframe.
    pub window_states: Vec<NavState>,
}

impl PgoRun {
    /// Batch output when available, otherwise the streamed output.
    pub fn trajectory(&self) -> &[TrajectoryPoint] {
        self.batch.as_deref().unwrap_or(&self.streamed)
    }
}

/// Incremental estimation: each new keyframe triggers an optimization of
/// the newest `window` keyframes, followed by an optional batch pass.
pub fn run_sliding_window(
    imu: &[ImuSample],
    toa: &[ToaMeasurement],
    stations: &[BaseStation],
    initial: &NavState,
    t0: Timestamp,
    config: &PgoConfig,
) -> Result<PgoRun, PgoError> {
    let sched = schedule(imu, toa, stations, t0, config.keyframe_rate_hz)?;
    let g = gravity();
    let window = config.window.max(2);
    let mut graph = FactorGraph {
        keyframes: vec![sched.keyframes[0]],
        factors: first_priors(0, initial, &config.initial)?,
        station_ids: stations.iter().map(|b| b.id).collect(),
        gravity: g,
    };
    graph.factors.extend(station_priors(stations, config.station_sigma)?);
    graph.factors.extend(range_factors(0, &sched.ranges[0], config));
    let mut values = Values {
        first: 0,
        states: vec![*initial],
        stations: stations.iter().map(|b| b.position).collect(),
    };
    let mut run = PgoRun {
        keyframes: sched.keyframes.clone(),
        ..PgoRun::default()
    };
    let mut latest: Vec<NavState> = Vec::with_capacity(sched.keyframes.len());

    for k in 0..sched.keyframes.len() {
        let started = config.record_timing.then(Instant::now);
        if k > 0 {
            let prev = *values.state(k - 1);
            let f = ImuFactor::new(k - 1, sched.intervals[k - 1].clone(), ImuBias::of(&prev), config.noise)?;
            values.states.push(dead_reckon(&prev, &f.pre, &g));
            graph.factors.push(Factor::Imu(f));
            graph.factors.extend(range_factors(k, &sched.ranges[k], config));
            graph.keyframes.push(sched.keyframes[k]);
            if values.states.len() > window {
                marginalize_oldest(&mut graph, &mut values)?;
            }
        }
        let (opt, _) = optimize(&mut graph, values, &config.lm)?;
        values = opt;
        if let Some(started) = started {
            run.step_ms.push(started.elapsed().as_secs_f64() * 1e3);
        }
        latest.push(*values.state(k));
        for (i, s) in values.states.iter().enumerate() {
            latest[values.first + i] = *s;
        }
        run.streamed.push(values.state(k).to_point(sched.keyframes[k].t));
    }

    if config.batch {
        let (mut full, mut init) = build_graph(imu, toa, stations, initial, t0, config)?;
        init.states.clone_from(&latest);
        init.stations.clone_from(&values.stations);
        let (opt, report) = optimize(&mut full, init, &config.lm)?;
        run.batch = Some(
            opt.states
                .iter()
                .zip(&full.keyframes)
                .map(|(s, kf)| s.to_point(kf.t))
                .collect(),
        );
        run.batch_report = Some(report);
    }
    run.window_states = latest;
    Ok(run)
}
