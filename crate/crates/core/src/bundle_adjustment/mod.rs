//! Joint refinement of keyframe poses and object ellipsoids.
//!
//! Two residual types enter the least-squares problem: odometry between two
//! keyframe poses and the predicted-versus-measured bounding box of an object
//! in a keyframe. Poses are updated as `R ← Exp(δω) R`, `t ← t + δt`; objects
//! as `c ← c + δc`, `R ← Exp(δω) R`, `a ← a ⊙ exp(δl)`. The first pose is held
//! fixed.

pub mod lie;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Matrix4, Matrix6, SMatrix, SVector, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    conic_to_bbox, projection_matrix, quadric_from_ellipsoid, skew, BBox, CameraIntrinsics, DualConic, Ellipsoid,
    GeometryError, ImageBounds, Pose,
};
use lie::{left_jacobian_inverse, so3_exp, so3_log};

pub const POSE_DOF: usize = 6;
pub const OBJECT_DOF: usize = 9;

pub type Matrix4x6 = SMatrix<f64, 4, 6>;
pub type Matrix4x9 = SMatrix<f64, 4, 9>;
pub type Vector9 = SVector<f64, 9>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaError {
    #[error("factor graph has no factors")]
    NoFactors,
    #[error("invalid factor: {0}")]
    InvalidFactor(String),
}

/// Shared stop flag for a running optimization.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryFactor {
    pub from: usize,
    pub to: usize,
    /// Measured `x_to · x_from⁻¹`.
    pub measured: Pose,
    /// Covariance over `[rotation; translation]`.
    pub covariance: Matrix6<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticFactor {
    pub keyframe: usize,
    pub object: usize,
    pub measured: BBox,
    pub covariance: Matrix4<f64>,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorGraph {
    pub odometry: Vec<OdometryFactor>,
    pub semantic: Vec<SemanticFactor>,
}

impl FactorGraph {
    pub fn len(&self) -> usize {
        self.odometry.len() + self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaState {
    pub poses: Vec<Pose>,
    pub objects: Vec<Ellipsoid>,
}

impl BaState {
    /// Number of free coordinates (the first pose is fixed).
    pub fn dim(&self) -> usize {
        POSE_DOF * self.poses.len().saturating_sub(1) + OBJECT_DOF * self.objects.len()
    }

    fn pose_offset(&self, i: usize) -> Option<usize> {
        (i > 0).then(|| POSE_DOF * (i - 1))
    }

    fn object_offset(&self, j: usize) -> usize {
        POSE_DOF * self.poses.len().saturating_sub(1) + OBJECT_DOF * j
    }

    /// Apply a full increment vector.
    pub fn retract(&self, delta: &DVector<f64>) -> BaState {
        let mut out = self.clone();
        for i in 1..self.poses.len() {
            let o = self.pose_offset(i).unwrap();
            out.poses[i] = retract_pose(&self.poses[i], &delta.fixed_rows::<6>(o).into_owned());
        }
        for j in 0..self.objects.len() {
            let o = self.object_offset(j);
            out.objects[j] = retract_ellipsoid(&self.objects[j], &delta.fixed_rows::<9>(o).into_owned());
        }
        out
    }
}

pub fn retract_pose(p: &Pose, delta: &Vector6<f64>) -> Pose {
    let w = delta.fixed_rows::<3>(0).into_owned();
    let t = delta.fixed_rows::<3>(3).into_owned();
    Pose::new(so3_exp(&w) * p.rotation, p.translation + t)
}

/// Increment order: center, rotation vector, log semi-axes.
pub fn retract_ellipsoid(e: &Ellipsoid, delta: &Vector9) -> Ellipsoid {
    let dc = delta.fixed_rows::<3>(0).into_owned();
    let dw = delta.fixed_rows::<3>(3).into_owned();
    let dl = delta.fixed_rows::<3>(6).into_owned();
    Ellipsoid::new(so3_exp(&dw) * e.rotation, e.center + dc, e.semi_axes.component_mul(&dl.map(f64::exp)))
}

/// `log(u⁻¹ · x_to · x_from⁻¹)` as `[rotation vector; translation]`.
pub fn odometry_residual(x_from: &Pose, x_to: &Pose, u: &Pose) -> Vector6<f64> {
    let e = u.inverse().compose(&x_to.compose(&x_from.inverse()));
    let mut r = Vector6::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&so3_log(&e.rotation));
    r.fixed_rows_mut::<3>(3).copy_from(&e.translation);
    r
}

/// Residual and Jacobians with respect to the `from` and `to` pose
/// increments.
pub fn odometry_jacobians(x_from: &Pose, x_to: &Pose, u: &Pose) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
    let r = odometry_residual(x_from, x_to, u);
    let phi = r.fixed_rows::<3>(0).into_owned();
    let jinv = left_jacobian_inverse(&phi);
    let ru_t = u.rotation.transpose();
    let ra = x_to.rotation * x_from.rotation.transpose();
    let w = ra * x_from.translation;

    let mut j_to = Matrix6::zeros();
    j_to.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jinv * ru_t));
    j_to.fixed_view_mut::<3, 3>(3, 0).copy_from(&(ru_t * skew(&w)));
    j_to.fixed_view_mut::<3, 3>(3, 3).copy_from(&ru_t);

    let mut j_from = Matrix6::zeros();
    j_from.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jinv * ru_t * ra));
    j_from.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ru_t * ra * skew(&x_from.translation)));
    j_from.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-ru_t * ra));
    (r, j_from, j_to)
}

fn conic_matrix(p: &Matrix3x4<f64>, q: &Matrix4<f64>) -> Matrix3<f64> {
    let c = p * q * p.transpose();
    0.5 * (c + c.transpose())
}

/// Predicted box minus measured box.
pub fn semantic_residual(
    pose: &Pose,
    k: &CameraIntrinsics,
    e: &Ellipsoid,
    z: &BBox,
    bounds: ImageBounds,
) -> Result<Vector4<f64>, GeometryError> {
    let p = projection_matrix(pose, k);
    let q = quadric_from_ellipsoid(e).matrix();
    let b = conic_to_bbox(&DualConic { matrix: conic_matrix(&p, &q) }, bounds)?;
    Ok(Vector4::from(b.to_array()) - Vector4::from(z.to_array()))
}

/// Semantic residual with its Jacobians for the pose (6) and object (9)
/// increments.
pub fn semantic_jacobians(
    pose: &Pose,
    k: &CameraIntrinsics,
    e: &Ellipsoid,
    z: &BBox,
    bounds: ImageBounds,
) -> Result<(Vector4<f64>, Matrix4x6, Matrix4x9), GeometryError> {
    let p = projection_matrix(pose, k);
    let q = quadric_from_ellipsoid(e).matrix();
    let c = conic_matrix(&p, &q);
    let conic = DualConic { matrix: c };
    let raw = conic_to_bbox(&conic, ImageBounds::Unbounded)?;
    let clipped = conic_to_bbox(&conic, bounds)?;
    let r = Vector4::from(clipped.to_array()) - Vector4::from(z.to_array());

    // implicit derivative of a root s of c_aa - 2 s c_a3 + s² c33 = 0
    let raw_a = raw.to_array();
    let clip_a = clipped.to_array();
    let box_derivative = |dc: &Matrix3<f64>| -> Vector4<f64> {
        let mut out = Vector4::zeros();
        for (slot, &s) in raw_a.iter().enumerate() {
            if clip_a[slot] != s {
                continue;
            }
            let a = if slot % 2 == 0 { 0 } else { 1 };
            let num = dc[(a, a)] - 2.0 * s * dc[(a, 2)] + s * s * dc[(2, 2)];
            let den = 2.0 * (s * c[(2, 2)] - c[(a, 2)]);
            out[slot] = -num / den;
        }
        out
    };

    let km = k.matrix();
    let pq = p * q;
    let mut jp = Matrix4x6::zeros();
    for axis in 0..3 {
        let ek = Vector3::ith(axis, 1.0);
        let mut dp_rot = Matrix3x4::zeros();
        dp_rot.fixed_view_mut::<3, 3>(0, 0).copy_from(&(km * skew(&ek) * pose.rotation));
        let mut dp_t = Matrix3x4::zeros();
        dp_t.fixed_view_mut::<3, 1>(0, 3).copy_from(&(km * ek));
        for (col, dp) in [(axis, dp_rot), (axis + 3, dp_t)] {
            let half = dp * pq.transpose();
            jp.set_column(col, &box_derivative(&(half + half.transpose())));
        }
    }

    let m = e.shape_matrix();
    let mut jo = Matrix4x9::zeros();
    for axis in 0..3 {
        let ek = Vector3::ith(axis, 1.0);
        let mut dq_center = Matrix4::zeros();
        dq_center.fixed_view_mut::<3, 3>(0, 0).copy_from(&-(ek * e.center.transpose() + e.center * ek.transpose()));
        dq_center.fixed_view_mut::<3, 1>(0, 3).copy_from(&-ek);
        dq_center.fixed_view_mut::<1, 3>(3, 0).copy_from(&-ek.transpose());

        let mut dq_rot = Matrix4::zeros();
        let sk = skew(&ek);
        dq_rot.fixed_view_mut::<3, 3>(0, 0).copy_from(&(sk * m - m * sk));

        let mut dq_axis = Matrix4::zeros();
        let mut d = Matrix3::zeros();
        d[(axis, axis)] = 2.0 * e.semi_axes[axis] * e.semi_axes[axis];
        dq_axis.fixed_view_mut::<3, 3>(0, 0).copy_from(&(e.rotation * d * e.rotation.transpose()));

        for (col, dq) in [(axis, dq_center), (axis + 3, dq_rot), (axis + 6, dq_axis)] {
            jo.set_column(col, &box_derivative(&(p * dq * p.transpose())));
        }
    }
    Ok((r, jp, jo))
}

/// Whitening factor `L⁻¹` for a covariance `Σ = L Lᵀ`.
fn whitener<const N: usize>(cov: &SMatrix<f64, N, N>) -> Option<SMatrix<f64, N, N>> {
    let sym = 0.5 * (cov + cov.transpose());
    let l = sym.cholesky()?.l();
    l.try_inverse()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub total: f64,
    pub odometry: f64,
    pub semantic: f64,
    /// Semantic factors whose conic was not a visible ellipse.
    pub skipped: usize,
}

/// Sum of squared Mahalanobis norms of all residuals.
pub fn total_cost(graph: &FactorGraph, state: &BaState) -> CostBreakdown {
    let mut out = CostBreakdown::default();
    for f in &graph.odometry {
        let r = odometry_residual(&state.poses[f.from], &state.poses[f.to], &f.measured);
        out.odometry += mahalanobis(&f.covariance, &r);
    }
    for f in &graph.semantic {
        match semantic_residual(
            &state.poses[f.keyframe],
            &f.intrinsics,
            &state.objects[f.object],
            &f.measured,
            f.intrinsics.bounds(),
        ) {
            Ok(r) => out.semantic += mahalanobis(&f.covariance, &r),
            Err(_) => out.skipped += 1,
        }
    }
    out.total = out.odometry + out.semantic;
    out
}

fn mahalanobis<const N: usize>(cov: &SMatrix<f64, N, N>, r: &SVector<f64, N>) -> f64 {
    match whitener(cov) {
        Some(w) => (w * r).norm_squared(),
        None => f64::INFINITY,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub max_iters: usize,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_damping: f64,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub min_relative_decrease: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            initial_damping: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 0.5,
            max_damping: 1e12,
            min_relative_decrease: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
    Cancelled,
    /// Damping grew past its limit without finding a decrease.
    Stalled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub damping: f64,
    pub accepted: bool,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
    pub cancelled: bool,
    pub odometry_factors: usize,
    pub semantic_factors: usize,
    /// Always zero: under uniform priors the only extra constraint is the
    /// fixed first pose.
    pub prior_factors: usize,
    pub skipped_factors: usize,
}

fn validate(graph: &FactorGraph, state: &BaState) -> Result<(), BaError> {
    if graph.is_empty() {
        return Err(BaError::NoFactors);
    }
    for (n, f) in graph.odometry.iter().enumerate() {
        if f.from >= state.poses.len() || f.to >= state.poses.len() {
            return Err(BaError::InvalidFactor(format!("odometry {n} references a missing pose")));
        }
        if whitener(&f.covariance).is_none() {
            return Err(BaError::InvalidFactor(format!("odometry {n} covariance is not SPD")));
        }
    }
    for (n, f) in graph.semantic.iter().enumerate() {
        if f.keyframe >= state.poses.len() || f.object >= state.objects.len() {
            return Err(BaError::InvalidFactor(format!("semantic {n} references a missing variable")));
        }
        if whitener(&f.covariance).is_none() {
            return Err(BaError::InvalidFactor(format!("semantic {n} covariance is not SPD")));
        }
    }
    Ok(())
}

fn add_block(h: &mut DMatrix<f64>, r0: usize, c0: usize, block: &DMatrix<f64>) {
    let mut view = h.view_mut((r0, c0), (block.nrows(), block.ncols()));
    view += block;
}

/// Gauss-Newton system `H = JᵀJ`, `g = Jᵀr` in whitened coordinates.
fn linearize(graph: &FactorGraph, state: &BaState) -> (DMatrix<f64>, DVector<f64>) {
    let n = state.dim();
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut accumulate = |blocks: &[(Option<usize>, DMatrix<f64>)], r: &DVector<f64>| {
        for (oa, ja) in blocks {
            let Some(a) = *oa else { continue };
            let gb = ja.transpose() * r;
            let mut gv = g.rows_mut(a, gb.len());
            gv += &gb;
            for (ob, jb) in blocks {
                let Some(b) = *ob else { continue };
                add_block(&mut h, a, b, &(ja.transpose() * jb));
            }
        }
    };
    for f in &graph.odometry {
        let w = whitener(&f.covariance).unwrap();
        let (r, jf, jt) = odometry_jacobians(&state.poses[f.from], &state.poses[f.to], &f.measured);
        let r = DVector::from_column_slice((w * r).as_slice());
        let jf = DMatrix::from_column_slice(6, 6, (w * jf).as_slice());
        let jt = DMatrix::from_column_slice(6, 6, (w * jt).as_slice());
        accumulate(&[(state.pose_offset(f.from), jf), (state.pose_offset(f.to), jt)], &r);
    }
    for f in &graph.semantic {
        let w = whitener(&f.covariance).unwrap();
        let Ok((r, jp, jo)) = semantic_jacobians(
            &state.poses[f.keyframe],
            &f.intrinsics,
            &state.objects[f.object],
            &f.measured,
            f.intrinsics.bounds(),
        ) else {
            continue;
        };
        let r = DVector::from_column_slice((w * r).as_slice());
        let jp = DMatrix::from_column_slice(4, 6, (w * jp).as_slice());
        let jo = DMatrix::from_column_slice(4, 9, (w * jo).as_slice());
        accumulate(&[(state.pose_offset(f.keyframe), jp), (Some(state.object_offset(f.object)), jo)], &r);
    }
    (h, g)
}

pub fn optimize(
    graph: &FactorGraph,
    initial: &BaState,
    cfg: &LmConfig,
    cancel: &CancelToken,
) -> Result<(BaState, BaReport), BaError> {
    optimize_with_observer(graph, initial, cfg, cancel, &mut |_| {})
}

/// Levenberg-Marquardt with Marquardt diagonal scaling. A step is accepted
/// only if it lowers the cost without dropping additional factors.
/// `observer` sees every iteration record as it is produced.
pub fn optimize_with_observer(
    graph: &FactorGraph,
    initial: &BaState,
    cfg: &LmConfig,
    cancel: &CancelToken,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<(BaState, BaReport), BaError> {
    validate(graph, initial)?;
    let mut state = initial.clone();
    let mut cost = total_cost(graph, &state);
    let mut report = BaReport {
        initial_cost: cost.total,
        final_cost: cost.total,
        iterations: Vec::new(),
        termination: Termination::MaxIterations,
        cancelled: false,
        odometry_factors: graph.odometry.len(),
        semantic_factors: graph.semantic.len(),
        prior_factors: 0,
        skipped_factors: cost.skipped,
    };
    let mut damping = cfg.initial_damping;
    let dim = state.dim();

    for iteration in 1..=cfg.max_iters {
        if cancel.is_cancelled() {
            report.cancelled = true;
            report.termination = Termination::Cancelled;
            break;
        }
        if dim == 0 || cost.total == 0.0 {
            report.termination = Termination::Converged;
            break;
        }
        let (h, g) = linearize(graph, &state);
        let floor = 1e-12 * h.diagonal().amax().max(1.0);
        let mut accepted = None;
        while damping <= cfg.max_damping {
            let mut damped = h.clone();
            for i in 0..dim {
                damped[(i, i)] += damping * (h[(i, i)] + floor);
            }
            if let Some(chol) = damped.cholesky() {
                let delta = -chol.solve(&g);
                let candidate = state.retract(&delta);
                let c = total_cost(graph, &candidate);
                if c.total.is_finite() && c.total < cost.total && c.skipped <= cost.skipped {
                    accepted = Some((candidate, c));
                    break;
                }
            }
            damping *= cfg.damping_increase;
        }
        let Some((candidate, c)) = accepted else {
            let rec = IterationRecord { iteration, cost: cost.total, damping, accepted: false, skipped: cost.skipped };
            observer(&rec);
            report.iterations.push(rec);
            report.termination = Termination::Stalled;
            break;
        };
        let decrease = (cost.total - c.total) / cost.total;
        state = candidate;
        cost = c;
        let rec = IterationRecord { iteration, cost: cost.total, damping, accepted: true, skipped: cost.skipped };
        damping = (damping * cfg.damping_decrease).max(1e-15);
        observer(&rec);
        report.iterations.push(rec);
        if decrease < cfg.min_relative_decrease {
            report.termination = Termination::Converged;
            break;
        }
    }
    report.final_cost = cost.total;
    report.skipped_factors = cost.skipped;
    Ok((state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480)
    }

    fn rand_vec(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s))
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        Pose::from_parts(rand_vec(rng, 1.5), rand_vec(rng, 2.0))
    }

    fn viewing_pose(rng: &mut impl Rng, target: &Vector3<f64>) -> Pose {
        let eye = target + rand_vec(rng, 1.0) + Vector3::new(0.0, -2.5, 0.8);
        let p = Pose::look_at(eye, target + rand_vec(rng, 0.05), Vector3::z());
        Pose::new(so3_exp(&rand_vec(rng, 0.05)) * p.rotation, p.translation)
    }

    fn random_object(rng: &mut impl Rng) -> Ellipsoid {
        Ellipsoid::new(
            so3_exp(&rand_vec(rng, 3.0)),
            rand_vec(rng, 0.3),
            Vector3::new(rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3)),
        )
    }

    fn sphere_box(pose: &Pose, e: &Ellipsoid) -> BBox {
        let c = DualConic {
            matrix: conic_matrix(&projection_matrix(pose, &intrinsics()), &quadric_from_ellipsoid(e).matrix()),
        };
        conic_to_bbox(&c, intrinsics().bounds()).unwrap()
    }

    #[test]
    fn odometry_residual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random_pose(&mut rng);
            let u = random_pose(&mut rng);
            assert!(odometry_residual(&x, &u.compose(&x), &u).norm() < 1e-10);
        }
        let shifted = Pose::new(Matrix3::identity(), Vector3::new(0.1, 0.0, 0.0));
        let r = odometry_residual(&Pose::identity(), &shifted, &Pose::identity());
        assert_relative_eq!(r, Vector6::new(0.0, 0.0, 0.0, 0.1, 0.0, 0.0), epsilon = 1e-15);
    }

    fn central<const R: usize, const C: usize>(f: impl Fn(&SVector<f64, C>) -> SVector<f64, R>) -> SMatrix<f64, R, C> {
        let mut j = SMatrix::<f64, R, C>::zeros();
        for k in 0..C {
            let mut d = SVector::<f64, C>::zeros();
            d[k] = 1e-6;
            j.set_column(k, &((f(&d) - f(&-d)) / 2e-6));
        }
        j
    }

    fn close<const R: usize, const C: usize>(a: &SMatrix<f64, R, C>, b: &SMatrix<f64, R, C>) -> bool {
        (a - b).norm() <= 1e-4 * b.norm().max(1e-6)
    }

    #[test]
    fn odometry_jacobians_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (a, b, u) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            let (_, jf, jt) = odometry_jacobians(&a, &b, &u);
            let nf = central(|d: &Vector6<f64>| odometry_residual(&retract_pose(&a, d), &b, &u));
            let nt = central(|d: &Vector6<f64>| odometry_residual(&a, &retract_pose(&b, d), &u));
            assert!(close(&jf, &nf), "{jf}\n{nf}");
            assert!(close(&jt, &nt), "{jt}\n{nt}");
        }
    }

    #[test]
    fn semantic_jacobians_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = intrinsics();
        let mut checked = 0;
        while checked < 50 {
            let e = random_object(&mut rng);
            let pose = viewing_pose(&mut rng, &e.center);
            let z = BBox::new(100.0, 100.0, 300.0, 260.0);
            let Ok((_, jp, jo)) = semantic_jacobians(&pose, &k, &e, &z, ImageBounds::Unbounded) else { continue };
            let res = |p: &Pose, e: &Ellipsoid| semantic_residual(p, &k, e, &z, ImageBounds::Unbounded).unwrap();
            let np = central(|d: &Vector6<f64>| res(&retract_pose(&pose, d), &e));
            let no = central(|d: &Vector9| res(&pose, &retract_ellipsoid(&e, d)));
            assert!(close(&jp, &np), "{jp}\n{np}");
            assert!(close(&jo, &no), "{jo}\n{no}");
            checked += 1;
        }
    }

    #[test]
    fn clipped_coordinates_have_zero_derivative() {
        let k = intrinsics();
        let e = Ellipsoid::sphere(Vector3::new(0.0, 0.0, 0.0), 0.2);
        let pose = Pose::look_at(Vector3::new(0.5, -0.6, 0.0), Vector3::new(0.0, 0.0, 0.0), Vector3::z());
        let pose = Pose::new(pose.rotation, pose.translation + Vector3::new(-0.4, 0.0, 0.0));
        let (_, jp, jo) = semantic_jacobians(&pose, &k, &e, &BBox::new(0.0, 0.0, 10.0, 10.0), k.bounds()).unwrap();
        let raw = conic_to_bbox(
            &DualConic { matrix: conic_matrix(&projection_matrix(&pose, &k), &quadric_from_ellipsoid(&e).matrix()) },
            ImageBounds::Unbounded,
        )
        .unwrap();
        assert!(raw.xmin < 0.0, "scene should clip the left edge");
        assert_eq!(jp.row(0).norm(), 0.0);
        assert_eq!(jo.row(0).norm(), 0.0);
        assert!(jo.row(2).norm() > 0.0);
    }

    #[test]
    fn semantic_residual_examples() {
        let k = intrinsics();
        let pose = Pose::look_at(Vector3::new(0.0, -2.0, 0.3), Vector3::zeros(), Vector3::z());
        let e = Ellipsoid::sphere(Vector3::zeros(), 0.2);
        let z = sphere_box(&pose, &e);
        assert!(semantic_residual(&pose, &k, &e, &z, k.bounds()).unwrap().norm() < 1e-9);
        let big = Ellipsoid::sphere(Vector3::zeros(), 0.25);
        let r = semantic_residual(&pose, &k, &big, &z, k.bounds()).unwrap();
        assert!(r[0] < 0.0 && r[1] < 0.0 && r[2] > 0.0 && r[3] > 0.0);
    }

    /// Two keyframes, one object.
    fn toy() -> (FactorGraph, BaState) {
        let k = intrinsics();
        let e = Ellipsoid::new(
            so3_exp(&Vector3::new(0.1, 0.2, 0.3)),
            Vector3::new(0.0, 0.1, 0.0),
            Vector3::new(0.2, 0.15, 0.1),
        );
        let p0 = Pose::look_at(Vector3::new(0.2, -2.0, 0.4), Vector3::zeros(), Vector3::z());
        let p1 = Pose::look_at(Vector3::new(1.0, -1.8, 0.5), Vector3::zeros(), Vector3::z());
        let graph = FactorGraph {
            odometry: vec![OdometryFactor {
                from: 0,
                to: 1,
                measured: p1.compose(&p0.inverse()),
                covariance: Matrix6::from_diagonal(&Vector6::new(1e-4, 1e-4, 1e-4, 4e-4, 4e-4, 4e-4)),
            }],
            semantic: [p0, p1]
                .iter()
                .enumerate()
                .map(|(i, p)| SemanticFactor {
                    keyframe: i,
                    object: 0,
                    measured: sphere_box(p, &e),
                    covariance: Matrix4::identity() * 16.0,
                    intrinsics: k,
                })
                .collect(),
        };
        (graph, BaState { poses: vec![p0, p1], objects: vec![e] })
    }

    #[test]
    fn cost_matches_hand_sum() {
        let (mut graph, mut state) = toy();
        state.poses[1] = retract_pose(&state.poses[1], &Vector6::new(0.01, 0.0, -0.02, 0.03, 0.0, 0.01));
        state.objects[0].semi_axes *= 1.1;
        graph.semantic[1].covariance = Matrix4::from_diagonal(&Vector4::new(4.0, 9.0, 16.0, 25.0));
        let mut expected = 0.0;
        let r = odometry_residual(&state.poses[0], &state.poses[1], &graph.odometry[0].measured);
        let var = [1e-4, 1e-4, 1e-4, 4e-4, 4e-4, 4e-4];
        for i in 0..6 {
            expected += r[i] * r[i] / var[i];
        }
        for (n, f) in graph.semantic.iter().enumerate() {
            let r = semantic_residual(
                &state.poses[n],
                &f.intrinsics,
                &state.objects[0],
                &f.measured,
                f.intrinsics.bounds(),
            )
            .unwrap();
            for i in 0..4 {
                expected += r[i] * r[i] / f.covariance[(i, i)];
            }
        }
        let c = total_cost(&graph, &state);
        assert_relative_eq!(c.total, expected, max_relative = 1e-12);

        let before = c.semantic;
        for f in &mut graph.semantic {
            f.covariance *= 2.0;
        }
        assert_relative_eq!(total_cost(&graph, &state).semantic, before / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn ground_truth_is_optimal() {
        let (graph, state) = toy();
        let c = total_cost(&graph, &state);
        assert!(c.total < 1e-9);
        let (_, report) = optimize(&graph, &state, &LmConfig::default(), &CancelToken::new()).unwrap();
        assert!(report.iterations.len() <= 2);
        assert!(report.final_cost <= 1e-9);
        assert_eq!(report.prior_factors, 0);
    }

    #[test]
    fn recovers_perturbed_state() {
        let (graph, truth) = toy();
        let mut state = truth.clone();
        state.poses[1] = retract_pose(&state.poses[1], &Vector6::new(0.02, -0.01, 0.01, 0.05, -0.03, 0.02));
        state.objects[0] = retract_ellipsoid(
            &state.objects[0],
            &Vector9::from_column_slice(&[0.05, -0.04, 0.03, 0.1, 0.0, -0.1, 0.2, -0.1, 0.1]),
        );
        let mut accepted = Vec::new();
        let (out, report) = optimize_with_observer(
            &graph,
            &state,
            &LmConfig { max_iters: 200, ..LmConfig::default() },
            &CancelToken::new(),
            &mut |r| {
                if r.accepted {
                    accepted.push(r.cost)
                }
            },
        )
        .unwrap();
        assert!(report.final_cost < 1e-6 * report.initial_cost, "{report:?}");
        assert!(accepted.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(out.poses[0], state.poses[0]);
        assert!(out.poses.iter().all(|p| p.is_valid(1e-9)));
        assert!(out.objects.iter().all(|e| e.is_valid()));
    }

    #[test]
    fn cancellation_stops_at_iteration_boundary() {
        let (graph, truth) = toy();
        let mut state = truth.clone();
        state.poses[1] = retract_pose(&state.poses[1], &Vector6::new(0.05, 0.0, 0.0, 0.1, 0.0, 0.0));
        let token = CancelToken::new();
        let t2 = token.clone();
        let (_, report) = optimize_with_observer(&graph, &state, &LmConfig::default(), &token, &mut |r| {
            if r.iteration == 1 {
                t2.cancel()
            }
        })
        .unwrap();
        assert!(report.cancelled);
        assert_eq!(report.termination, Termination::Cancelled);
        assert_eq!(report.iterations.len(), 1);
        assert!(report.final_cost <= report.initial_cost);
    }

    #[test]
    fn rejects_bad_inputs() {
        let state = BaState { poses: vec![Pose::identity()], objects: vec![] };
        assert_eq!(
            optimize(&FactorGraph::default(), &state, &LmConfig::default(), &CancelToken::new()).unwrap_err(),
            BaError::NoFactors
        );
        let (mut graph, state) = toy();
        graph.semantic[0].covariance = Matrix4::zeros();
        assert!(matches!(
            optimize(&graph, &state, &LmConfig::default(), &CancelToken::new()),
            Err(BaError::InvalidFactor(_))
        ));
    }
}
