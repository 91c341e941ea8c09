//! Object initialization: fit a dual quadric to the box edges of its
//! observations, either by a constrained QP or by the unconstrained SVD
//! null-vector baseline, then validate and extract the ellipsoid.

mod qp;

use nalgebra::{DMatrix, DVector, Matrix3x4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use qp::{kkt_report, solve_qp, KktReport, LinearConstraint, QpError, QpProblem, QpSolution};

use crate::geometry::{
    camera_frame_geometry, coefficient_row, conic_to_bbox, ellipsoid_from_quadric, project_quadric, projection_matrix,
    tangent_planes_from_bbox, BBox, CameraIntrinsics, DualQuadric, Ellipsoid, Pose,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub bbox: BBox,
}

impl Observation {
    pub fn projection(&self) -> Matrix3x4<f64> {
        projection_matrix(&self.pose, &self.intrinsics)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub observations: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(observations: Vec<Observation>) -> Self {
        Self { observations }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Largest angle (radians) between any two viewing rays towards `point`.
    pub fn parallax(&self, point: &nalgebra::Vector3<f64>) -> f64 {
        let rays: Vec<_> = self.observations.iter().map(|o| (point - o.pose.center()).normalize()).collect();
        let mut best: f64 = 0.0;
        for (i, a) in rays.iter().enumerate() {
            for b in &rays[i + 1..] {
                best = best.max(a.dot(b).clamp(-1.0, 1.0).acos());
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitializerConfig {
    pub min_obs: usize,
    /// Lower bound on the projective depth of the center in every view.
    pub depth_margin: f64,
    /// Ridge factor: `λ = factor · trace(H) / 9`.
    pub regularization_factor: f64,
    pub constraint_tol: f64,
    pub max_reprojection_px: f64,
    /// Minimum ratio of the 9th to the 1st singular value of `A`.
    pub min_rank_ratio: f64,
}

impl Default for InitializerConfig {
    fn default() -> Self {
        Self {
            min_obs: 10,
            depth_margin: 1e-6,
            regularization_factor: 1e-9,
            constraint_tol: 1e-6,
            max_reprojection_px: 100.0,
            min_rank_ratio: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitMethod {
    Quadratic,
    Svd,
}

impl InitMethod {
    pub fn name(&self) -> &'static str {
        match self {
            InitMethod::Quadratic => "Quadratic",
            InitMethod::Svd => "SVD",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error, Serialize)]
pub enum InitError {
    #[error("{found} observations, at least {required} required")]
    TooFewObservations { found: usize, required: usize },
    #[error("homogeneous solution has a vanishing scale coordinate")]
    DegenerateScale,
    #[error("observations do not constrain the quadric (no parallax)")]
    DegenerateGeometry,
    #[error("quadratic program failed: {0}")]
    Qp(#[from] QpError),
    #[error("validation failed: {0}")]
    Invalid(#[from] ValidationFailure),
}

#[derive(Debug, Clone, Copy, PartialEq, Error, Serialize)]
pub enum ValidationFailure {
    #[error("quadric is not an ellipsoid")]
    NotAnEllipsoid,
    #[error("constraint row {row} violated by {amount}")]
    ConstraintViolated { row: usize, amount: f64 },
    #[error("projection failed in observation {observation}")]
    Projection { observation: usize },
    #[error("average reprojection error {0} px exceeds the limit")]
    ReprojectionError(f64),
}

/// Stacked tangency rows (unit-norm planes) and the QP objective they induce.
///
/// For `B = AᵀA = [[B99, B91], [B19, B11]]` the objective is
/// `½ q̂ᵀ B99 q̂ - B91ᵀ q̂`, which equals `½|A[q̂; -1]|² - ½ B11`.
pub fn assemble_system(obs: &ObservationSet, min_obs: usize) -> Result<(DMatrix<f64>, QpProblem), InitError> {
    if obs.len() < min_obs || obs.is_empty() {
        return Err(InitError::TooFewObservations { found: obs.len(), required: min_obs.max(1) });
    }
    let a = design_matrix(obs);
    let b = a.transpose() * &a;
    let h = b.view((0, 0), (9, 9)).into_owned();
    let f = -b.view((0, 9), (9, 1)).column(0).into_owned();
    let mut p = QpProblem::new(h, f);
    p.regularization = InitializerConfig::default().regularization_factor * p.h.trace() / 9.0;
    Ok((a, p))
}

fn design_matrix(obs: &ObservationSet) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(4 * obs.len(), 10);
    for (i, o) in obs.observations.iter().enumerate() {
        for (j, plane) in tangent_planes_from_bbox(&o.bbox, &o.projection()).iter().enumerate() {
            let row = coefficient_row(&plane.normalized());
            for (c, v) in row.iter().enumerate() {
                a[(4 * i + j, c)] = *v;
            }
        }
    }
    a
}

/// Linear map from `q̂` to the quadric center `-[q̂4, q̂7, q̂9]`, applied to a
/// 4-vector `w` acting on `[center; 1]`: returns `(g, c)` with
/// `w·[center; 1] = g·q̂ + c`.
fn center_functional(w: &Vector4<f64>) -> (DVector<f64>, f64) {
    let mut g = DVector::zeros(9);
    g[3] = -w[0];
    g[6] = -w[1];
    g[8] = -w[2];
    (g, w[3])
}

/// Constraint rows `g·q̂ ≤ h` (unit-norm `g`): per observation the
/// in-front-of-camera row, the principal-plane row, a positive-depth row
/// and the four center-in-box rows.
pub fn build_constraints(obs: &ObservationSet, depth_margin: f64) -> Vec<LinearConstraint> {
    let mut rows = Vec::with_capacity(7 * obs.len());
    for o in &obs.observations {
        let (center, axis, principal) = camera_frame_geometry(&o.pose);

        // (o_τ - o_K)·z ≥ 0  ⇔  -z·o_τ ≤ -z·o_K
        let (g, c) = center_functional(&Vector4::new(-axis.x, -axis.y, -axis.z, 0.0));
        rows.push(LinearConstraint::new(g, -axis.dot(&center) - c).normalized());

        // Π_Kᵀ Q* Π_K ≤ 0, the fixed (4,4) = -1 moved to the right-hand side
        let coeffs = coefficient_row(&principal.normalized());
        let g = DVector::from_column_slice(&coeffs[..9]);
        rows.push(LinearConstraint::new(g, coeffs[9]).normalized());

        // [u, v, w] = P [o_τ; 1]
        let p = o.projection();
        let row = |r: usize| Vector4::new(p[(r, 0)], p[(r, 1)], p[(r, 2)], p[(r, 3)]);
        let (pu, pv, pw) = (row(0), row(1), row(2));
        // w ≥ ε
        let (g, c) = center_functional(&(-pw));
        rows.push(LinearConstraint::new(g, -depth_margin - c).normalized());
        let b = &o.bbox;
        for w in [pu - pw * b.xmax, pw * b.xmin - pu, pv - pw * b.ymax, pw * b.ymin - pv] {
            let (g, c) = center_functional(&w);
            rows.push(LinearConstraint::new(g, -c).normalized());
        }
    }
    rows
}

fn check_rank(a: &DMatrix<f64>, min_ratio: f64) -> Result<(), InitError> {
    let sv = a.clone().singular_values();
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    if s.len() < 9 || s[0] <= 0.0 || s[8] / s[0] < min_ratio {
        return Err(InitError::DegenerateGeometry);
    }
    Ok(())
}

/// Null vector of `A` (smallest right singular vector) scaled so that the
/// 10th coordinate is -1.
pub fn svd_init(a: &DMatrix<f64>) -> Result<DualQuadric, InitError> {
    let mut m = a.clone();
    let rows = m.nrows();
    if rows < 10 {
        m = m.insert_rows(rows, 10 - rows, 0.0);
    }
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let (idx, _) = svd.singular_values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
    let v = v_t.row(idx);
    if v[9].abs() < 1e-12 {
        return Err(InitError::DegenerateScale);
    }
    let s = -1.0 / v[9];
    let mut qhat = [0.0; 9];
    for (i, q) in qhat.iter_mut().enumerate() {
        *q = v[i] * s;
    }
    Ok(DualQuadric::new(qhat))
}

/// Mean over observations of the mean absolute box-coordinate difference
/// between the projected quadric and the observed box.
pub fn average_reprojection_error(q: &DualQuadric, obs: &ObservationSet) -> Result<f64, ValidationFailure> {
    if obs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, o) in obs.observations.iter().enumerate() {
        let predicted = conic_to_bbox(&project_quadric(&o.projection(), q), o.intrinsics.bounds())
            .map_err(|_| ValidationFailure::Projection { observation: i })?;
        total += predicted.mean_abs_diff(&o.bbox);
    }
    Ok(total / obs.len() as f64)
}

/// Accept a quadric when it is an ellipsoid, satisfies every constraint row
/// and reprojects within the pixel limit. Returns the reprojection error.
pub fn validate_quadric(
    q: &DualQuadric,
    obs: &ObservationSet,
    cfg: &InitializerConfig,
) -> Result<f64, ValidationFailure> {
    ellipsoid_from_quadric(q).map_err(|_| ValidationFailure::NotAnEllipsoid)?;
    let x = DVector::from_column_slice(&q.qhat);
    for (row, c) in build_constraints(obs, cfg.depth_margin).iter().enumerate() {
        let amount = c.violation(&x);
        if amount > cfg.constraint_tol {
            return Err(ValidationFailure::ConstraintViolated { row, amount });
        }
    }
    let err = average_reprojection_error(q, obs)?;
    if err > cfg.max_reprojection_px {
        return Err(ValidationFailure::ReprojectionError(err));
    }
    Ok(err)
}

/// Solve for the quadric with the chosen method, without validation.
pub fn estimate_quadric(
    obs: &ObservationSet,
    method: InitMethod,
    cfg: &InitializerConfig,
) -> Result<DualQuadric, InitError> {
    let (a, mut problem) = assemble_system(obs, cfg.min_obs)?;
    check_rank(&a, cfg.min_rank_ratio)?;
    match method {
        InitMethod::Svd => svd_init(&a),
        InitMethod::Quadratic => {
            problem.regularization = cfg.regularization_factor * problem.h.trace() / 9.0;
            problem.constraints = build_constraints(obs, cfg.depth_margin);
            let s = solve_qp(&problem)?;
            let mut qhat = [0.0; 9];
            qhat.copy_from_slice(s.x.as_slice());
            Ok(DualQuadric::new(qhat))
        }
    }
}

/// Full initialization: estimate, validate, extract the ellipsoid.
pub fn initialize_object(
    obs: &ObservationSet,
    method: InitMethod,
    cfg: &InitializerConfig,
) -> Result<Ellipsoid, InitError> {
    let q = estimate_quadric(obs, method, cfg)?;
    validate_quadric(&q, obs, cfg)?;
    ellipsoid_from_quadric(&q).map_err(|_| InitError::Invalid(ValidationFailure::NotAnEllipsoid))
}

/// Diagnostic dump of one initialization problem.
#[derive(Debug, Clone, Serialize)]
pub struct InitDiagnostics {
    pub design_matrix: Vec<Vec<f64>>,
    pub constraints: Vec<LinearConstraint>,
    pub solution: Option<Vec<f64>>,
    pub kkt: Option<KktReport>,
    pub error: Option<String>,
}

pub fn diagnostics(obs: &ObservationSet, cfg: &InitializerConfig) -> InitDiagnostics {
    let mut d = InitDiagnostics {
        design_matrix: Vec::new(),
        constraints: build_constraints(obs, cfg.depth_margin),
        solution: None,
        kkt: None,
        error: None,
    };
    match assemble_system(obs, 1) {
        Ok((a, mut p)) => {
            d.design_matrix = a.row_iter().map(|r| r.iter().copied().collect()).collect();
            p.regularization = cfg.regularization_factor * p.h.trace() / 9.0;
            p.constraints = d.constraints.clone();
            match solve_qp(&p) {
                Ok(s) => {
                    d.solution = Some(s.x.iter().copied().collect());
                    d.kkt = Some(s.kkt);
                }
                Err(e) => d.error = Some(e.to_string()),
            }
        }
        Err(e) => d.error = Some(e.to_string()),
    }
    d
}
