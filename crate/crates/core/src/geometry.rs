//! Projective and quadric geometry.
//!
//! Conventions used throughout the crate:
//!
//! * A [`Pose`] maps world coordinates into the camera frame, `X_c = R X_w + t`.
//! * Planes are 4-vectors `Π` with `Π·[X; 1] = 0` for points `X` on the plane.
//! * A dual quadric `Q*` is a symmetric 4×4 matrix whose (4,4) element is
//!   fixed to `-1`. It is stored as the 9 remaining independent elements in
//!   row-major upper-triangular order: `Q11 Q12 Q13 Q14 Q22 Q23 Q24 Q33 Q34`.
//! * An ellipsoid with rotation `R`, center `t` and semi-axes `(a, b, c)` has
//!   `Q* = [[R diag(a², b², c²) Rᵀ - t tᵀ, -t], [-tᵀ, -1]]`, so the center is
//!   `-[q4, q7, q9]`.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Rotation3, SymmetricEigen, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Eigenvalue floor below which a quadric is not treated as an ellipsoid.
pub const ELLIPSOID_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("dual conic does not describe a real ellipse")]
    NotAnEllipse,
    #[error("projected conic lies entirely outside the image")]
    OffImage,
    #[error("quadric is not an ellipsoid")]
    NotAnEllipsoid,
    #[error("camera baseline is degenerate")]
    DegenerateBaseline,
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    /// Pose from a rotation vector (axis·angle) and a translation.
    pub fn from_parts(rotation_vector: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(Rotation3::from_scaled_axis(rotation_vector).into_inner(), translation)
    }

    /// World-to-camera pose of a camera at `eye` looking at `target`.
    ///
    /// The camera y-axis points as close to `-up` as possible (image rows grow
    /// downward).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::x());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::new(rotation, -rotation * eye)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -rt * self.translation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    /// Re-orthonormalize the rotation (used after long chains of compositions).
    pub fn renormalized(&self) -> Pose {
        let r = Rotation3::from_matrix_eps(&self.rotation, 1e-12, 100, Rotation3::identity());
        Pose::new(r.into_inner(), self.translation)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        (rtr - Matrix3::identity()).amax() <= tol && (self.rotation.determinant() - 1.0).abs() <= tol
    }
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self { fx, fy, cx, cy, width, height }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(1.0 / self.fx, 0.0, -self.cx / self.fx, 0.0, 1.0 / self.fy, -self.cy / self.fy, 0.0, 0.0, 1.0)
    }

    pub fn bounds(&self) -> ImageBounds {
        ImageBounds::Bounded { width: self.width as f64, height: self.height as f64 }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0 && self.fy > 0.0 && self.width > 0 && self.height > 0
    }
}

/// Axis-aligned pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn is_valid(&self) -> bool {
        self.xmin < self.xmax && self.ymin < self.ymax
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.xmin && p.x <= self.xmax && p.y >= self.ymin && p.y <= self.ymax
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Mean absolute difference of the four coordinates.
    pub fn mean_abs_diff(&self, other: &BBox) -> f64 {
        self.to_array().iter().zip(other.to_array().iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0
    }
}

/// Image extent used for clipping predicted boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImageBounds {
    Unbounded,
    Bounded { width: f64, height: f64 },
}

/// Plane `Π` in general form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub coeffs: Vector4<f64>,
}

impl Plane {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { coeffs: Vector4::new(a, b, c, d) }
    }

    pub fn from_vector(coeffs: Vector4<f64>) -> Self {
        Self { coeffs }
    }

    /// Same plane with unit-norm coefficient vector.
    pub fn normalized(&self) -> Plane {
        Plane::from_vector(self.coeffs / self.coeffs.norm())
    }

    pub fn signed_value(&self, p: &Vector3<f64>) -> f64 {
        self.coeffs.dot(&p.push(1.0))
    }
}

/// Dual quadric with the (4,4) element fixed to -1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualQuadric {
    pub qhat: [f64; 9],
}

impl DualQuadric {
    pub fn new(qhat: [f64; 9]) -> Self {
        Self { qhat }
    }

    /// Build from an arbitrary symmetric matrix, rescaling so that (4,4) = -1.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let s = m[(3, 3)];
        if s == 0.0 || !s.is_finite() {
            return Err(GeometryError::NotAnEllipsoid);
        }
        let m = m * (-1.0 / s);
        let sym = 0.5 * (m + m.transpose());
        Ok(Self::new([
            sym[(0, 0)],
            sym[(0, 1)],
            sym[(0, 2)],
            sym[(0, 3)],
            sym[(1, 1)],
            sym[(1, 2)],
            sym[(1, 3)],
            sym[(2, 2)],
            sym[(2, 3)],
        ]))
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let q = &self.qhat;
        Matrix4::new(
            q[0], q[1], q[2], q[3], //
            q[1], q[4], q[5], q[6], //
            q[2], q[5], q[7], q[8], //
            q[3], q[6], q[8], -1.0,
        )
    }

    /// The homogeneous 10-vector `[q̂; -1]`.
    pub fn homogeneous(&self) -> [f64; 10] {
        let mut v = [-1.0; 10];
        v[..9].copy_from_slice(&self.qhat);
        v
    }
}

/// Dual conic `C* = P Q* Pᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualConic {
    pub matrix: Matrix3<f64>,
}

/// Ellipsoid with rotation, center and positive semi-axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
    pub semi_axes: Vector3<f64>,
}

impl Ellipsoid {
    pub fn new(rotation: Matrix3<f64>, center: Vector3<f64>, semi_axes: Vector3<f64>) -> Self {
        Self { rotation, center, semi_axes }
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        Self::new(Matrix3::identity(), center, Vector3::repeat(radius))
    }

    pub fn is_valid(&self) -> bool {
        self.semi_axes.iter().all(|&a| a > 0.0) && Pose::new(self.rotation, Vector3::zeros()).is_valid(1e-9)
    }

    /// Shape matrix `R diag(a², b², c²) Rᵀ`.
    pub fn shape_matrix(&self) -> Matrix3<f64> {
        let d = Matrix3::from_diagonal(&self.semi_axes.component_mul(&self.semi_axes));
        self.rotation * d * self.rotation.transpose()
    }

    /// Point on the surface for unit-sphere direction `u`.
    pub fn surface_point(&self, u: &Vector3<f64>) -> Vector3<f64> {
        self.center + self.rotation * self.semi_axes.component_mul(u)
    }
}

/// `ΠᵀQ*Π`; zero iff the plane is tangent to the quadric.
pub fn tangency_residual(plane: &Plane, q: &DualQuadric) -> f64 {
    coefficient_row(plane).iter().zip(q.homogeneous().iter()).map(|(a, b)| a * b).sum()
}

/// Linear-equation row so that `row · [q̂; -1] = ΠᵀQ*Π`.
pub fn coefficient_row(plane: &Plane) -> [f64; 10] {
    let p = &plane.coeffs;
    [
        p[0] * p[0],
        2.0 * p[0] * p[1],
        2.0 * p[0] * p[2],
        2.0 * p[0] * p[3],
        p[1] * p[1],
        2.0 * p[1] * p[2],
        2.0 * p[1] * p[3],
        p[2] * p[2],
        2.0 * p[2] * p[3],
        p[3] * p[3],
    ]
}

/// `P = K [R | t]`.
pub fn projection_matrix(pose: &Pose, k: &CameraIntrinsics) -> Matrix3x4<f64> {
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
    rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&pose.translation);
    k.matrix() * rt
}

/// Project a world point; `None` when it is not strictly in front of the camera.
pub fn project_point(p: &Matrix3x4<f64>, x: &Vector3<f64>) -> Option<Vector2<f64>> {
    let h = p * x.push(1.0);
    (h.z > 0.0).then(|| Vector2::new(h.x / h.z, h.y / h.z))
}

/// The four planes back-projected from the box edges, in the order
/// `xmin, xmax, ymin, ymax`.
pub fn tangent_planes_from_bbox(b: &BBox, p: &Matrix3x4<f64>) -> [Plane; 4] {
    let edge = |l: Vector3<f64>| Plane::from_vector((l.transpose() * p).transpose());
    [
        edge(Vector3::new(1.0, 0.0, -b.xmin)),
        edge(Vector3::new(1.0, 0.0, -b.xmax)),
        edge(Vector3::new(0.0, 1.0, -b.ymin)),
        edge(Vector3::new(0.0, 1.0, -b.ymax)),
    ]
}

pub fn project_quadric(p: &Matrix3x4<f64>, q: &DualQuadric) -> DualConic {
    let c = p * q.matrix() * p.transpose();
    DualConic { matrix: 0.5 * (c + c.transpose()) }
}

/// Roots of `c11 - 2 s c13 + s² c33 = 0`, the extreme tangent lines along one
/// image axis, returned in ascending order.
fn tangent_extent(c11: f64, c13: f64, c33: f64) -> Result<(f64, f64), GeometryError> {
    if c33 == 0.0 || !c33.is_finite() {
        return Err(GeometryError::NotAnEllipse);
    }
    let disc = c13 * c13 - c11 * c33;
    if !(disc >= 0.0) {
        return Err(GeometryError::NotAnEllipse);
    }
    let r = disc.sqrt();
    let a = (c13 - r) / c33;
    let b = (c13 + r) / c33;
    Ok(if a <= b { (a, b) } else { (b, a) })
}

/// Whether a dual conic describes a real, non-degenerate ellipse.
///
/// The point conic is `adj(C*)`; its upper-left 2×2 minor equals
/// `C*33 · det(C*)`, which must be positive for an ellipse.
pub fn is_real_ellipse(c: &DualConic) -> bool {
    let m = &c.matrix;
    let det = m.determinant();
    m[(2, 2)] * det > 0.0 && det.is_finite()
}

/// Smallest axis-aligned box containing the ellipse, clipped to the image
/// when bounds are given.
pub fn conic_to_bbox(c: &DualConic, bounds: ImageBounds) -> Result<BBox, GeometryError> {
    if !is_real_ellipse(c) {
        return Err(GeometryError::NotAnEllipse);
    }
    let m = &c.matrix;
    let (xmin, xmax) = tangent_extent(m[(0, 0)], m[(0, 2)], m[(2, 2)])?;
    let (ymin, ymax) = tangent_extent(m[(1, 1)], m[(1, 2)], m[(2, 2)])?;
    let b = BBox::new(xmin, ymin, xmax, ymax);
    match bounds {
        ImageBounds::Unbounded => Ok(b),
        ImageBounds::Bounded { width, height } => {
            let clipped = BBox::new(
                b.xmin.clamp(0.0, width),
                b.ymin.clamp(0.0, height),
                b.xmax.clamp(0.0, width),
                b.ymax.clamp(0.0, height),
            );
            if clipped.is_valid() {
                Ok(clipped)
            } else {
                Err(GeometryError::OffImage)
            }
        }
    }
}

pub fn quadric_center(q: &DualQuadric) -> Vector3<f64> {
    -Vector3::new(q.qhat[3], q.qhat[6], q.qhat[8])
}

/// Camera center, optical axis and principal plane of a pose.
pub fn camera_frame_geometry(pose: &Pose) -> (Vector3<f64>, Vector3<f64>, Plane) {
    let center = pose.center();
    let axis: Vector3<f64> = pose.rotation.row(2).transpose();
    let plane = Plane::new(axis.x, axis.y, axis.z, -axis.dot(&center));
    (center, axis, plane)
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Fundamental matrix mapping pixels of view `a` to epipolar lines in view `b`.
pub fn fundamental_matrix(pose_a: &Pose, pose_b: &Pose, k: &CameraIntrinsics) -> Result<Matrix3<f64>, GeometryError> {
    let rel = pose_b.compose(&pose_a.inverse());
    if rel.translation.norm() < 1e-9 {
        return Err(GeometryError::DegenerateBaseline);
    }
    let e = skew(&rel.translation) * rel.rotation;
    let kinv = k.inverse_matrix();
    Ok(kinv.transpose() * e * kinv)
}

/// Epipolar line in view `b` of a pixel observed in view `a`.
pub fn epipolar_line(
    pose_a: &Pose,
    pose_b: &Pose,
    k: &CameraIntrinsics,
    pixel_in_a: &Vector2<f64>,
) -> Result<Vector3<f64>, GeometryError> {
    Ok(fundamental_matrix(pose_a, pose_b, k)? * pixel_in_a.push(1.0))
}

/// Whether the line meets the closed rectangle.
pub fn line_intersects_bbox(line: &Vector3<f64>, b: &BBox) -> bool {
    let corners = [(b.xmin, b.ymin), (b.xmax, b.ymin), (b.xmin, b.ymax), (b.xmax, b.ymax)];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (x, y) in corners {
        let s = line.x * x + line.y * y + line.z;
        lo = lo.min(s);
        hi = hi.max(s);
    }
    lo <= 0.0 && hi >= 0.0
}

pub fn ellipsoid_from_quadric(q: &DualQuadric) -> Result<Ellipsoid, GeometryError> {
    ellipsoid_from_quadric_eps(q, ELLIPSOID_EPS)
}

pub fn ellipsoid_from_quadric_eps(q: &DualQuadric, eps: f64) -> Result<Ellipsoid, GeometryError> {
    if q.qhat.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NotAnEllipsoid);
    }
    let center = quadric_center(q);
    let m = q.matrix();
    let upper: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned() + center * center.transpose();
    let eig = SymmetricEigen::new(0.5 * (upper + upper.transpose()));
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if eig.eigenvalues.iter().any(|&l| !(l > eps)) {
        return Err(GeometryError::NotAnEllipsoid);
    }
    let mut cols = [Vector3::zeros(); 3];
    let mut axes = Vector3::zeros();
    for (slot, &i) in order.iter().enumerate() {
        axes[slot] = eig.eigenvalues[i].sqrt();
        let mut v: Vector3<f64> = eig.eigenvectors.column(i).normalize();
        if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
            if *first < 0.0 {
                v = -v;
            }
        }
        cols[slot] = v;
    }
    // third column follows from the first two so that det(R) = +1
    cols[2] = cols[0].cross(&cols[1]).normalize();
    let rotation = Matrix3::from_columns(&cols);
    Ok(Ellipsoid::new(rotation, center, axes))
}

pub fn quadric_from_ellipsoid(e: &Ellipsoid) -> DualQuadric {
    let upper = e.shape_matrix() - e.center * e.center.transpose();
    let t = &e.center;
    DualQuadric::new([
        upper[(0, 0)],
        0.5 * (upper[(0, 1)] + upper[(1, 0)]),
        0.5 * (upper[(0, 2)] + upper[(2, 0)]),
        -t.x,
        upper[(1, 1)],
        0.5 * (upper[(1, 2)] + upper[(2, 1)]),
        -t.y,
        upper[(2, 2)],
        -t.z,
    ])
}
