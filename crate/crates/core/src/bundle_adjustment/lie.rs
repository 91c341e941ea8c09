//! Small SO(3) helpers for the local parameterizations.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::geometry::skew;

/// Rodrigues formula with a series expansion near zero.
pub fn so3_exp(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let w = skew(v);
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + a * w + b * w * w
}

/// Rotation vector of `r`, accurate for tiny angles.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let s = 0.5 * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let c = 0.5 * (r.trace() - 1.0);
    let sin = s.norm();
    let theta = sin.atan2(c);
    if theta < 1e-8 {
        s
    } else if theta < std::f64::consts::PI - 1e-6 {
        s * (theta / sin)
    } else {
        Rotation3::from_matrix_unchecked(*r).scaled_axis()
    }
}

/// Inverse of the left Jacobian of SO(3) at `phi`.
pub fn left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = skew(phi);
    let coeff = if theta < 1e-5 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - 0.5 * w + coeff * w * w
}
