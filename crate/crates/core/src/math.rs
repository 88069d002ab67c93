//! Small rotation helpers shared across stages.
//!
//! Quaternions are stored as `[w, x, y, z]` so they serialize as plain arrays.

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

/// Angle below which the exponential map switches to its Taylor series.
const SERIES_ANGLE: f64 = 1e-7;

/// Rodrigues exponential map from an axis-angle vector to a rotation matrix.
pub fn axis_angle_to_matrix(aa: &Vec3) -> Mat3 {
    let theta2 = aa.norm_squared();
    let theta = theta2.sqrt();
    let k = aa.cross_matrix();
    if theta < SERIES_ANGLE {
        if theta2 == 0.0 {
            return Mat3::identity();
        }
        // sin(t)/t ~ 1 - t^2/6, (1 - cos t)/t^2 ~ 1/2 - t^2/24
        let a = 1.0 - theta2 / 6.0;
        let b = 0.5 - theta2 / 24.0;
        return Mat3::identity() + k * a + k * k * b;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Mat3::identity() + k * a + k * k * b
}

pub fn quat_normalize(q: &Quat) -> Quat {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Hamilton product `a ⊗ b` (apply `b` first, then `a`).
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Rotation matrix of a unit quaternion. The input is not renormalized.
pub fn quat_to_matrix(q: &Quat) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of [`quat_to_matrix`] with respect to `w, x, y, z`.
pub fn quat_to_matrix_jacobian(q: &Quat) -> [Mat3; 4] {
    let [w, x, y, z] = *q;
    let two = 2.0;
    [
        Mat3::new(
            0.0,
            -two * z,
            two * y,
            two * z,
            0.0,
            -two * x,
            -two * y,
            two * x,
            0.0,
        ),
        Mat3::new(
            0.0,
            two * y,
            two * z,
            two * y,
            -4.0 * x,
            -two * w,
            two * z,
            two * w,
            -4.0 * x,
        ),
        Mat3::new(
            -4.0 * y,
            two * x,
            two * w,
            two * x,
            0.0,
            two * z,
            -two * w,
            two * z,
            -4.0 * y,
        ),
        Mat3::new(
            -4.0 * z,
            -two * w,
            two * x,
            two * w,
            -4.0 * z,
            two * y,
            two * x,
            two * y,
            0.0,
        ),
    ]
}

/// Quaternion of a proper rotation matrix (Shepperd's method), `w >= 0`.
pub fn matrix_to_quat(m: &Mat3) -> Quat {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let q = quat_normalize(&q);
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest absolute entry of `FᵀF − I`.
pub fn orthonormality_error(m: &Mat3) -> f64 {
    (m.transpose() * m - Mat3::identity()).amax()
}

pub fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_map_matches_quaternion_route() {
        let aa = Vec3::new(0.3, -0.7, 0.2);
        let theta = aa.norm();
        let axis = aa / theta;
        let h = (theta / 2.0).sin();
        let q = [(theta / 2.0).cos(), axis.x * h, axis.y * h, axis.z * h];
        let diff = axis_angle_to_matrix(&aa) - quat_to_matrix(&q);
        assert!(diff.amax() < 1e-14);
    }

    #[test]
    fn tiny_angles_use_series() {
        let aa = Vec3::new(1e-9, 0.0, 0.0);
        let m = axis_angle_to_matrix(&aa);
        assert!(m.iter().all(|v| v.is_finite()));
        assert!((m[(2, 1)] - 1e-9).abs() < 1e-20);
        assert_eq!(axis_angle_to_matrix(&Vec3::zeros()), Mat3::identity());
    }

    #[test]
    fn matrix_quat_round_trip() {
        for aa in [
            Vec3::new(0.1, 0.2, 0.3),
            Vec3::new(3.0, 0.0, 0.1),
            Vec3::new(0.0, -3.1, 0.0),
            Vec3::new(0.0, 0.2, 3.0),
        ] {
            let m = axis_angle_to_matrix(&aa);
            let back = quat_to_matrix(&matrix_to_quat(&m));
            assert!((m - back).amax() < 1e-12, "{aa:?}");
        }
    }

    #[test]
    fn quat_mul_composes_matrices() {
        let a = matrix_to_quat(&axis_angle_to_matrix(&Vec3::new(0.4, 0.1, -0.2)));
        let b = matrix_to_quat(&axis_angle_to_matrix(&Vec3::new(-0.3, 0.5, 0.9)));
        let lhs = quat_to_matrix(&quat_mul(&a, &b));
        let rhs = quat_to_matrix(&a) * quat_to_matrix(&b);
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let q = [0.7, -0.2, 0.4, 0.1];
        let jac = quat_to_matrix_jacobian(&q);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (quat_to_matrix(&qp) - quat_to_matrix(&qm)) / (2.0 * h);
            assert!((fd - jac[k]).amax() < 1e-8, "component {k}");
        }
    }
}
