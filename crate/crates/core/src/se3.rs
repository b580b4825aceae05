//! SE(3) poses and se(3) twists.
//!
//! A twist stacks the translational part first: `(v, w)`. The exponential map
//! uses the closed-form Rodrigues expressions with a series fallback below
//! `SMALL_ANGLE`, so it is smooth through zero rotation. The logarithm rejects
//! rotations within `1e-6` of pi, where the axis is numerically unstable.

use nalgebra::{Matrix3, Vector3, Vector6};
use thiserror::Error;

/// Below this rotation angle the exp/log coefficients switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Rotations with angle above `pi - MAX_ANGLE_MARGIN` have no stable logarithm.
pub const MAX_ANGLE_MARGIN: f64 = 1e-6;

/// Orthonormality tolerance for accepting an externally supplied rotation.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum Se3Error {
    #[error("twist has a non-finite component")]
    NonFinite,
    #[error("rotation angle {0:.9} is too close to pi for a stable logarithm")]
    AngleNearPi(f64),
    #[error("matrix is not a rotation (orthonormality/determinant error {0:.3e})")]
    NotARotation(f64),
}

/// Element of se(3): translational velocity `v` stacked before angular `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
}

impl Twist {
    pub fn new(v: Vector3<f64>, w: Vector3<f64>) -> Self {
        Self { v, w }
    }

    pub fn zero() -> Self {
        Self { v: Vector3::zeros(), w: Vector3::zeros() }
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self {
            v: Vector3::new(x[0], x[1], x[2]),
            w: Vector3::new(x[3], x[4], x[5]),
        }
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(self.v.x, self.v.y, self.v.z, self.w.x, self.w.y, self.w.z)
    }

    /// Euclidean norm of the stacked 6-vector.
    pub fn norm(&self) -> f64 {
        (self.v.norm_squared() + self.w.norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(self.w.iter()).all(|x| x.is_finite())
    }
}

/// Distance between two twists: plain Euclidean norm of the 6-vector
/// difference, no weighting between the translational and rotational parts.
pub fn twist_distance(a: &Twist, b: &Twist) -> f64 {
    ((a.v - b.v).norm_squared() + (a.w - b.w).norm_squared()).sqrt()
}

/// Rigid transform: `x_out = rotation * x_in + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Builds a pose from parts, checking that `rotation` is orthonormal with
    /// determinant +1 within `ROTATION_TOL`. Use for externally supplied
    /// matrices; internally composed poses stay valid by construction.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, Se3Error> {
        let err = rotation_error(&rotation);
        if err > ROTATION_TOL {
            return Err(Se3Error::NotARotation(err));
        }
        Ok(Self { rotation, translation })
    }

    /// `self` applied after `other`: `(self.compose(other))(x) = self(other(x))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Exponential map se(3) -> SE(3).
    pub fn exp(xi: &Twist) -> Pose {
        let w = xi.w;
        let theta2 = w.norm_squared();
        let theta = theta2.sqrt();
        let wx = skew(&w);
        let wx2 = wx * wx;

        // R = I + a*W + b*W^2,  V = I + c*W + d*W^2
        let (a, b, c, d) = if theta < SMALL_ANGLE {
            (
                1.0 - theta2 / 6.0,
                0.5 - theta2 / 24.0,
                0.5 - theta2 / 24.0,
                1.0 / 6.0 - theta2 / 120.0,
            )
        } else {
            let s = theta.sin();
            // 2*sin^2(t/2)/t^2 == (1-cos t)/t^2 without the cancellation.
            let half_sin = (theta * 0.5).sin();
            let b = 2.0 * half_sin * half_sin / theta2;
            (s / theta, b, b, (theta - s) / (theta2 * theta))
        };

        let rotation = Matrix3::identity() + wx * a + wx2 * b;
        let v_mat = Matrix3::identity() + wx * c + wx2 * d;
        Pose { rotation, translation: v_mat * xi.v }
    }

    /// Logarithm SE(3) -> se(3). Fails for rotation angles within
    /// `MAX_ANGLE_MARGIN` of pi.
    pub fn log(&self) -> Result<Twist, Se3Error> {
        let r = &self.rotation;
        let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos_theta.acos();
        if theta >= std::f64::consts::PI - MAX_ANGLE_MARGIN {
            return Err(Se3Error::AngleNearPi(theta));
        }

        let vee = Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );
        let w = if theta < SMALL_ANGLE {
            // vee/2 * (1 + theta^2/6) — second-order accurate near zero.
            vee * (0.5 + theta * theta / 12.0)
        } else {
            vee * (theta / (2.0 * theta.sin()))
        };

        let wx = skew(&w);
        let wx2 = wx * wx;
        let theta2 = w.norm_squared();
        // V^-1 = I - W/2 + e*W^2
        let e = if theta < SMALL_ANGLE {
            1.0 / 12.0 + theta2 / 720.0
        } else {
            // (1 - (t/2)*cot(t/2)) / t^2, stable away from t = 0.
            let th = theta2.sqrt();
            let half = th * 0.5;
            (1.0 - half * half.cos() / half.sin()) / theta2
        };
        let v_inv = Matrix3::identity() - wx * 0.5 + wx2 * e;
        Ok(Twist { v: v_inv * self.translation, w })
    }
}

/// Cross-product matrix: `skew(w) * x == w.cross(x)`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn rotation_error(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    let ortho = gram.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    ortho.max((r.determinant() - 1.0).abs())
}
