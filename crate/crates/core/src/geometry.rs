//! Pose representation, rotation-matrix/quaternion conversion, and the
//! error metrics used for evaluation.
//!
//! Conventions pinned here and relied on everywhere else:
//!
//! - quaternion component order is `(w, x, y, z)`;
//! - ground-truth quaternions are sign-canonicalized at ingestion
//!   (`w >= 0`; if `w == 0`, the first nonzero of `x, y, z` is positive)
//!   so training targets are deterministic under the q/-q double cover;
//! - orientation error is `2 * acos(|<q1, q2>|)` in degrees, computed on
//!   normalized inputs.
//!
//! All operations are pure functions on immutable values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm below which a quaternion is considered degenerate.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Allowed deviation from orthonormality when ingesting rotation matrices.
pub const ROTATION_ORTHO_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("quaternion norm {norm:e} is too close to zero")]
    ZeroNorm { norm: f64 },
    #[error("matrix is not a rotation: {reason}")]
    NotARotation { reason: String },
    #[error("quaternion is not unit-norm (norm {norm})")]
    NotUnit { norm: f64 },
    #[error("malformed homogeneous matrix: {reason}")]
    MalformedMatrix { reason: String },
}

/// Orientation as a quaternion in `(w, x, y, z)` order. Network outputs may
/// have any nonzero norm; ground-truth orientations are unit-norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Self = Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn negated(&self) -> Self {
        Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Flips the sign so that `w >= 0`; on `w == 0` the first nonzero of
    /// `x, y, z` is made positive. Identity for the all-zero quaternion.
    pub fn canonicalized(&self) -> Self {
        let lead = [self.w, self.x, self.y, self.z]
            .into_iter()
            .find(|c| *c != 0.0)
            .unwrap_or(0.0);
        if lead < 0.0 {
            self.negated()
        } else {
            *self
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

/// Camera translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl Translation {
    pub const ZERO: Self = Self { tx: 0.0, ty: 0.0, tz: 0.0 };

    pub fn new(tx: f64, ty: f64, tz: f64) -> Self {
        Self { tx, ty, tz }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.tx, self.ty, self.tz]
    }
}

/// A 7-dimensional camera pose: unit quaternion plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub q: Quaternion,
    pub t: Translation,
}

impl Pose {
    pub fn new(q: Quaternion, t: Translation) -> Self {
        Self { q, t }
    }

    pub fn identity() -> Self {
        Self { q: Quaternion::IDENTITY, t: Translation::ZERO }
    }
}

/// Row-major 3x3 rotation matrix.
pub type RotationMatrix = [[f64; 3]; 3];

/// Rescales `q` to unit norm, preserving direction.
pub fn quat_normalize(q: &Quaternion) -> Result<Quaternion, GeometryError> {
    let n = q.norm();
    if n <= ZERO_NORM_EPS {
        return Err(GeometryError::ZeroNorm { norm: n });
    }
    Ok(Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n))
}

fn max_ortho_deviation(r: &RotationMatrix) -> f64 {
    let mut max_dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            // (R^T R)[i][j] = sum_k R[k][i] * R[k][j]
            let mut v = 0.0;
            for row in r.iter() {
                v += row[i] * row[j];
            }
            let target = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((v - target).abs());
        }
    }
    max_dev
}

fn det3(r: &RotationMatrix) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// Converts a rotation matrix into the canonical unit quaternion
/// (`w >= 0` sign convention), using the numerically stable
/// largest-diagonal branch selection.
pub fn rotmat_to_quat(r: &RotationMatrix) -> Result<Quaternion, GeometryError> {
    let dev = max_ortho_deviation(r);
    if dev > ROTATION_ORTHO_TOL {
        return Err(GeometryError::NotARotation {
            reason: format!("R^T R deviates from identity by {dev:e}"),
        });
    }
    let det = det3(r);
    if det <= 0.0 {
        return Err(GeometryError::NotARotation {
            reason: format!("determinant {det} is not positive"),
        });
    }

    let trace = r[0][0] + r[1][1] + r[2][2];
    let q = if trace >= r[0][0] && trace >= r[1][1] && trace >= r[2][2] {
        let s = (trace + 1.0).sqrt() * 2.0;
        Quaternion::new(
            0.25 * s,
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
        )
    } else if r[0][0] >= r[1][1] && r[0][0] >= r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        Quaternion::new(
            (r[2][1] - r[1][2]) / s,
            0.25 * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
        )
    } else if r[1][1] >= r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        Quaternion::new(
            (r[0][2] - r[2][0]) / s,
            (r[0][1] + r[1][0]) / s,
            0.25 * s,
            (r[1][2] + r[2][1]) / s,
        )
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        Quaternion::new(
            (r[1][0] - r[0][1]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            0.25 * s,
        )
    };
    Ok(quat_normalize(&q)?.canonicalized())
}

/// Converts a unit quaternion into a rotation matrix.
/// `quat_to_rotmat(q) == quat_to_rotmat(-q)`.
pub fn quat_to_rotmat(q: &Quaternion) -> Result<RotationMatrix, GeometryError> {
    let n = q.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(GeometryError::NotUnit { norm: n });
    }
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Ok([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])
}

/// Angular distance between two orientations in degrees:
/// `2 * acos(min(1, |<q1, q2>|))` on normalized inputs. Symmetric and
/// invariant to a sign flip of either argument; range `[0, 180]`.
pub fn angular_error_deg(q1: &Quaternion, q2: &Quaternion) -> Result<f64, GeometryError> {
    let a = quat_normalize(q1)?;
    let b = quat_normalize(q2)?;
    let d = a.dot(&b).abs().min(1.0);
    Ok(2.0 * d.acos().to_degrees())
}

/// Euclidean distance between two translations in meters.
pub fn translation_error_m(t1: &Translation, t2: &Translation) -> f64 {
    let dx = t1.tx - t2.tx;
    let dy = t1.ty - t2.ty;
    let dz = t1.tz - t2.tz;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Extracts a pose from a 4x4 row-major homogeneous rigid transform, as
/// stored in 7-Scenes pose files. The quaternion is sign-canonicalized.
pub fn homogeneous_to_pose(m: &[[f64; 4]; 4]) -> Result<Pose, GeometryError> {
    for (j, expected) in [0.0, 0.0, 0.0, 1.0].iter().enumerate() {
        if (m[3][j] - expected).abs() > 1e-4 {
            return Err(GeometryError::MalformedMatrix {
                reason: format!("bottom row entry [3][{j}] = {} (expected {expected})", m[3][j]),
            });
        }
    }
    for row in m {
        for v in row {
            if !v.is_finite() {
                return Err(GeometryError::MalformedMatrix {
                    reason: "non-finite entry".to_string(),
                });
            }
        }
    }
    let r: RotationMatrix = [
        [m[0][0], m[0][1], m[0][2]],
        [m[1][0], m[1][1], m[1][2]],
        [m[2][0], m[2][1], m[2][2]],
    ];
    let q = rotmat_to_quat(&r).map_err(|e| GeometryError::MalformedMatrix {
        reason: format!("upper-left 3x3 block: {e}"),
    })?;
    Ok(Pose::new(q, Translation::new(m[0][3], m[1][3], m[2][3])))
}
