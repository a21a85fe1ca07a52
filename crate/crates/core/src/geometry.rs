//! Rigid-body pose algebra and the weighted averages used to collapse a
//! particle ensemble into a single estimate.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Euler-angle band around |pitch| = π/2 treated as gimbal lock.
pub const GIMBAL_LOCK_BAND: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("weights and values differ in length ({weights} vs {values})")]
    LengthMismatch { weights: usize, values: usize },
    #[error("weight vector is degenerate (no positive finite weight)")]
    DegenerateWeights,
    #[error("circular mean undefined: resultant vector vanishes")]
    UndefinedCircularMean,
    #[error("pose array must hold 12 finite numbers, got {0}")]
    BadPoseArray(usize),
}

/// Rigid transform in SE(3): `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
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
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Planar pose: position `(x, y, 0)` heading `yaw`.
    pub fn from_xy_yaw(x: f64, y: f64, yaw: f64) -> Self {
        Self::new(rot_z(yaw), Vector3::new(x, y, 0.0))
    }

    pub fn from_euler(euler: EulerAngles, translation: Vector3<f64>) -> Self {
        Self::new(euler.to_rotation(), translation)
    }

    /// Rigid composition `self · other` (apply `other` first).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn euler(&self) -> EulerAngles {
        EulerAngles::from_rotation(&self.rotation)
    }

    pub fn yaw(&self) -> f64 {
        self.euler().yaw
    }

    /// True when `RᵀR = I` and `det R = 1` within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        ortho <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Row-major rotation followed by translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[0],
            t[1],
            t[2],
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Pose, GeometryError> {
        if v.len() != 12 || v.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::BadPoseArray(v.len()));
        }
        Ok(Pose {
            rotation: Matrix3::from_row_slice(&v[..9]),
            translation: Vector3::new(v[9], v[10], v[11]),
        })
    }

    /// Projects the rotation back onto SO(3) (nearest orthonormal matrix).
    pub fn renormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        Pose::new(r, self.translation)
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Pose::from_slice(&v).map_err(serde::de::Error::custom)
    }
}

/// Intrinsic Z-Y-X angles: `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        rot_z(self.yaw) * rot_y(self.pitch) * rot_x(self.roll)
    }

    /// Near gimbal lock roll is pinned to zero and yaw absorbs the rest.
    pub fn from_rotation(r: &Matrix3<f64>) -> EulerAngles {
        let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        if (pitch.abs() - PI / 2.0).abs() < GIMBAL_LOCK_BAND {
            let yaw = (-r[(0, 1)]).atan2(r[(1, 1)]);
            return EulerAngles::new(0.0, pitch, wrap_angle(yaw));
        }
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        EulerAngles::new(wrap_angle(roll), pitch, wrap_angle(yaw))
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Maps any angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Normalized `w_i^γ`; fails when nothing positive survives.
fn powered_weights(weights: &[f64], gamma: f64, n: usize) -> Result<Vec<f64>, GeometryError> {
    if weights.len() != n {
        return Err(GeometryError::LengthMismatch {
            weights: weights.len(),
            values: n,
        });
    }
    let powered: Vec<f64> = weights
        .iter()
        .map(|&w| if w > 0.0 && w.is_finite() { w.powf(gamma) } else { 0.0 })
        .collect();
    let total: f64 = powered.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(GeometryError::DegenerateWeights);
    }
    Ok(powered.into_iter().map(|w| w / total).collect())
}

/// `Σ ŵ_i t_i` with `ŵ_i = w_i^γ / Σ_j w_j^γ`.
pub fn weighted_translation_mean(
    poses: &[Pose],
    weights: &[f64],
    gamma: f64,
) -> Result<Vector3<f64>, GeometryError> {
    let w = powered_weights(weights, gamma, poses.len())?;
    Ok(poses
        .iter()
        .zip(&w)
        .fold(Vector3::zeros(), |acc, (p, &wi)| acc + p.translation * wi))
}

/// `atan2(Σ w^γ sin θ, Σ w^γ cos θ)`, in (−π, π].
pub fn circular_mean(angles: &[f64], weights: &[f64], gamma: f64) -> Result<f64, GeometryError> {
    let w = powered_weights(weights, gamma, angles.len())?;
    let (s, c) = angles
        .iter()
        .zip(&w)
        .fold((0.0, 0.0), |(s, c), (&a, &wi)| (s + wi * a.sin(), c + wi * a.cos()));
    if s.hypot(c) < 1e-12 {
        return Err(GeometryError::UndefinedCircularMean);
    }
    Ok(wrap_angle(s.atan2(c)))
}
