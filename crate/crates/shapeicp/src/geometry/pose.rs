use nalgebra::{Matrix3, Vector3};

use super::GeometryError;

/// A similarity transform `x -> s R x + t` with `R in SO(3)` and `s > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sim3Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    scale: f64,
}

const ORTHONORMALITY_TOL: f64 = 1e-9;

impl Sim3Pose {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        scale: f64,
    ) -> Result<Self, GeometryError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GeometryError::DegenerateConfiguration(format!(
                "scale must be positive, got {scale}"
            )));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err >= ORTHONORMALITY_TOL || rotation.determinant() <= 0.0 {
            return Err(GeometryError::DegenerateConfiguration(format!(
                "matrix is not a rotation (orthonormality residual {err:.2e})"
            )));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::DegenerateConfiguration(
                "non-finite translation".into(),
            ));
        }
        Ok(Self {
            rotation,
            translation,
            scale,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    /// Rotation by `angle_rad` about `axis` (normalized internally).
    pub fn rotation_about(axis: Vector3<f64>, angle_rad: f64) -> Matrix3<f64> {
        *nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            angle_rad,
        )
        .matrix()
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Sim3Pose) -> Sim3Pose {
        Sim3Pose {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.scale * (self.rotation * other.translation) + self.translation,
            scale: self.scale * other.scale,
        }
    }

    pub fn inverse(&self) -> Sim3Pose {
        let rot_inv = self.rotation.transpose();
        Sim3Pose {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }
}

/// Projects a near-rotation back onto SO(3) via SVD, keeping det +1.
pub(crate) fn renormalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with vt");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}
