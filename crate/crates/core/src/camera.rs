//! Scaled orthographic camera.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::{all_finite, Scalar};

/// Scaled orthographic camera: `m = scale * Π * rotation * p + translation`,
/// where `Π` keeps the first two rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera<T: Scalar> {
    rotation: Matrix3<T>,
    scale: T,
    translation: Vector2<T>,
}

/// Orthonormality tolerance for rotations of scalar type `T`.
pub fn rotation_tolerance<T: Scalar>() -> T {
    let eps = T::default_epsilon() * T::lit(1e3);
    if eps > T::lit(1e-9) {
        eps
    } else {
        T::lit(1e-9)
    }
}

/// Checks that `r` is orthonormal with determinant +1.
pub fn check_rotation<T: Scalar>(r: &Matrix3<T>) -> Result<()> {
    if !all_finite(r.iter().copied()) {
        return Err(Error::NonFinite("rotation"));
    }
    let tol = rotation_tolerance::<T>();
    let gram = r * r.transpose() - Matrix3::identity();
    if gram.iter().any(|v| v.abs() > tol) {
        return Err(Error::InvalidInput("rotation is not orthonormal".into()));
    }
    if (r.determinant() - T::one()).abs() > tol {
        return Err(Error::InvalidInput(format!(
            "rotation determinant {} is not +1",
            r.determinant().to_f64_lossy()
        )));
    }
    Ok(())
}

impl<T: Scalar> Camera<T> {
    pub fn new(rotation: Matrix3<T>, scale: T, translation: Vector2<T>) -> Result<Self> {
        let cam = Self { rotation, scale, translation };
        cam.validate()?;
        Ok(cam)
    }

    /// Builds a camera without checking invariants. [`Camera::validate`] must
    /// pass before the camera is persisted or used by the pipeline.
    pub fn new_unchecked(rotation: Matrix3<T>, scale: T, translation: Vector2<T>) -> Self {
        Self { rotation, scale, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), scale: T::one(), translation: Vector2::zeros() }
    }

    pub fn validate(&self) -> Result<()> {
        check_rotation(&self.rotation)?;
        if !self.scale.is_finite_scalar() || !all_finite(self.translation.iter().copied()) {
            return Err(Error::NonFinite("camera"));
        }
        if self.scale <= T::zero() {
            return Err(Error::InvalidInput("camera scale must be positive".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn translation(&self) -> &Vector2<T> {
        &self.translation
    }

    /// The 2×3 matrix `scale * Π * rotation`.
    pub fn projection_matrix(&self) -> Matrix2x3<T> {
        self.rotation.fixed_rows::<2>(0).into_owned() * self.scale
    }

    /// Unit vector along the viewing axis (third rotation row) in world coordinates.
    pub fn viewing_axis(&self) -> Vector3<T> {
        self.rotation.row(2).transpose()
    }

    #[inline]
    pub fn project_point(&self, p: &Vector3<T>) -> Vector2<T> {
        let r = &self.rotation;
        let x = r[(0, 0)] * p.x + r[(0, 1)] * p.y + r[(0, 2)] * p.z;
        let y = r[(1, 0)] * p.x + r[(1, 1)] * p.y + r[(1, 2)] * p.z;
        Vector2::new(self.scale * x + self.translation.x, self.scale * y + self.translation.y)
    }

    /// Same camera with every image coordinate multiplied by `factor`.
    pub fn rescaled(&self, factor: T) -> Self {
        Self { rotation: self.rotation, scale: self.scale * factor, translation: self.translation * factor }
    }

    pub fn with_translation(&self, translation: Vector2<T>) -> Self {
        Self { translation, ..*self }
    }

    pub fn cast<U: Scalar>(&self) -> Camera<U> {
        Camera {
            rotation: self.rotation.map(|v| U::lit(v.to_f64_lossy())),
            scale: U::lit(self.scale.to_f64_lossy()),
            translation: self.translation.map(|v| U::lit(v.to_f64_lossy())),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CameraRepr {
    rotation: [[f64; 3]; 3],
    scale: f64,
    translation: [f64; 2],
}

impl Serialize for Camera<f64> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let r = &self.rotation;
        CameraRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            scale: self.scale,
            translation: [self.translation.x, self.translation.y],
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Camera<f64> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = CameraRepr::deserialize(deserializer)?;
        let r = repr.rotation;
        let rotation = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        Camera::new(rotation, repr.scale, Vector2::new(repr.translation[0], repr.translation[1]))
            .map_err(serde::de::Error::custom)
    }
}
