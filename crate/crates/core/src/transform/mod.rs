//! Spatial transforms between a reference (target) grid and a source image:
//! an affine map in world coordinates, refined by a B-spline displacement
//! field expressed in the affinely aligned frame.

mod bspline;
pub mod container;
mod warp;

pub use bspline::{bspline_kernel, bspline_kernel_d1, bspline_kernel_d2, BSplineTransform};
pub(crate) use bspline::{basis, FieldSampler};
pub use warp::{compose_displacement, interpolate_field, warp_labels, warp_volume};
pub(crate) use warp::voxel_gradient_to_world;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};

/// Homogeneous 4x4 map from reference world coordinates to source world
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn new(matrix: Matrix4<f64>) -> Result<Self> {
        let last = matrix.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidTransform(format!(
                "last row must be (0, 0, 0, 1), got {last}"
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite affine entry".into()));
        }
        let det = matrix.fixed_view::<3, 3>(0, 0).determinant();
        if det.abs() <= 1e-12 {
            return Err(Error::InvalidTransform(format!("singular affine (det = {det:e})")));
        }
        Ok(Self { matrix })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self { matrix: m }
    }

    /// `p -> linear * (p - center) + center + translation`.
    pub fn about_center(linear: Matrix3<f64>, center: Vector3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
        let offset = center + translation - linear * center;
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&offset);
        Self::new(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn offset(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.matrix * Vector4::new(p[0], p[1], p[2], 1.0)).xyz()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| Error::InvalidTransform("affine is not invertible".into()))?;
        let mut inv = inv;
        inv.set_row(3, &nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
        Self::new(inv)
    }

    /// `self` applied after `inner`.
    pub fn compose(&self, inner: &AffineTransform) -> Self {
        Self {
            matrix: self.matrix * inner.matrix,
        }
    }
}
