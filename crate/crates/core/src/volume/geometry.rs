use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Voxel grid placement in world space (mm).
///
/// `world = origin + direction * diag(spacing) * voxel`, with the columns of
/// `direction` giving the world axis of each voxel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: Vector3<f64>,
    direction: Matrix3<f64>,
}

impl Geometry {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: Vector3<f64>,
        direction: Matrix3<f64>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidInput(format!("degenerate dims {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidInput(format!("spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite origin".into()));
        }
        let det = direction.determinant();
        if !((det.abs() - 1.0).abs() <= 1e-6) {
            return Err(Error::InvalidInput(format!(
                "direction matrix must be orthonormal, |det| = {}",
                det.abs()
            )));
        }
        if !(direction.transpose() * direction).relative_eq(&Matrix3::identity(), 1e-5, 1e-5) {
            return Err(Error::InvalidInput("direction matrix is not orthonormal".into()));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            direction,
        })
    }

    /// Axis-aligned grid at the world origin.
    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, Vector3::zeros(), Matrix3::identity())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> &Vector3<f64> {
        &self.origin
    }

    pub fn direction(&self) -> &Matrix3<f64> {
        &self.direction
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// `direction * diag(spacing)`.
    pub fn scaled_direction(&self) -> Matrix3<f64> {
        self.direction * Matrix3::from_diagonal(&Vector3::from(self.spacing))
    }

    /// Homogeneous voxel-to-world matrix.
    pub fn voxel_to_world_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.scaled_direction());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.origin);
        m
    }

    #[inline]
    pub fn voxel_to_world(&self, p: [f64; 3]) -> Vector3<f64> {
        self.origin + self.scaled_direction() * Vector3::from(p)
    }

    #[inline]
    pub fn world_to_voxel(&self, w: &Vector3<f64>) -> [f64; 3] {
        let local = self.direction.transpose() * (w - self.origin);
        [
            local[0] / self.spacing[0],
            local[1] / self.spacing[1],
            local[2] / self.spacing[2],
        ]
    }

    /// Same dims and, within `tol`, same spacing, origin and direction.
    pub fn matches(&self, other: &Geometry, tol: f64) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= tol)
            && (self.origin - other.origin).amax() <= tol
            && (self.direction - other.direction).amax() <= tol
    }

    pub fn ensure_matches(&self, other: &Geometry) -> Result<()> {
        if self.matches(other, 1e-4) {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "dims {:?} spacing {:?} vs dims {:?} spacing {:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    /// Same placement with new dims and spacing.
    pub fn resized(&self, dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, self.origin, self.direction)
    }

    /// World coordinate of the centre of the grid.
    pub fn center(&self) -> Vector3<f64> {
        let c = self.dims.map(|d| (d as f64 - 1.0) / 2.0);
        self.voxel_to_world(c)
    }
}
