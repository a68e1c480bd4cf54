use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rayon::prelude::*;

use super::{AffineTransform, BSplineTransform};
use crate::error::{Error, Result};
use crate::volume::sampling::{interp, nearest_index};
use crate::volume::{Geometry, LabelVolume, Volume};

/// Continuous source voxel coordinate of every reference voxel under
/// `affine ∘ (id + u)`.
fn source_positions(
    src: &Geometry,
    reference: &Geometry,
    affine: &AffineTransform,
    ffd: Option<&BSplineTransform>,
) -> Result<Vec<[f64; 3]>> {
    if affine.linear().determinant().abs() <= 1e-12 {
        return Err(Error::InvalidTransform("singular affine".into()));
    }
    let field = match ffd {
        Some(t) => {
            if !t.geometry().matches(reference, 1e-6) {
                return Err(Error::InvalidTransform(
                    "B-spline transform is not defined over the reference geometry".into(),
                ));
            }
            Some(t.dense_field())
        }
        None => None,
    };
    let src_inv = src
        .voxel_to_world_matrix()
        .try_inverse()
        .ok_or_else(|| Error::InvalidTransform("source geometry not invertible".into()))?;
    let to_src: Matrix4<f64> = src_inv * affine.matrix();
    let ref_m = reference.voxel_to_world_matrix();
    let dims = reference.dims();
    let plane = dims[0] * dims[1];

    let mut out = vec![[0.0; 3]; reference.voxel_count()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let idx_in = i + dims[0] * j;
                let mut p = ref_m * Vector4::new(i as f64, j as f64, k as f64, 1.0);
                if let Some(f) = &field {
                    let d = f[idx_in + plane * k];
                    p[0] += d[0];
                    p[1] += d[1];
                    p[2] += d[2];
                }
                let s = to_src * p;
                slab[idx_in] = [s[0], s[1], s[2]];
            }
        }
    });
    Ok(out)
}

/// Resamples `src` onto `reference` through `affine ∘ (id + u)`; trilinear,
/// zero outside the source grid.
pub fn warp_volume(
    src: &Volume,
    reference: &Geometry,
    affine: &AffineTransform,
    ffd: Option<&BSplineTransform>,
) -> Result<Volume> {
    let pos = source_positions(src.geometry(), reference, affine, ffd)?;
    let data = pos
        .par_iter()
        .map(|&p| interp(src.data(), src.dims(), p).unwrap_or(0.0) as f32)
        .collect();
    Volume::new(reference.clone(), data)
}

/// Nearest-neighbour counterpart of [`warp_volume`]; background outside
/// the source grid.
pub fn warp_labels(
    src: &LabelVolume,
    reference: &Geometry,
    affine: &AffineTransform,
    ffd: Option<&BSplineTransform>,
) -> Result<LabelVolume> {
    let pos = source_positions(src.geometry(), reference, affine, ffd)?;
    let data = pos
        .par_iter()
        .map(|&p| nearest_index(src.dims(), p).map_or(0, |idx| src.data()[idx]))
        .collect();
    LabelVolume::new(reference.clone(), data)
}

/// Trilinear interpolation of a dense per-voxel vector field at a
/// continuous voxel coordinate, clamped to the grid, together with its
/// Jacobian with respect to that voxel coordinate (`jac[c][a]` is
/// d field_c / d x_a).
pub fn interpolate_field(field: &[[f64; 3]], dims: [usize; 3], p: [f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut i0 = [0usize; 3];
    let mut f = [0.0; 3];
    let mut step = [0usize; 3];
    let mut live = [false; 3];
    let strides = [1, dims[0], dims[0] * dims[1]];
    for a in 0..3 {
        let n = dims[a];
        if n == 1 {
            continue;
        }
        let hi = (n - 1) as f64;
        let x = p[a];
        let xc = x.clamp(0.0, hi);
        live[a] = x > 0.0 && x < hi;
        let base = (xc.floor() as usize).min(n - 2);
        i0[a] = base;
        f[a] = xc - base as f64;
        step[a] = strides[a];
    }
    let base = i0[0] + dims[0] * (i0[1] + dims[1] * i0[2]);
    let at = |dx: usize, dy: usize, dz: usize| field[base + dx * step[0] + dy * step[1] + dz * step[2]];
    let mut val = [0.0; 3];
    let mut jac = [[0.0; 3]; 3];
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - f[2] } else { f[2] };
        let gz = if dz == 0 { -1.0 } else { 1.0 };
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - f[1] } else { f[1] };
            let gy = if dy == 0 { -1.0 } else { 1.0 };
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - f[0] } else { f[0] };
                let gx = if dx == 0 { -1.0 } else { 1.0 };
                let v = at(dx, dy, dz);
                let w = wx * wy * wz;
                let dw = [gx * wy * wz, wx * gy * wz, wx * wy * gz];
                for c in 0..3 {
                    val[c] += w * v[c];
                    for a in 0..3 {
                        jac[c][a] += dw[a] * v[c];
                    }
                }
            }
        }
    }
    for (a, &l) in live.iter().enumerate() {
        if !l {
            for row in jac.iter_mut() {
                row[a] = 0.0;
            }
        }
    }
    (val, jac)
}

/// Trilinear blend of the exact B-spline displacement at the eight voxel
/// centres around `x` (clamped to the grid).
fn displacement_trilinear(t: &BSplineTransform, x: [f64; 3]) -> Vector3<f64> {
    let dims = t.geometry().dims();
    let mut out = Vector3::zeros();
    let mut corners = [[(0usize, 1.0f64); 2]; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let xc = x[a].clamp(0.0, hi);
        if dims[a] == 1 {
            corners[a] = [(0, 1.0), (0, 0.0)];
            continue;
        }
        let base = (xc.floor() as usize).min(dims[a] - 2);
        let f = xc - base as f64;
        corners[a] = [(base, 1.0 - f), (base + 1, f)];
    }
    for &(k, wz) in &corners[2] {
        for &(j, wy) in &corners[1] {
            for &(i, wx) in &corners[0] {
                let w = wx * wy * wz;
                if w != 0.0 {
                    out += t.displacement([i as f64, j as f64, k as f64]) * w;
                }
            }
        }
    }
    out
}

/// Residual of the round trip `fwd ∘ bwd` at reference voxel coordinate
/// `x`: `map_fwd(map_bwd(x)) - world(x)` in mm.
pub fn compose_displacement(fwd: &BSplineTransform, bwd: &BSplineTransform, x: [f64; 3]) -> Result<Vector3<f64>> {
    let geom = fwd.geometry();
    if !geom.matches(bwd.geometry(), 1e-6) {
        return Err(Error::Geometry("forward and backward transforms use different geometries".into()));
    }
    let world = geom.voxel_to_world(x);
    let mid = world + displacement_trilinear(bwd, x);
    let y = geom.world_to_voxel(&mid);
    Ok(mid + displacement_trilinear(fwd, y) - world)
}

/// `direction * diag(1 / spacing)`: turns a voxel-coordinate gradient into
/// a world gradient.
pub(crate) fn voxel_gradient_to_world(geom: &Geometry) -> Matrix3<f64> {
    let s = geom.spacing();
    geom.direction() * Matrix3::from_diagonal(&Vector3::new(1.0 / s[0], 1.0 / s[1], 1.0 / s[2]))
}
