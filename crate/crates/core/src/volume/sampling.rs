use super::{Geometry, LabelVolume, Volume};
use crate::error::{Error, Result};

/// Slack allowed past the first/last voxel centre before a point counts as
/// outside the grid; absorbs round-off from world/voxel round trips.
pub(crate) const BOUNDS_EPS: f64 = 1e-6;

#[inline]
fn locate_axis(x: f64, n: usize) -> Option<(usize, f64)> {
    let hi = (n - 1) as f64;
    if !(x >= -BOUNDS_EPS && x <= hi + BOUNDS_EPS) {
        return None;
    }
    if n == 1 {
        return Some((0, 0.0));
    }
    let x = x.clamp(0.0, hi);
    let i0 = (x.floor() as usize).min(n - 2);
    Some((i0, x - i0 as f64))
}

#[inline]
pub(crate) fn nearest_index(dims: [usize; 3], p: [f64; 3]) -> Option<usize> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        if !(p[a] >= -BOUNDS_EPS && p[a] <= hi + BOUNDS_EPS) {
            return None;
        }
        idx[a] = ((p[a].clamp(0.0, hi) + 0.5).floor() as usize).min(dims[a] - 1);
    }
    Some(idx[0] + dims[0] * (idx[1] + dims[1] * idx[2]))
}

/// Trilinear interpolation on raw x-fastest data; `None` outside the grid.
#[inline]
pub(crate) fn interp(data: &[f32], dims: [usize; 3], p: [f64; 3]) -> Option<f64> {
    let (x0, fx) = locate_axis(p[0], dims[0])?;
    let (y0, fy) = locate_axis(p[1], dims[1])?;
    let (z0, fz) = locate_axis(p[2], dims[2])?;
    let sx = usize::from(dims[0] > 1);
    let sy = if dims[1] > 1 { dims[0] } else { 0 };
    let sz = if dims[2] > 1 { dims[0] * dims[1] } else { 0 };
    let base = x0 + dims[0] * (y0 + dims[1] * z0);
    let v = |o: usize| data[base + o] as f64;
    let c00 = v(0) * (1.0 - fx) + v(sx) * fx;
    let c10 = v(sy) * (1.0 - fx) + v(sy + sx) * fx;
    let c01 = v(sz) * (1.0 - fx) + v(sz + sx) * fx;
    let c11 = v(sz + sy) * (1.0 - fx) + v(sz + sy + sx) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    Some(c0 * (1.0 - fz) + c1 * fz)
}

/// Trilinear value plus its exact derivative with respect to the voxel
/// coordinate.
#[inline]
pub(crate) fn interp_grad(data: &[f32], dims: [usize; 3], p: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let (x0, fx) = locate_axis(p[0], dims[0])?;
    let (y0, fy) = locate_axis(p[1], dims[1])?;
    let (z0, fz) = locate_axis(p[2], dims[2])?;
    let sx = usize::from(dims[0] > 1);
    let sy = if dims[1] > 1 { dims[0] } else { 0 };
    let sz = if dims[2] > 1 { dims[0] * dims[1] } else { 0 };
    let base = x0 + dims[0] * (y0 + dims[1] * z0);
    let v = |o: usize| data[base + o] as f64;
    let (v000, v100, v010, v110) = (v(0), v(sx), v(sy), v(sy + sx));
    let (v001, v101, v011, v111) = (v(sz), v(sz + sx), v(sz + sy), v(sz + sy + sx));

    let c00 = v000 + (v100 - v000) * fx;
    let c10 = v010 + (v110 - v010) * fx;
    let c01 = v001 + (v101 - v001) * fx;
    let c11 = v011 + (v111 - v011) * fx;
    let c0 = c00 + (c10 - c00) * fy;
    let c1 = c01 + (c11 - c01) * fy;
    let value = c0 + (c1 - c0) * fz;

    let dx0 = (v100 - v000) + ((v110 - v010) - (v100 - v000)) * fy;
    let dx1 = (v101 - v001) + ((v111 - v011) - (v101 - v001)) * fy;
    let dx = if sx == 0 { 0.0 } else { dx0 + (dx1 - dx0) * fz };
    let dy = if sy == 0 { 0.0 } else { (c10 - c00) + ((c11 - c01) - (c10 - c00)) * fz };
    let dz = if sz == 0 { 0.0 } else { c1 - c0 };
    Some((value, [dx, dy, dz]))
}

/// Trilinear sample at a continuous voxel coordinate; zero outside the grid.
pub fn sample_trilinear(vol: &Volume, p: [f64; 3]) -> f64 {
    sample_trilinear_with(vol, p, 0.0)
}

/// Trilinear sample returning `padding` for points outside `[0, n-1]`.
pub fn sample_trilinear_with(vol: &Volume, p: [f64; 3], padding: f64) -> f64 {
    interp(vol.data(), vol.dims(), p).unwrap_or(padding)
}

fn resampled_geometry(geom: &Geometry, target_spacing: [f64; 3]) -> Result<Geometry> {
    if target_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let dims = geom.dims();
    let spacing = geom.spacing();
    let new_dims: [usize; 3] = std::array::from_fn(|a| {
        let extent = dims[a] as f64 * spacing[a] / target_spacing[a];
        // guard against 20.000000001 -> 21
        ((extent - 1e-9).ceil() as usize).max(1)
    });
    geom.resized(new_dims, target_spacing)
}

fn source_position(out: &Geometry, src: &Geometry, i: usize, j: usize, k: usize) -> [f64; 3] {
    let s_out = out.spacing();
    let s_src = src.spacing();
    let dims = src.dims();
    let idx = [i, j, k];
    std::array::from_fn(|a| (idx[a] as f64 * s_out[a] / s_src[a]).min((dims[a] - 1) as f64))
}

/// Resamples an intensity volume to a new voxel spacing, keeping origin and
/// direction. Output points past the last input voxel centre take the edge
/// value.
pub fn resample(vol: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    let out = resampled_geometry(vol.geometry(), target_spacing)?;
    let src = vol.geometry().clone();
    let dims = vol.dims();
    Volume::from_fn(out.clone(), |i, j, k| {
        let p = source_position(&out, &src, i, j, k);
        interp(vol.data(), dims, p).unwrap_or(0.0) as f32
    })
}

/// Nearest-neighbour counterpart of [`resample`] for label maps.
pub fn resample_labels(labels: &LabelVolume, target_spacing: [f64; 3]) -> Result<LabelVolume> {
    let out = resampled_geometry(labels.geometry(), target_spacing)?;
    let src = labels.geometry().clone();
    let dims = labels.dims();
    LabelVolume::from_fn(out.clone(), |i, j, k| {
        let p = source_position(&out, &src, i, j, k);
        nearest_index(dims, p).map_or(0, |idx| labels.data()[idx])
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    (-radius..=radius)
        .map(|t| (-(t as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Separable Gaussian blur with per-axis sigma in voxels. Taps falling off
/// the grid are dropped and the remaining weights renormalised.
pub fn gaussian_smooth(vol: &Volume, sigma_voxels: [f64; 3]) -> Result<Volume> {
    let dims = vol.dims();
    let mut cur: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let sigma = sigma_voxels[axis];
        if sigma <= 0.0 || dims[axis] == 1 {
            continue;
        }
        let kernel = gaussian_kernel(sigma);
        let radius = (kernel.len() / 2) as isize;
        let n = dims[axis] as isize;
        let stride = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = ((idx / stride) % dims[axis]) as isize;
            let line_start = idx - pos as usize * stride;
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let q = pos + t as isize - radius;
                if q >= 0 && q < n {
                    acc += w * cur[line_start + q as usize * stride];
                    wsum += w;
                }
            }
            *out = acc / wsum;
        }
        cur = next;
    }
    Volume::new(vol.geometry().clone(), cur.into_iter().map(|v| v as f32).collect())
}
