//! Cubic B-spline free-form deformation.
//!
//! Control point `(a, b, c)` sits at reference voxel coordinate
//! `((a - 1) * dx, (b - 1) * dy, (c - 1) * dz)`, so the lattice carries one
//! extra node before the first voxel and enough after the last one for every
//! voxel to have a full 4x4x4 support. Coefficients are displacements in mm.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::Geometry;

/// Uniform cubic B-spline.
pub fn bspline_kernel(u: f64) -> f64 {
    let a = u.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + a * a * a / 2.0
    } else if a < 2.0 {
        let t = 2.0 - a;
        t * t * t / 6.0
    } else {
        0.0
    }
}

/// First derivative of [`bspline_kernel`].
pub fn bspline_kernel_d1(u: f64) -> f64 {
    let a = u.abs();
    let s = u.signum();
    if a < 1.0 {
        s * (-2.0 * a + 1.5 * a * a)
    } else if a < 2.0 {
        let t = 2.0 - a;
        -s * t * t / 2.0
    } else {
        0.0
    }
}

/// Second derivative of [`bspline_kernel`].
pub fn bspline_kernel_d2(u: f64) -> f64 {
    let a = u.abs();
    if a < 1.0 {
        -2.0 + 3.0 * a
    } else if a < 2.0 {
        2.0 - a
    } else {
        0.0
    }
}

/// Index of the first supporting node and the four basis weights (value,
/// first and second derivative in node units) at lattice coordinate `t`.
#[inline]
pub(crate) fn basis(t: f64) -> (isize, [[f64; 4]; 3]) {
    let fl = t.floor();
    let u = t - fl;
    let u2 = u * u;
    let u3 = u2 * u;
    let w0 = [
        (1.0 - u).powi(3) / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ];
    let w1 = [
        -(1.0 - u).powi(2) / 2.0,
        (3.0 * u2 - 4.0 * u) / 2.0,
        (-3.0 * u2 + 2.0 * u + 1.0) / 2.0,
        u2 / 2.0,
    ];
    let w2 = [1.0 - u, 3.0 * u - 2.0, -3.0 * u + 1.0, u];
    (fl as isize - 1, [w0, w1, w2])
}

fn lattice_extent(n: usize, spacing: f64) -> usize {
    ((n - 1) as f64 / spacing + 1e-9).floor() as usize + 4
}

/// Dense cubic B-spline displacement field over a reference geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct BSplineTransform {
    geometry: Geometry,
    grid_spacing: [f64; 3],
    grid_dims: [usize; 3],
    coefficients: Vec<[f64; 3]>,
}

impl BSplineTransform {
    /// Zero displacement with control points every `grid_spacing` voxels.
    pub fn new(geometry: Geometry, grid_spacing: [f64; 3]) -> Result<Self> {
        if grid_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidTransform(format!(
                "grid spacing must be positive, got {grid_spacing:?}"
            )));
        }
        let dims = geometry.dims();
        let grid_dims = std::array::from_fn(|a| lattice_extent(dims[a], grid_spacing[a]));
        let count = grid_dims.iter().product();
        Ok(Self {
            geometry,
            grid_spacing,
            grid_dims,
            coefficients: vec![[0.0; 3]; count],
        })
    }

    pub fn with_coefficients(geometry: Geometry, grid_spacing: [f64; 3], coefficients: Vec<[f64; 3]>) -> Result<Self> {
        let mut t = Self::new(geometry, grid_spacing)?;
        if coefficients.len() != t.coefficients.len() {
            return Err(Error::InvalidTransform(format!(
                "expected {} control points for lattice {:?}, got {}",
                t.coefficients.len(),
                t.grid_dims,
                coefficients.len()
            )));
        }
        if coefficients.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite coefficient".into()));
        }
        t.coefficients = coefficients;
        Ok(t)
    }

    /// Same lattice, coefficients replaced.
    pub fn with_same_lattice(&self, coefficients: Vec<[f64; 3]>) -> Result<Self> {
        Self::with_coefficients(self.geometry.clone(), self.grid_spacing, coefficients)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn grid_spacing(&self) -> [f64; 3] {
        self.grid_spacing
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.grid_dims
    }

    pub fn node_count(&self) -> usize {
        self.coefficients.len()
    }

    pub fn coefficients(&self) -> &[[f64; 3]] {
        &self.coefficients
    }

    pub fn into_coefficients(self) -> Vec<[f64; 3]> {
        self.coefficients
    }

    #[inline]
    pub fn node_index(&self, a: usize, b: usize, c: usize) -> usize {
        a + self.grid_dims[0] * (b + self.grid_dims[1] * c)
    }

    /// Reference voxel coordinate of a control point.
    pub fn node_position(&self, a: usize, b: usize, c: usize) -> [f64; 3] {
        let idx = [a, b, c];
        std::array::from_fn(|ax| (idx[ax] as f64 - 1.0) * self.grid_spacing[ax])
    }

    /// Displacement (mm) at a continuous reference voxel coordinate.
    pub fn displacement(&self, x: [f64; 3]) -> Vector3<f64> {
        let mut out = Vector3::zeros();
        self.for_each_weight(x, |node, w| {
            let c = self.coefficients[node];
            out += Vector3::new(c[0], c[1], c[2]) * w;
        });
        out
    }

    /// Full mapping of a voxel coordinate: world position plus displacement.
    pub fn map_point(&self, x: [f64; 3]) -> Vector3<f64> {
        self.geometry.voxel_to_world(x) + self.displacement(x)
    }

    /// Visits the (up to 64) supporting control points of `x` with their
    /// tensor-product weights.
    pub fn for_each_weight(&self, x: [f64; 3], mut f: impl FnMut(usize, f64)) {
        let (bx, wx) = basis(x[0] / self.grid_spacing[0] + 1.0);
        let (by, wy) = basis(x[1] / self.grid_spacing[1] + 1.0);
        let (bz, wz) = basis(x[2] / self.grid_spacing[2] + 1.0);
        let g = self.grid_dims;
        for (c, wzc) in wz[0].iter().enumerate() {
            let nz = bz + c as isize;
            if nz < 0 || nz >= g[2] as isize {
                continue;
            }
            for (b, wyb) in wy[0].iter().enumerate() {
                let ny = by + b as isize;
                if ny < 0 || ny >= g[1] as isize {
                    continue;
                }
                for (a, wxa) in wx[0].iter().enumerate() {
                    let nx = bx + a as isize;
                    if nx < 0 || nx >= g[0] as isize {
                        continue;
                    }
                    f(self.node_index(nx as usize, ny as usize, nz as usize), wxa * wyb * wzc);
                }
            }
        }
    }

    /// Displacement at every reference voxel.
    pub fn dense_field(&self) -> Vec<[f64; 3]> {
        FieldSampler::full(self).evaluate(&self.coefficients, [0, 0, 0])
    }

    /// Largest displacement norm over the reference voxels (mm).
    pub fn max_displacement(&self) -> f64 {
        self.dense_field()
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
            .fold(0.0, f64::max)
    }

    /// Exact dyadic subdivision: halves the control point spacing while
    /// representing the same displacement field.
    pub fn refine(&self) -> Result<Self> {
        let spacing = self.grid_spacing.map(|s| s / 2.0);
        let mut fine = Self::new(self.geometry.clone(), spacing)?;
        let gc = self.grid_dims;
        let gf = fine.grid_dims;

        // x
        let mut t1 = vec![[0.0; 3]; gf[0] * gc[1] * gc[2]];
        for c in 0..gc[2] {
            for b in 0..gc[1] {
                let line: Vec<[f64; 3]> = (0..gc[0]).map(|a| self.coefficients[self.node_index(a, b, c)]).collect();
                for (a, v) in subdivide(&line, gf[0]).into_iter().enumerate() {
                    t1[a + gf[0] * (b + gc[1] * c)] = v;
                }
            }
        }
        // y
        let mut t2 = vec![[0.0; 3]; gf[0] * gf[1] * gc[2]];
        for c in 0..gc[2] {
            for a in 0..gf[0] {
                let line: Vec<[f64; 3]> = (0..gc[1]).map(|b| t1[a + gf[0] * (b + gc[1] * c)]).collect();
                for (b, v) in subdivide(&line, gf[1]).into_iter().enumerate() {
                    t2[a + gf[0] * (b + gf[1] * c)] = v;
                }
            }
        }
        // z
        for b in 0..gf[1] {
            for a in 0..gf[0] {
                let line: Vec<[f64; 3]> = (0..gc[2]).map(|c| t2[a + gf[0] * (b + gf[1] * c)]).collect();
                for (c, v) in subdivide(&line, gf[2]).into_iter().enumerate() {
                    let idx = fine.node_index(a, b, c);
                    fine.coefficients[idx] = v;
                }
            }
        }
        Ok(fine)
    }
}

/// 1D cubic B-spline subdivision; coarse nodes past the end count as zero.
fn subdivide(coarse: &[[f64; 3]], fine_len: usize) -> Vec<[f64; 3]> {
    let get = |i: isize| -> [f64; 3] {
        if i >= 0 && (i as usize) < coarse.len() {
            coarse[i as usize]
        } else {
            [0.0; 3]
        }
    };
    (0..fine_len)
        .map(|b| {
            let b = b as isize;
            if b % 2 == 1 {
                let a = (b + 1) / 2;
                let (p, q, r) = (get(a - 1), get(a), get(a + 1));
                std::array::from_fn(|k| (p[k] + 6.0 * q[k] + r[k]) / 8.0)
            } else {
                let a = b / 2;
                let (p, q) = (get(a), get(a + 1));
                std::array::from_fn(|k| (p[k] + q[k]) / 2.0)
            }
        })
        .collect()
}

struct AxisTable {
    base: Vec<usize>,
    weights: [Vec<[f64; 4]>; 3],
}

impl AxisTable {
    fn new(positions: &[f64], grid_spacing: f64, grid_len: usize) -> Self {
        let mut base = Vec::with_capacity(positions.len());
        let mut weights: [Vec<[f64; 4]>; 3] = Default::default();
        for &x in positions {
            let (b, w) = basis(x / grid_spacing + 1.0);
            assert!(
                b >= 0 && (b as usize) + 4 <= grid_len,
                "sample {x} outside control lattice"
            );
            base.push(b as usize);
            for (o, wo) in w.iter().enumerate() {
                weights[o].push(*wo);
            }
        }
        Self { base, weights }
    }
}

/// Evaluates a B-spline field and its derivatives on a rectilinear set of
/// sample positions by three separable passes, and applies the transposed
/// operator to scatter per-sample quantities back onto the lattice.
pub(crate) struct FieldSampler {
    out_dims: [usize; 3],
    grid_dims: [usize; 3],
    axes: [AxisTable; 3],
    /// d/dmm per d/dnode along each axis.
    deriv_scale: [f64; 3],
}

impl FieldSampler {
    /// Samples along each axis at the given reference voxel coordinates.
    pub(crate) fn new(t: &BSplineTransform, positions: [&[f64]; 3]) -> Self {
        let spacing = t.geometry.spacing();
        let axes = std::array::from_fn(|a| AxisTable::new(positions[a], t.grid_spacing[a], t.grid_dims[a]));
        Self {
            out_dims: std::array::from_fn(|a| positions[a].len()),
            grid_dims: t.grid_dims,
            axes,
            deriv_scale: std::array::from_fn(|a| 1.0 / (t.grid_spacing[a] * spacing[a])),
        }
    }

    /// Samples at every reference voxel.
    pub(crate) fn full(t: &BSplineTransform) -> Self {
        let dims = t.geometry.dims();
        let pos: [Vec<f64>; 3] = std::array::from_fn(|a| (0..dims[a]).map(|i| i as f64).collect());
        Self::new(t, [&pos[0], &pos[1], &pos[2]])
    }

    pub(crate) fn out_dims(&self) -> [usize; 3] {
        self.out_dims
    }

    fn scale(&self, orders: [usize; 3]) -> f64 {
        (0..3).map(|a| self.deriv_scale[a].powi(orders[a] as i32)).product()
    }

    /// Field derivative of the given per-axis order (0, 1 or 2) at every
    /// sample, x-fastest, in mm per mm^order.
    pub(crate) fn evaluate(&self, coeffs: &[[f64; 3]], orders: [usize; 3]) -> Vec<[f64; 3]> {
        let [gx, gy, _gz] = self.grid_dims;
        let [nx, ny, nz] = self.out_dims;
        let [ax, ay, az] = &self.axes;
        let (wx, wy, wz) = (&ax.weights[orders[0]], &ay.weights[orders[1]], &az.weights[orders[2]]);

        // z pass: (gx, gy, nz)
        let mut t1 = vec![[0.0; 3]; gx * gy * nz];
        t1.par_chunks_mut(gx * gy).enumerate().for_each(|(k, slab)| {
            let b0 = az.base[k];
            let w = wz[k];
            for (ab, out) in slab.iter_mut().enumerate() {
                let mut acc = [0.0; 3];
                for (c, wc) in w.iter().enumerate() {
                    let v = coeffs[ab + gx * gy * (b0 + c)];
                    acc[0] += wc * v[0];
                    acc[1] += wc * v[1];
                    acc[2] += wc * v[2];
                }
                *out = acc;
            }
        });
        // y pass: (gx, ny, nz)
        let mut t2 = vec![[0.0; 3]; gx * ny * nz];
        t2.par_chunks_mut(gx * ny).enumerate().for_each(|(k, slab)| {
            for j in 0..ny {
                let b0 = ay.base[j];
                let w = wy[j];
                for a in 0..gx {
                    let mut acc = [0.0; 3];
                    for (b, wb) in w.iter().enumerate() {
                        let v = t1[a + gx * ((b0 + b) + gy * k)];
                        acc[0] += wb * v[0];
                        acc[1] += wb * v[1];
                        acc[2] += wb * v[2];
                    }
                    slab[a + gx * j] = acc;
                }
            }
        });
        // x pass: (nx, ny, nz)
        let scale = self.scale(orders);
        let mut out = vec![[0.0; 3]; nx * ny * nz];
        out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
            for j in 0..ny {
                let row = &t2[gx * (j + ny * k)..gx * (j + ny * k) + gx];
                for i in 0..nx {
                    let b0 = ax.base[i];
                    let w = wx[i];
                    let mut acc = [0.0; 3];
                    for (a, wa) in w.iter().enumerate() {
                        let v = row[b0 + a];
                        acc[0] += wa * v[0];
                        acc[1] += wa * v[1];
                        acc[2] += wa * v[2];
                    }
                    slab[i + nx * j] = [acc[0] * scale, acc[1] * scale, acc[2] * scale];
                }
            }
        });
        out
    }

    /// Transpose of [`FieldSampler::evaluate`]: maps a per-sample vector
    /// field onto control point coefficients.
    pub(crate) fn adjoint(&self, field: &[[f64; 3]], orders: [usize; 3]) -> Vec<[f64; 3]> {
        let [gx, gy, gz] = self.grid_dims;
        let [nx, ny, nz] = self.out_dims;
        let [ax, ay, az] = &self.axes;
        let (wx, wy, wz) = (&ax.weights[orders[0]], &ay.weights[orders[1]], &az.weights[orders[2]]);
        let scale = self.scale(orders);

        // x^T: (gx, ny, nz)
        let mut t2 = vec![[0.0; 3]; gx * ny * nz];
        t2.par_chunks_mut(gx * ny).enumerate().for_each(|(k, slab)| {
            for j in 0..ny {
                let row = &mut slab[gx * j..gx * j + gx];
                for i in 0..nx {
                    let v = field[i + nx * (j + ny * k)];
                    let b0 = ax.base[i];
                    for (a, wa) in wx[i].iter().enumerate() {
                        let r = &mut row[b0 + a];
                        r[0] += wa * v[0];
                        r[1] += wa * v[1];
                        r[2] += wa * v[2];
                    }
                }
            }
        });
        // y^T: (gx, gy, nz)
        let mut t1 = vec![[0.0; 3]; gx * gy * nz];
        t1.par_chunks_mut(gx * gy).enumerate().for_each(|(k, slab)| {
            for j in 0..ny {
                let b0 = ay.base[j];
                for (b, wb) in wy[j].iter().enumerate() {
                    for a in 0..gx {
                        let v = t2[a + gx * (j + ny * k)];
                        let r = &mut slab[a + gx * (b0 + b)];
                        r[0] += wb * v[0];
                        r[1] += wb * v[1];
                        r[2] += wb * v[2];
                    }
                }
            }
        });
        // z^T: (gx, gy, gz)
        let plane = gx * gy;
        let mut out = vec![[0.0; 3]; plane * gz];
        out.par_chunks_mut(plane).enumerate().for_each(|(c, slab)| {
            for k in 0..nz {
                let b0 = az.base[k];
                if c < b0 || c >= b0 + 4 {
                    continue;
                }
                let w = wz[k][c - b0] * scale;
                let src = &t1[plane * k..plane * (k + 1)];
                for (r, v) in slab.iter_mut().zip(src) {
                    r[0] += w * v[0];
                    r[1] += w * v[1];
                    r[2] += w * v[2];
                }
            }
        });
        out
    }
}
