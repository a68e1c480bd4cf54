//! Evaluation of the symmetric registration objective on one sampling grid
//! (a pyramid level or the full reference grid), with gradients with
//! respect to both coefficient sets.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::histogram::{accumulate, IntensityRange, NmiDerivative, CHUNK};
use super::{ObjectiveTerms, ObjectiveWeights};
use crate::error::{Error, Result};
use crate::transform::{interpolate_field, BSplineTransform, FieldSampler};
use crate::volume::sampling::interp_grad;
use crate::volume::Geometry;

/// Second-derivative orders and their weights in the bending energy.
const BENDING_TERMS: [([usize; 3], f64); 6] = [
    ([2, 0, 0], 1.0),
    ([0, 2, 0], 1.0),
    ([0, 0, 2], 1.0),
    ([1, 1, 0], 2.0),
    ([1, 0, 1], 2.0),
    ([0, 1, 1], 2.0),
];

/// Regular subsampling of a reference grid: level voxel `i` sits at full
/// resolution voxel `i * factor` on each axis.
#[derive(Clone, Debug)]
pub(crate) struct LevelGrid {
    dims: [usize; 3],
    factors: [usize; 3],
    positions: [Vec<f64>; 3],
    /// Level voxel offset per mm of world displacement.
    to_level: Matrix3<f64>,
}

impl LevelGrid {
    pub fn new(geometry: &Geometry, factors: [usize; 3]) -> Self {
        let full = geometry.dims();
        let dims: [usize; 3] = std::array::from_fn(|a| (full[a] - 1) / factors[a] + 1);
        let positions = std::array::from_fn(|a| (0..dims[a]).map(|i| (i * factors[a]) as f64).collect());
        let s = geometry.spacing();
        let inv = Matrix3::from_diagonal(&Vector3::new(
            1.0 / (s[0] * factors[0] as f64),
            1.0 / (s[1] * factors[1] as f64),
            1.0 / (s[2] * factors[2] as f64),
        ));
        Self {
            dims,
            factors,
            positions,
            to_level: inv * geometry.direction().transpose(),
        }
    }

    pub fn full(geometry: &Geometry) -> Self {
        Self::new(geometry, [1, 1, 1])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn factors(&self) -> [usize; 3] {
        self.factors
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Picks the level samples out of full-resolution data.
    pub fn decimate(&self, full_dims: [usize; 3], data: &[f32]) -> Vec<f32> {
        let [nx, ny, nz] = self.dims;
        let [fx, fy, fz] = self.factors;
        let mut out = Vec::with_capacity(nx * ny * nz);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.push(data[i * fx + full_dims[0] * (j * fy + full_dims[1] * k * fz)]);
                }
            }
        }
        out
    }
}

/// Objective value, its terms and (optionally) gradients for both fields.
#[derive(Clone, Debug)]
pub(crate) struct Evaluation {
    pub value: f64,
    pub terms: ObjectiveTerms,
    pub grad_fwd: Vec<[f64; 3]>,
    pub grad_bwd: Vec<[f64; 3]>,
}

/// Reference and (affinely pre-aligned) floating image sampled on a level
/// grid, with both fields defined over the full-resolution reference.
pub(crate) struct LevelObjective {
    grid: LevelGrid,
    sampler: FieldSampler,
    reference: Vec<f32>,
    floating: Vec<f32>,
    ref_range: IntensityRange,
    float_range: IntensityRange,
    ref_pos: Vec<f64>,
    float_pos: Vec<f64>,
    bins: usize,
}

impl LevelObjective {
    pub fn new(
        grid: LevelGrid,
        lattice: &BSplineTransform,
        reference: Vec<f32>,
        floating: Vec<f32>,
        bins: usize,
    ) -> Result<Self> {
        let n = grid.voxel_count();
        if reference.len() != n || floating.len() != n {
            return Err(Error::InvalidInput(format!(
                "level images have {} and {} voxels, grid has {n}",
                reference.len(),
                floating.len()
            )));
        }
        let ref_range = IntensityRange::robust(&reference, bins)?;
        let float_range = IntensityRange::robust(&floating, bins)?;
        let ref_pos = reference.iter().map(|&v| ref_range.position(v as f64).0).collect();
        let float_pos = floating.iter().map(|&v| float_range.position(v as f64).0).collect();
        let sampler = FieldSampler::new(
            lattice,
            [&grid.positions[0], &grid.positions[1], &grid.positions[2]],
        );
        Ok(Self {
            grid,
            sampler,
            reference,
            floating,
            ref_range,
            float_range,
            ref_pos,
            float_pos,
            bins,
        })
    }

    /// Dense displacement (mm) of a coefficient set at the level samples.
    pub fn field(&self, coeffs: &[[f64; 3]]) -> Vec<[f64; 3]> {
        self.sampler.evaluate(coeffs, [0, 0, 0])
    }

    pub fn evaluate(
        &self,
        fwd: &[[f64; 3]],
        bwd: &[[f64; 3]],
        weights: &ObjectiveWeights,
        want_grad: bool,
    ) -> Result<Evaluation> {
        let field_f = self.field(fwd);
        let field_b = self.field(bwd);
        let sim_w = weights.similarity();

        let (nmi_fwd, dense_f) = self.similarity(&self.ref_pos, &self.floating, &self.float_range, &field_f, want_grad)?;
        let (nmi_bwd, dense_b) = self.similarity(&self.float_pos, &self.reference, &self.ref_range, &field_b, want_grad)?;
        let grad_inc = want_grad && weights.beta > 0.0;
        let (inconsistency, inc_f, inc_b) = self.inconsistency(&field_f, &field_b, grad_inc);

        let grad_bend = want_grad && weights.alpha > 0.0;
        let (bending_fwd, bend_f) = self.bending(fwd, grad_bend);
        let (bending_bwd, bend_b) = self.bending(bwd, grad_bend);

        let value = sim_w * (nmi_fwd + nmi_bwd) - weights.alpha * (bending_fwd + bending_bwd) - weights.beta * inconsistency;
        if !value.is_finite() {
            return Err(Error::NumericalFailure {
                level: 0,
                iteration: 0,
                detail: format!("objective evaluated to {value}"),
            });
        }
        let terms = ObjectiveTerms {
            nmi_fwd,
            nmi_bwd,
            bending_fwd,
            bending_bwd,
            inconsistency,
        };
        if !want_grad {
            return Ok(Evaluation {
                value,
                terms,
                grad_fwd: Vec::new(),
                grad_bwd: Vec::new(),
            });
        }

        let combine = |sim: Vec<[f64; 3]>, inc: Option<Vec<[f64; 3]>>| -> Vec<[f64; 3]> {
            let mut dense = sim;
            for v in dense.iter_mut() {
                for c in v.iter_mut() {
                    *c *= sim_w;
                }
            }
            if let Some(inc) = inc {
                for (d, g) in dense.iter_mut().zip(&inc) {
                    for c in 0..3 {
                        d[c] -= weights.beta * g[c];
                    }
                }
            }
            self.sampler.adjoint(&dense, [0, 0, 0])
        };
        let mut grad_fwd = combine(dense_f.unwrap_or_default(), inc_f);
        let mut grad_bwd = combine(dense_b.unwrap_or_default(), inc_b);
        for (grad, bend) in [(&mut grad_fwd, bend_f), (&mut grad_bwd, bend_b)] {
            if let Some(bend) = bend {
                for (g, b) in grad.iter_mut().zip(&bend) {
                    for c in 0..3 {
                        g[c] -= weights.alpha * b[c];
                    }
                }
            }
        }
        Ok(Evaluation {
            value,
            terms,
            grad_fwd,
            grad_bwd,
        })
    }

    /// NMI between a fixed image (given by its bin positions) and a moving
    /// image warped by `field`, plus d NMI / d displacement per sample.
    fn similarity(
        &self,
        fixed_pos: &[f64],
        moving: &[f32],
        moving_range: &IntensityRange,
        field: &[[f64; 3]],
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<[f64; 3]>>)> {
        let dims = self.grid.dims;
        let l = self.grid.to_level;
        let samples: Vec<(f64, [f64; 3])> = (0..field.len())
            .into_par_iter()
            .map(|idx| {
                let i = idx % dims[0];
                let j = (idx / dims[0]) % dims[1];
                let k = idx / (dims[0] * dims[1]);
                let u = field[idx];
                let off = l * Vector3::new(u[0], u[1], u[2]);
                let (v, g) = sample_clamped(moving, dims, [i as f64 + off[0], j as f64 + off[1], k as f64 + off[2]]);
                let (s, ds) = moving_range.position(v);
                let world = l.transpose() * Vector3::new(g[0], g[1], g[2]) * ds;
                (s, [world[0], world[1], world[2]])
            })
            .collect();
        let moving_pos: Vec<Option<f64>> = samples.iter().map(|&(p, _)| Some(p)).collect();
        let hist = accumulate(self.bins, fixed_pos, &moving_pos);
        let deriv = NmiDerivative::new(&hist)?;
        if !want_grad {
            return Ok((deriv.value, None));
        }
        let grad = samples
            .par_iter()
            .zip(fixed_pos.par_iter())
            .map(|(&(mp, dsdu), &fp)| {
                let d = deriv.d_float_pos(fp, mp);
                [d * dsdu[0], d * dsdu[1], d * dsdu[2]]
            })
            .collect();
        Ok((deriv.value, Some(grad)))
    }

    /// Mean summed squared second derivative and its coefficient gradient.
    fn bending(&self, coeffs: &[[f64; 3]], want_grad: bool) -> (f64, Option<Vec<[f64; 3]>>) {
        bending_on(&self.sampler, coeffs, want_grad)
    }

    /// Mean squared round-trip residual in both directions, with the
    /// gradient with respect to each dense field.
    #[allow(clippy::type_complexity)]
    fn inconsistency(
        &self,
        field_f: &[[f64; 3]],
        field_b: &[[f64; 3]],
        want_grad: bool,
    ) -> (f64, Option<Vec<[f64; 3]>>, Option<Vec<[f64; 3]>>) {
        inconsistency_on(self.grid.dims, &self.grid.to_level, field_f, field_b, want_grad)
    }
}

pub(crate) fn bending_on(
    sampler: &FieldSampler,
    coeffs: &[[f64; 3]],
    want_grad: bool,
) -> (f64, Option<Vec<[f64; 3]>>) {
    let n = sampler.out_dims().iter().product::<usize>() as f64;
    let mut total = 0.0;
    let mut grad: Option<Vec<[f64; 3]>> = want_grad.then(|| vec![[0.0; 3]; coeffs.len()]);
    for (orders, weight) in BENDING_TERMS {
        let d = sampler.evaluate(coeffs, orders);
        total += weight * ordered_sum(&d, |v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if let Some(g) = grad.as_mut() {
            let f = 2.0 * weight / n;
            let scaled: Vec<[f64; 3]> = d.iter().map(|v| [f * v[0], f * v[1], f * v[2]]).collect();
            for (acc, a) in g.iter_mut().zip(sampler.adjoint(&scaled, orders)) {
                for c in 0..3 {
                    acc[c] += a[c];
                }
            }
        }
    }
    (total / n, grad)
}

/// Round trip `u_b(x) + u_f(x + L u_b(x))` and its mirror, with `u_f`, `u_b`
/// dense fields on `dims` and `L` mapping mm to voxel offsets.
#[allow(clippy::type_complexity)]
pub(crate) fn inconsistency_on(
    dims: [usize; 3],
    to_level: &Matrix3<f64>,
    field_f: &[[f64; 3]],
    field_b: &[[f64; 3]],
    want_grad: bool,
) -> (f64, Option<Vec<[f64; 3]>>, Option<Vec<[f64; 3]>>) {
    let n = field_f.len() as f64;
    let (v1, outer_f, inner_b) = round_trip(dims, to_level, field_b, field_f, want_grad);
    let (v2, outer_b, inner_f) = round_trip(dims, to_level, field_f, field_b, want_grad);
    let value = (v1 + v2) / n;
    if !want_grad {
        return (value, None, None);
    }
    let sum = |a: Vec<[f64; 3]>, b: Vec<[f64; 3]>| -> Vec<[f64; 3]> {
        a.iter()
            .zip(&b)
            .map(|(x, y)| std::array::from_fn(|c| 2.0 * (x[c] + y[c]) / n))
            .collect()
    };
    let grad_f = sum(outer_f.unwrap(), inner_f.unwrap());
    let grad_b = sum(outer_b.unwrap(), inner_b.unwrap());
    (value, Some(grad_f), Some(grad_b))
}

/// Sum over samples of `|inner(x) + outer(x + L inner(x))|^2`, with the
/// unnormalised half-gradients with respect to the outer and inner fields.
#[allow(clippy::type_complexity)]
fn round_trip(
    dims: [usize; 3],
    l: &Matrix3<f64>,
    inner: &[[f64; 3]],
    outer: &[[f64; 3]],
    want_grad: bool,
) -> (f64, Option<Vec<[f64; 3]>>, Option<Vec<[f64; 3]>>) {
    let residuals: Vec<([f64; 3], [f64; 3], [f64; 3])> = (0..inner.len())
        .into_par_iter()
        .map(|idx| {
            let i = idx % dims[0];
            let j = (idx / dims[0]) % dims[1];
            let k = idx / (dims[0] * dims[1]);
            let u = inner[idx];
            let off = l * Vector3::new(u[0], u[1], u[2]);
            let y = [i as f64 + off[0], j as f64 + off[1], k as f64 + off[2]];
            let (w, jac) = interpolate_field(outer, dims, y);
            let r = [u[0] + w[0], u[1] + w[1], u[2] + w[2]];
            // (I + J L)^T r
            let mut inner_grad = r;
            if want_grad {
                let jl: [[f64; 3]; 3] =
                    std::array::from_fn(|c| std::array::from_fn(|b| (0..3).map(|a| jac[c][a] * l[(a, b)]).sum()));
                for b in 0..3 {
                    inner_grad[b] += (0..3).map(|c| jl[c][b] * r[c]).sum::<f64>();
                }
            }
            (r, y, inner_grad)
        })
        .collect();
    let value = ordered_sum(&residuals, |(r, _, _)| r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
    if !want_grad {
        return (value, None, None);
    }
    let mut outer_grad = vec![[0.0; 3]; outer.len()];
    for (r, y, _) in &residuals {
        scatter_trilinear(&mut outer_grad, dims, *y, *r);
    }
    let inner_grad = residuals.into_iter().map(|(_, _, g)| g).collect();
    (value, Some(outer_grad), Some(inner_grad))
}

/// Trilinear sample with coordinates clamped to the grid, so that every
/// reference voxel keeps contributing however far the field pushes it; the
/// derivative is zero along clamped axes.
fn sample_clamped(data: &[f32], dims: [usize; 3], p: [f64; 3]) -> (f64, [f64; 3]) {
    let mut q = p;
    let mut clamped = [false; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        if !(p[a] > 0.0 && p[a] < hi) {
            q[a] = p[a].clamp(0.0, hi);
            clamped[a] = p[a] != q[a];
        }
    }
    let (v, mut g) = interp_grad(data, dims, q).unwrap_or((0.0, [0.0; 3]));
    for a in 0..3 {
        if clamped[a] {
            g[a] = 0.0;
        }
    }
    (v, g)
}

/// Transpose of the clamped trilinear interpolation in [`interpolate_field`].
fn scatter_trilinear(buf: &mut [[f64; 3]], dims: [usize; 3], p: [f64; 3], v: [f64; 3]) {
    let mut corners = [[(0usize, 1.0f64), (0usize, 0.0f64)]; 3];
    for a in 0..3 {
        let n = dims[a];
        if n == 1 {
            continue;
        }
        let xc = p[a].clamp(0.0, (n - 1) as f64);
        let base = (xc.floor() as usize).min(n - 2);
        let f = xc - base as f64;
        corners[a] = [(base, 1.0 - f), (base + 1, f)];
    }
    for &(k, wz) in &corners[2] {
        for &(j, wy) in &corners[1] {
            for &(i, wx) in &corners[0] {
                let w = wx * wy * wz;
                if w != 0.0 {
                    let cell = &mut buf[i + dims[0] * (j + dims[1] * k)];
                    for c in 0..3 {
                        cell[c] += w * v[c];
                    }
                }
            }
        }
    }
}

/// Sum of `f` over `items` using fixed-size partial sums added in order, so
/// the result does not depend on the thread count.
pub(crate) fn ordered_sum<T: Sync>(items: &[T], f: impl Fn(&T) -> f64 + Sync) -> f64 {
    let partials: Vec<f64> = items.par_chunks(CHUNK).map(|c| c.iter().map(&f).sum()).collect();
    partials.iter().sum()
}
