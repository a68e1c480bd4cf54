//! Twelve-parameter affine alignment maximising NMI, coarse to fine.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pyramid::{level_factors, level_image};
use crate::error::{Error, Result};
use crate::objective::engine::LevelGrid;
use crate::objective::{accumulate, nmi, IntensityRange, DEFAULT_BINS};
use crate::transform::AffineTransform;
use crate::volume::sampling::interp;
use crate::volume::{gaussian_smooth, Geometry, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineConfig {
    /// Subsampling factor per level, coarse to fine.
    pub factors: Vec<usize>,
    pub max_iter_per_level: usize,
    /// Stop a level once the accepted step falls below this (mm).
    pub step_tolerance: f64,
    pub objective_tolerance: f64,
}

impl Default for AffineConfig {
    fn default() -> Self {
        Self {
            factors: vec![4, 2, 1],
            max_iter_per_level: 60,
            step_tolerance: 0.01,
            objective_tolerance: 1e-6,
        }
    }
}

/// Intensity-weighted centre of mass in world coordinates.
fn center_of_mass(vol: &Volume) -> Result<Vector3<f64>> {
    let (lo, _) = vol.min_max();
    let g = vol.geometry();
    let mut acc = Vector3::zeros();
    let mut total = 0.0;
    for (idx, &v) in vol.data().iter().enumerate() {
        let w = (v - lo) as f64;
        if w > 0.0 {
            let [i, j, k] = g.coords(idx);
            acc += g.voxel_to_world([i as f64, j as f64, k as f64]) * w;
            total += w;
        }
    }
    if total <= 0.0 {
        return Err(Error::DegenerateInput("image has no intensity variation".into()));
    }
    Ok(acc / total)
}

/// Parameters: translation (mm) then the nine entries of the linear part's
/// deviation from identity, multiplied by `radius` so all are in mm.
struct Parameterisation {
    ref_center: Vector3<f64>,
    float_center: Vector3<f64>,
    radius: f64,
}

impl Parameterisation {
    fn matrix(&self, p: &[f64; 12]) -> Matrix4<f64> {
        let mut lin = Matrix3::identity();
        for r in 0..3 {
            for c in 0..3 {
                lin[(r, c)] += p[3 + 3 * r + c] / self.radius;
            }
        }
        let off = self.float_center + Vector3::new(p[0], p[1], p[2]) - lin * self.ref_center;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&lin);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&off);
        m
    }
}

struct AffineLevel<'a> {
    world: Vec<Vector4<f64>>,
    ref_pos: Vec<f64>,
    float: &'a Volume,
    float_data: Vec<f32>,
    float_range: IntensityRange,
    float_inv: Matrix4<f64>,
}

impl AffineLevel<'_> {
    fn value(&self, m: &Matrix4<f64>) -> Result<f64> {
        let to_voxel = self.float_inv * m;
        let dims = self.float.dims();
        let padding = self.float_range.position(self.float_range.lo()).0;
        let pos: Vec<Option<f64>> = self
            .world
            .par_iter()
            .map(|w| {
                let p = to_voxel * w;
                let v = interp(&self.float_data, dims, [p[0], p[1], p[2]]);
                Some(v.map_or(padding, |v| self.float_range.position(v).0))
            })
            .collect();
        nmi(&accumulate(DEFAULT_BINS, &self.ref_pos, &pos))
    }
}

/// Affine map from reference world to floating world maximising NMI,
/// starting from centre-of-mass alignment.
pub fn register_affine(reference: &Volume, floating: &Volume) -> Result<AffineTransform> {
    register_affine_with(reference, floating, &AffineConfig::default())
}

pub fn register_affine_with(reference: &Volume, floating: &Volume, cfg: &AffineConfig) -> Result<AffineTransform> {
    if cfg.factors.is_empty() || cfg.max_iter_per_level == 0 {
        return Err(Error::InvalidInput("affine registration needs at least one level and iteration".into()));
    }
    IntensityRange::robust(reference.data(), DEFAULT_BINS)?;
    IntensityRange::robust(floating.data(), DEFAULT_BINS)?;
    let rg = reference.geometry();
    let extent: Vec<f64> = (0..3).map(|a| rg.dims()[a] as f64 * rg.spacing()[a]).collect();
    let param = Parameterisation {
        ref_center: center_of_mass(reference)?,
        float_center: center_of_mass(floating)?,
        radius: extent.iter().cloned().fold(0.0, f64::max) / 2.0,
    };
    let min_spacing = rg.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
    let float_inv = floating
        .geometry()
        .voxel_to_world_matrix()
        .try_inverse()
        .ok_or_else(|| Error::Geometry("floating geometry is not invertible".into()))?;

    let mut p = [0.0; 12];
    for &nominal in &cfg.factors {
        let factors = level_factors(rg.dims(), nominal);
        let grid = LevelGrid::new(rg, factors);
        let ref_data = level_image(reference, &grid)?;
        let float_sigma = float_sigma(floating.geometry(), rg, factors);
        let float_data = if float_sigma.iter().any(|&s| s > 0.0) {
            gaussian_smooth(floating, float_sigma)?.into_data()
        } else {
            floating.data().to_vec()
        };
        let ref_range = IntensityRange::robust(&ref_data, DEFAULT_BINS)?;
        let float_range = IntensityRange::robust(&float_data, DEFAULT_BINS)?;
        let world = level_world_points(rg, &grid);
        let level = AffineLevel {
            world,
            ref_pos: ref_data.iter().map(|&v| ref_range.position(v as f64).0).collect(),
            float: floating,
            float_data,
            float_range,
            float_inv,
        };
        let scale = nominal.max(1) as f64 * min_spacing;
        ascend(&level, &param, &mut p, scale, cfg)?;
    }
    AffineTransform::new(param.matrix(&p))
}

/// Smoothing for the floating image matching the reference level's scale.
fn float_sigma(float: &Geometry, reference: &Geometry, factors: [usize; 3]) -> [f64; 3] {
    std::array::from_fn(|a| {
        if factors[a] > 1 {
            super::pyramid::SMOOTHING_SIGMA * factors[a] as f64 * reference.spacing()[a] / float.spacing()[a]
        } else {
            0.0
        }
    })
}

fn level_world_points(g: &Geometry, grid: &LevelGrid) -> Vec<Vector4<f64>> {
    let m = g.voxel_to_world_matrix();
    let [nx, ny, nz] = grid.dims();
    let f = grid.factors();
    let mut out = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out.push(m * Vector4::new((i * f[0]) as f64, (j * f[1]) as f64, (k * f[2]) as f64, 1.0));
            }
        }
    }
    out
}

/// Gradient ascent with central-difference gradients and a halving line
/// search; `scale` (mm) sets the finite-difference and initial step sizes.
fn ascend(level: &AffineLevel, param: &Parameterisation, p: &mut [f64; 12], scale: f64, cfg: &AffineConfig) -> Result<()> {
    let h = 0.25 * scale;
    let max_step = 2.0 * scale;
    let mut step = max_step;
    let mut value = level.value(&param.matrix(p))?;
    for _ in 0..cfg.max_iter_per_level {
        let mut grad = [0.0; 12];
        for i in 0..12 {
            let mut hi = *p;
            let mut lo = *p;
            hi[i] += h;
            lo[i] -= h;
            grad[i] = (level.value(&param.matrix(&hi))? - level.value(&param.matrix(&lo))?) / (2.0 * h);
        }
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax == 0.0 || !gmax.is_finite() {
            break;
        }
        let mut accepted = None;
        while step >= cfg.step_tolerance {
            let trial: [f64; 12] = std::array::from_fn(|i| p[i] + step * grad[i] / gmax);
            let m = param.matrix(&trial);
            if m.fixed_view::<3, 3>(0, 0).determinant() > 1e-3 {
                let v = level.value(&m)?;
                if v > value {
                    accepted = Some((trial, v));
                    break;
                }
            }
            step /= 2.0;
        }
        let Some((trial, v)) = accepted else { break };
        let gain = (v - value) / value.abs().max(1e-12);
        *p = trial;
        value = v;
        step = (step * 2.0).min(max_step);
        if gain < cfg.objective_tolerance {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, Modality, PhantomSpec};
    use crate::transform::warp_volume;

    #[test]
    fn self_registration_is_identity() {
        let spec = PhantomSpec::cardiac([40, 40, 40], Modality::Lge, 1);
        let (v, _) = generate_phantom(&spec).unwrap();
        let a = register_affine(&v, &v).unwrap();
        let dev = (a.matrix() - Matrix4::identity()).norm();
        assert!(dev <= 1e-2, "deviation {dev}");
    }

    #[test]
    fn recovers_translation() {
        let (v, _) = generate_phantom(&PhantomSpec::cardiac([40, 40, 40], Modality::Lge, 1)).unwrap();
        let shift = Vector3::new(4.0, 0.0, 0.0);
        let moved = warp_volume(&v, v.geometry(), &AffineTransform::translation(-shift), None).unwrap();
        let a = register_affine(&v, &moved).unwrap();
        let err = (a.apply(&v.geometry().center()) - v.geometry().center() - shift).norm();
        assert!(err <= 0.5, "translation error {err}");
    }

    #[test]
    fn recovers_scale() {
        let (v, _) = generate_phantom(&PhantomSpec::cardiac([40, 40, 40], Modality::Lge, 1)).unwrap();
        let c = v.geometry().center();
        let shrink = AffineTransform::about_center(Matrix3::identity() / 1.1, c, Vector3::zeros()).unwrap();
        let scaled = warp_volume(&v, v.geometry(), &shrink, None).unwrap();
        let a = register_affine(&v, &scaled).unwrap();
        let lin = a.linear();
        for i in 0..3 {
            assert!((lin[(i, i)] / 1.1 - 1.0).abs() <= 0.02, "{lin}");
        }
    }

    #[test]
    fn center_of_mass_of_symmetric_blob() {
        let g = Geometry::with_spacing([9, 9, 9], [1.0; 3]).unwrap();
        let v = Volume::from_fn(g, |i, j, k| {
            let d = (i as f64 - 4.0).powi(2) + (j as f64 - 4.0).powi(2) + (k as f64 - 4.0).powi(2);
            (-d / 4.0).exp() as f32
        })
        .unwrap();
        let c = center_of_mass(&v).unwrap();
        assert!((c - Vector3::new(4.0, 4.0, 4.0)).norm() < 1e-6);
    }
}
