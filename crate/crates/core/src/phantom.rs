//! Synthetic cardiac-like phantoms with ground-truth labels, random smooth
//! deformations and per-sequence intensity tables.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::{warp_labels, warp_volume, AffineTransform, BSplineTransform};
use crate::volume::{class, Geometry, LabelVolume, Volume};

/// Minimum distance in voxels between any labelled structure and the
/// volume border.
pub const MARGIN_VOXELS: f64 = 4.0;

/// Pseudo-sequence whose tissue contrast the phantom mimics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Lge,
    T2,
    Bssfp,
}

impl Modality {
    pub fn table(self) -> IntensityTable {
        match self {
            Modality::Lge => IntensityTable {
                air: 0.0,
                body: 60.0,
                organ: 95.0,
                lung: 15.0,
                bone: 140.0,
                lv_cavity: 200.0,
                myocardium: 35.0,
                rv_cavity: 185.0,
            },
            Modality::T2 => IntensityTable {
                air: 0.0,
                body: 85.0,
                organ: 45.0,
                lung: 25.0,
                bone: 70.0,
                lv_cavity: 60.0,
                myocardium: 125.0,
                rv_cavity: 70.0,
            },
            Modality::Bssfp => IntensityTable {
                air: 5.0,
                body: 95.0,
                organ: 70.0,
                lung: 20.0,
                bone: 110.0,
                lv_cavity: 235.0,
                myocardium: 75.0,
                rv_cavity: 220.0,
            },
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lge" => Ok(Modality::Lge),
            "t2" => Ok(Modality::T2),
            "bssfp" => Ok(Modality::Bssfp),
            other => Err(Error::InvalidInput(format!("unknown modality '{other}' (lge, t2, bssfp)"))),
        }
    }
}

/// Intensity of each tissue. Everything outside the heart is background
/// (class 0) but still gives the registration something to lock onto.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityTable {
    pub air: f32,
    pub body: f32,
    pub organ: f32,
    pub lung: f32,
    pub bone: f32,
    pub lv_cavity: f32,
    pub myocardium: f32,
    pub rv_cavity: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Organ,
    Lung,
    Bone,
}

/// An ellipsoid of one unlabelled tissue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextStructure {
    pub tissue: Tissue,
    /// Centre in voxel coordinates.
    pub center: [f64; 3],
    /// Semi-axes in mm.
    pub radii: [f64; 3],
}

impl ContextStructure {
    pub fn new(tissue: Tissue, center: [f64; 3], radii: [f64; 3]) -> Self {
        Self { tissue, center, radii }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// LV centre in voxel coordinates.
    pub lv_center: [f64; 3],
    /// LV cavity radius (mm).
    pub lv_radius: f64,
    /// Myocardial wall thickness (mm).
    pub myocardium_thickness: f64,
    /// RV ball centre relative to the LV centre (mm).
    pub rv_offset: [f64; 3],
    pub rv_radius: f64,
    /// Body ellipsoid semi-axes (mm), centred on the volume.
    pub body_radii: [f64; 3],
    /// Unlabelled structures inside the body; earlier entries win where
    /// they overlap.
    pub context: Vec<ContextStructure>,
    pub intensities: IntensityTable,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Default anatomy scaled to `dims` at 1 mm spacing.
    pub fn cardiac(dims: [usize; 3], modality: Modality, seed: u64) -> Self {
        let n = dims.map(|d| d as f64);
        let unit = n.iter().cloned().fold(f64::INFINITY, f64::min) / 64.0;
        let c = [n[0] * 0.55, n[1] * 0.5, n[2] * 0.5];
        Self {
            dims,
            spacing: [1.0; 3],
            lv_center: c,
            lv_radius: 9.0 * unit,
            myocardium_thickness: 5.0 * unit,
            rv_offset: [-13.0 * unit, 4.0 * unit, 0.0],
            rv_radius: 12.0 * unit,
            body_radii: [n[0] * 0.47, n[1] * 0.45, n[2] * 0.6],
            context: vec![
                ContextStructure::new(Tissue::Organ, [n[0] * 0.62, n[1] * 0.76, n[2] * 0.45], [11.0 * unit, 6.0 * unit, 10.0 * unit]),
                ContextStructure::new(Tissue::Lung, [n[0] * 0.84, n[1] * 0.47, n[2] * 0.5], [6.0 * unit, 12.0 * unit, 18.0 * unit]),
                ContextStructure::new(Tissue::Lung, [n[0] * 0.19, n[1] * 0.28, n[2] * 0.5], [6.0 * unit, 8.0 * unit, 16.0 * unit]),
                ContextStructure::new(Tissue::Bone, [n[0] * 0.47, n[1] * 0.9, n[2] * 0.5], [4.0 * unit, 3.0 * unit, 40.0 * unit]),
            ],
            intensities: modality.table(),
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::with_spacing(self.dims, self.spacing)
    }

    fn lv_world(&self) -> Vector3<f64> {
        Vector3::from_fn(|a, _| self.lv_center[a] * self.spacing[a])
    }

    fn rv_world(&self) -> Vector3<f64> {
        self.lv_world() + Vector3::from(self.rv_offset)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput("phantom dims and spacing must be positive".into()));
        }
        let positive = [self.lv_radius, self.myocardium_thickness, self.rv_radius];
        let context_radii = self.context.iter().flat_map(|c| c.radii.iter());
        if positive.iter().chain(&self.body_radii).chain(context_radii).any(|&r| !(r > 0.0)) {
            return Err(Error::InvalidInput("phantom radii and thickness must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("noise sigma must be non-negative".into()));
        }
        let outer = self.lv_radius + self.myocardium_thickness;
        let balls = [(self.lv_world(), outer), (self.rv_world(), self.rv_radius)];
        for (centre, radius) in balls {
            for a in 0..3 {
                let lo = (centre[a] - radius) / self.spacing[a];
                let hi = (centre[a] + radius) / self.spacing[a];
                let max = (self.dims[a] - 1) as f64;
                if lo < MARGIN_VOXELS || hi > max - MARGIN_VOXELS {
                    return Err(Error::InvalidInput(format!(
                        "structure spans voxels [{lo:.1}, {hi:.1}] on axis {a}, needs a {MARGIN_VOXELS}-voxel margin inside 0..={max}"
                    )));
                }
            }
        }
        let d = (self.rv_world() - self.lv_world()).norm();
        if d + self.rv_radius <= outer || d >= outer + self.rv_radius {
            return Err(Error::InvalidInput(
                "RV ball must partially overlap the myocardium to form a crescent".into(),
            ));
        }
        Ok(())
    }

    /// Class at a world point, and the tissue intensity there.
    fn tissue(&self, p: &Vector3<f64>, body_centre: &Vector3<f64>) -> (u8, f32) {
        let t = &self.intensities;
        let dl = (p - self.lv_world()).norm();
        let outer = self.lv_radius + self.myocardium_thickness;
        if dl <= self.lv_radius {
            return (class::LV_CAVITY, t.lv_cavity);
        }
        if dl <= outer {
            return (class::LV_MYOCARDIUM, t.myocardium);
        }
        if (p - self.rv_world()).norm() <= self.rv_radius {
            return (class::RV_CAVITY, t.rv_cavity);
        }
        let inside = |c: &Vector3<f64>, r: &[f64; 3]| (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0;
        if !inside(body_centre, &self.body_radii) {
            return (class::BACKGROUND, t.air);
        }
        for c in &self.context {
            let centre = Vector3::from_fn(|a, _| c.center[a] * self.spacing[a]);
            if inside(&centre, &c.radii) {
                let v = match c.tissue {
                    Tissue::Organ => t.organ,
                    Tissue::Lung => t.lung,
                    Tissue::Bone => t.bone,
                };
                return (class::BACKGROUND, v);
            }
        }
        (class::BACKGROUND, t.body)
    }

    /// Exact volume (mm³) of each foreground class for the continuous shapes.
    pub fn analytic_volumes(&self) -> [f64; 3] {
        let r = self.lv_radius;
        let outer = r + self.myocardium_thickness;
        let lv = ball_volume(r);
        let myo = ball_volume(outer) - lv;
        let d = (self.rv_world() - self.lv_world()).norm();
        let rv = ball_volume(self.rv_radius) - lens_volume(outer, self.rv_radius, d);
        [lv, myo, rv]
    }
}

fn ball_volume(r: f64) -> f64 {
    4.0 / 3.0 * PI * r.powi(3)
}

/// Volume of the intersection of two balls of radii `r1`, `r2` whose
/// centres are `d` apart.
pub fn lens_volume(r1: f64, r2: f64, d: f64) -> f64 {
    if d >= r1 + r2 {
        return 0.0;
    }
    if d <= (r1 - r2).abs() {
        return ball_volume(r1.min(r2));
    }
    PI * (r1 + r2 - d).powi(2) * (d * d + 2.0 * d * r2 - 3.0 * r2 * r2 + 2.0 * d * r1 + 6.0 * r1 * r2 - 3.0 * r1 * r1)
        / (12.0 * d)
}

/// Builds the intensity image and its label map.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let geometry = spec.geometry()?;
    let n = spec.dims.map(|d| d as f64);
    let body_centre = Vector3::from_fn(|a, _| (n[a] - 1.0) / 2.0 * spec.spacing[a]);
    let mut labels = Vec::with_capacity(geometry.voxel_count());
    let mut image = Vec::with_capacity(geometry.voxel_count());
    for idx in 0..geometry.voxel_count() {
        let [i, j, k] = geometry.coords(idx);
        let p = geometry.voxel_to_world([i as f64, j as f64, k as f64]);
        let (c, v) = spec.tissue(&p, &body_centre);
        labels.push(c);
        image.push(v);
    }
    let mut image = Volume::new(geometry.clone(), image)?;
    if spec.noise_sigma > 0.0 {
        image = add_noise(&image, spec.noise_sigma, spec.seed)?;
    }
    Ok((image, LabelVolume::new(geometry, labels)?))
}

/// Adds zero-mean Gaussian noise drawn from a generator seeded with `seed`.
pub fn add_noise(vol: &Volume, sigma: f64, seed: u64) -> Result<Volume> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidInput("noise sigma must be non-negative".into()));
    }
    if sigma == 0.0 {
        return Ok(vol.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = vol.data().iter().map(|&v| v + normal.sample(&mut rng) as f32).collect();
    Volume::new(vol.geometry().clone(), data)
}

/// Random B-spline displacement whose dense maximum norm is `max_disp_mm`.
pub fn random_smooth_deformation(
    geometry: &Geometry,
    max_disp_mm: f64,
    grid_spacing: [f64; 3],
    seed: u64,
) -> Result<BSplineTransform> {
    let zero = BSplineTransform::new(geometry.clone(), grid_spacing)?;
    if !(max_disp_mm >= 0.0) || !max_disp_mm.is_finite() {
        return Err(Error::InvalidInput(format!("max displacement {max_disp_mm} must be non-negative")));
    }
    if max_disp_mm == 0.0 {
        return Ok(zero);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<[f64; 3]> = (0..zero.node_count())
        .map(|_| std::array::from_fn(|_| rng.random_range(-max_disp_mm..=max_disp_mm)))
        .collect();
    let t = zero.with_same_lattice(raw)?;
    let peak = t.max_displacement();
    if peak <= 0.0 {
        return Ok(zero);
    }
    let s = max_disp_mm / peak;
    let scaled = t.coefficients().iter().map(|c| c.map(|v| v * s)).collect();
    t.with_same_lattice(scaled)
}

/// Resamples a phantom pair through `id + u` (intensities trilinear, labels
/// nearest neighbour).
pub fn deform_phantom(image: &Volume, labels: &LabelVolume, t: &BSplineTransform) -> Result<(Volume, LabelVolume)> {
    let id = AffineTransform::identity();
    Ok((
        warp_volume(image, image.geometry(), &id, Some(t))?,
        warp_labels(labels, labels.geometry(), &id, Some(t))?,
    ))
}
