//! The symmetric registration objective: normalised mutual information in
//! both directions, minus weighted bending energy and inverse-consistency
//! penalties, with analytic gradients in the B-spline coefficients.

pub(crate) mod engine;
mod histogram;

pub use histogram::{nmi, parzen_weight, percentile, IntensityRange, JointHistogram, DEFAULT_BINS};
pub(crate) use histogram::accumulate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::{BSplineTransform, FieldSampler};
use crate::volume::Volume;
use engine::{bending_on, inconsistency_on, LevelGrid, LevelObjective};

/// Regulariser weights; the similarity weight is `1 - alpha - beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl ObjectiveWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.alpha) && (0.0..1.0).contains(&self.beta) && self.alpha + self.beta < 1.0;
        if !ok {
            return Err(Error::InvalidInput(format!(
                "weights alpha={} beta={} must lie in [0, 1) with alpha + beta < 1",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn similarity(&self) -> f64 {
        1.0 - self.alpha - self.beta
    }
}

/// The individual terms behind an objective value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    /// NMI of the reference against the floating image under `fwd`.
    pub nmi_fwd: f64,
    /// NMI of the floating image against the reference under `bwd`.
    pub nmi_bwd: f64,
    pub bending_fwd: f64,
    pub bending_bwd: f64,
    pub inconsistency: f64,
}

#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub value: f64,
    pub terms: ObjectiveTerms,
    /// d value / d coefficient, one entry per control point of `fwd`.
    pub grad_fwd: Vec<[f64; 3]>,
    pub grad_bwd: Vec<[f64; 3]>,
}

/// Parzen joint histogram of two images on the same grid, using
/// [`DEFAULT_BINS`] bins per axis.
pub fn build_joint_histogram(reference: &Volume, warped: &Volume, mask: Option<&[bool]>) -> Result<JointHistogram> {
    build_joint_histogram_with_bins(reference, warped, mask, DEFAULT_BINS)
}

pub fn build_joint_histogram_with_bins(
    reference: &Volume,
    warped: &Volume,
    mask: Option<&[bool]>,
    bins: usize,
) -> Result<JointHistogram> {
    reference.geometry().ensure_matches(warped.geometry())?;
    let n = reference.data().len();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::InvalidInput(format!("mask has {} entries, image has {n}", m.len())));
        }
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let r: Vec<f32> = (0..n).filter(|&i| keep(i)).map(|i| reference.data()[i]).collect();
    let f: Vec<f32> = (0..n).filter(|&i| keep(i)).map(|i| warped.data()[i]).collect();
    let rr = IntensityRange::robust(&r, bins)?;
    let fr = IntensityRange::robust(&f, bins)?;
    let rp: Vec<f64> = r.iter().map(|&v| rr.position(v as f64).0).collect();
    let fp: Vec<Option<f64>> = f.iter().map(|&v| Some(fr.position(v as f64).0)).collect();
    Ok(accumulate(bins, &rp, &fp))
}

/// Mean over reference voxels of the squared second derivatives of the
/// displacement, cross terms counted twice.
pub fn bending_energy(t: &BSplineTransform) -> f64 {
    bending_on(&FieldSampler::full(t), t.coefficients(), false).0
}

/// Bending energy and its gradient with respect to each coefficient.
pub fn bending_energy_gradient(t: &BSplineTransform) -> (f64, Vec<[f64; 3]>) {
    let (v, g) = bending_on(&FieldSampler::full(t), t.coefficients(), true);
    (v, g.unwrap_or_default())
}

fn check_pair(fwd: &BSplineTransform, bwd: &BSplineTransform) -> Result<()> {
    fwd.geometry().ensure_matches(bwd.geometry())?;
    if fwd.grid_dims() != bwd.grid_dims() || fwd.grid_spacing() != bwd.grid_spacing() {
        return Err(Error::InvalidTransform(
            "forward and backward transforms use different control lattices".into(),
        ));
    }
    Ok(())
}

/// Mean squared residual of `fwd ∘ bwd` plus that of `bwd ∘ fwd`, in mm².
pub fn inconsistency_penalty(fwd: &BSplineTransform, bwd: &BSplineTransform) -> Result<f64> {
    Ok(inconsistency_gradient_impl(fwd, bwd, false)?.0)
}

/// Inconsistency penalty with gradients with respect to the coefficients of
/// `fwd` and `bwd`.
pub fn inconsistency_gradient(
    fwd: &BSplineTransform,
    bwd: &BSplineTransform,
) -> Result<(f64, Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    inconsistency_gradient_impl(fwd, bwd, true)
}

fn inconsistency_gradient_impl(
    fwd: &BSplineTransform,
    bwd: &BSplineTransform,
    want_grad: bool,
) -> Result<(f64, Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    check_pair(fwd, bwd)?;
    let geom = fwd.geometry();
    let grid = LevelGrid::full(geom);
    let sampler = FieldSampler::full(fwd);
    let ff = sampler.evaluate(fwd.coefficients(), [0, 0, 0]);
    let fb = sampler.evaluate(bwd.coefficients(), [0, 0, 0]);
    let to_voxel = crate::transform::voxel_gradient_to_world(geom).transpose();
    let (v, gf, gb) = inconsistency_on(grid.dims(), &to_voxel, &ff, &fb, want_grad);
    match (gf, gb) {
        (Some(gf), Some(gb)) => Ok((v, sampler.adjoint(&gf, [0, 0, 0]), sampler.adjoint(&gb, [0, 0, 0]))),
        _ => Ok((v, Vec::new(), Vec::new())),
    }
}

/// Symmetric objective at full resolution. `floating` must already be on
/// the reference grid (e.g. affinely resampled); `fwd` maps reference
/// voxels into it and `bwd` maps back.
pub fn objective(
    reference: &Volume,
    floating: &Volume,
    fwd: &BSplineTransform,
    bwd: &BSplineTransform,
    weights: &ObjectiveWeights,
) -> Result<ObjectiveValue> {
    weights.validate()?;
    reference.geometry().ensure_matches(floating.geometry())?;
    reference.geometry().ensure_matches(fwd.geometry())?;
    check_pair(fwd, bwd)?;
    let level = LevelObjective::new(
        LevelGrid::full(reference.geometry()),
        fwd,
        reference.data().to_vec(),
        floating.data().to_vec(),
        DEFAULT_BINS,
    )?;
    let e = level.evaluate(fwd.coefficients(), bwd.coefficients(), weights, true)?;
    Ok(ObjectiveValue {
        value: e.value,
        terms: e.terms,
        grad_fwd: e.grad_fwd,
        grad_bwd: e.grad_bwd,
    })
}

/// NMI between `reference` and `floating` warped by `t`, with its gradient
/// with respect to the coefficients of `t`.
pub fn similarity_gradient(reference: &Volume, floating: &Volume, t: &BSplineTransform) -> Result<(f64, Vec<[f64; 3]>)> {
    let zero = t.with_same_lattice(vec![[0.0; 3]; t.node_count()])?;
    let v = objective(reference, floating, t, &zero, &ObjectiveWeights { alpha: 0.0, beta: 0.0 })?;
    Ok((v.terms.nmi_fwd, v.grad_fwd))
}
