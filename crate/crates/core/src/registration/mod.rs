//! Coarse-to-fine symmetric B-spline registration on top of an affine
//! initialisation.

mod affine;
mod pyramid;

pub use affine::{register_affine, register_affine_with, AffineConfig};
pub use pyramid::{level_factors, MIN_LEVEL_DIM, SMOOTHING_SIGMA};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::engine::{LevelGrid, LevelObjective};
use crate::objective::{ObjectiveWeights, DEFAULT_BINS};
use crate::transform::{warp_volume, AffineTransform, BSplineTransform};
use crate::volume::Volume;
use pyramid::level_image;

/// The two registration set-ups of the pipeline: between LGE atlases and
/// the target (`Type1`), and between sequences of one patient (`Type2`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegistrationKind {
    Type1,
    Type2,
}

impl std::str::FromStr for RegistrationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "type1" => Ok(Self::Type1),
            "type2" => Ok(Self::Type2),
            other => Err(Error::InvalidInput(format!("unknown preset '{other}' (type1, type2)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub levels: usize,
    pub max_iter_per_level: usize,
    /// Control point spacing at the finest level, in reference voxels.
    pub final_grid_spacing: f64,
    pub weights: ObjectiveWeights,
    /// A level stops once the line search step drops below this (mm).
    pub step_tolerance: f64,
    /// A level stops once an accepted step improves the objective by less
    /// than this fraction.
    pub objective_tolerance: f64,
}

pub fn default_config(kind: RegistrationKind) -> RegistrationConfig {
    let weights = ObjectiveWeights {
        alpha: 0.001,
        beta: 0.001,
    };
    let (levels, max_iter_per_level, final_grid_spacing) = match kind {
        RegistrationKind::Type1 => (5, 300, 5.0),
        RegistrationKind::Type2 => (6, 4000, 1.0),
    };
    RegistrationConfig {
        levels,
        max_iter_per_level,
        final_grid_spacing,
        weights,
        step_tolerance: 0.01,
        objective_tolerance: 1e-5,
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.max_iter_per_level == 0 {
            return Err(Error::InvalidInput("levels and max_iter_per_level must be at least 1".into()));
        }
        if !(self.final_grid_spacing >= 1.0) {
            return Err(Error::InvalidInput(format!(
                "final grid spacing {} must be at least one voxel",
                self.final_grid_spacing
            )));
        }
        if !(self.step_tolerance > 0.0) || !(self.objective_tolerance >= 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        self.weights.validate()
    }

    /// Control point spacing (voxels) at level `level` (0 = coarsest).
    pub fn grid_spacing_at(&self, level: usize) -> f64 {
        self.final_grid_spacing * 2f64.powi((self.levels - 1 - level) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    /// Image subsampling factor per axis relative to the reference.
    pub image_factors: [usize; 3],
    /// Control point spacing in reference voxels.
    pub grid_spacing: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub affine: AffineTransform,
    /// Reference voxel -> affinely aligned floating image.
    pub fwd: BSplineTransform,
    /// Affinely aligned floating image -> reference.
    pub bwd: BSplineTransform,
    /// Objective after each accepted step, starting with the level's initial
    /// value.
    pub objective_trace: Vec<Vec<f64>>,
    /// Whether each level stopped on a tolerance rather than the iteration cap.
    pub converged: Vec<bool>,
    pub levels: Vec<LevelSummary>,
}

/// Affine initialisation followed by symmetric B-spline registration.
pub fn register(reference: &Volume, floating: &Volume, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    let affine = register_affine(reference, floating)?;
    register_ffd(reference, floating, &affine, cfg)
}

/// Symmetric B-spline registration of `floating` (after `affine`) to
/// `reference`, coarse to fine.
pub fn register_ffd(
    reference: &Volume,
    floating: &Volume,
    affine: &AffineTransform,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let geometry = reference.geometry().clone();
    let aligned = warp_volume(floating, &geometry, affine, None)?;
    let coarse = cfg.grid_spacing_at(0);
    let mut fwd = BSplineTransform::new(geometry.clone(), [coarse; 3])?;
    let mut bwd = fwd.clone();
    let mut trace = Vec::with_capacity(cfg.levels);
    let mut converged = Vec::with_capacity(cfg.levels);
    let mut summaries = Vec::with_capacity(cfg.levels);
    let min_spacing = geometry.spacing().iter().cloned().fold(f64::INFINITY, f64::min);

    for level in 0..cfg.levels {
        if level > 0 {
            fwd = fwd.refine()?;
            bwd = bwd.refine()?;
        }
        let nominal = 1usize << (cfg.levels - 1 - level);
        let grid = LevelGrid::new(&geometry, level_factors(geometry.dims(), nominal));
        let factors = grid.factors();
        let ref_data = level_image(reference, &grid)?;
        let float_data = level_image(&aligned, &grid)?;
        let objective = LevelObjective::new(grid, &fwd, ref_data, float_data, DEFAULT_BINS)?;
        let initial_step = 0.4 * cfg.grid_spacing_at(level) * min_spacing;
        let outcome = ascend(&objective, &mut fwd, &mut bwd, cfg, initial_step, level)?;
        summaries.push(LevelSummary {
            image_factors: factors,
            grid_spacing: cfg.grid_spacing_at(level),
            iterations: outcome.trace.len() - 1,
        });
        trace.push(outcome.trace);
        converged.push(outcome.converged);
    }
    Ok(RegistrationResult {
        affine: affine.clone(),
        fwd,
        bwd,
        objective_trace: trace,
        converged,
        levels: summaries,
    })
}

struct LevelOutcome {
    trace: Vec<f64>,
    converged: bool,
}

fn numerical(level: usize, iteration: usize, e: Error) -> Error {
    match e {
        Error::NumericalFailure { detail, .. } => Error::NumericalFailure {
            level,
            iteration,
            detail,
        },
        other => other,
    }
}

/// Gradient ascent on both coefficient sets jointly; the step is the
/// largest per-node move in mm and is halved until the objective rises.
fn ascend(
    objective: &LevelObjective,
    fwd: &mut BSplineTransform,
    bwd: &mut BSplineTransform,
    cfg: &RegistrationConfig,
    initial_step: f64,
    level: usize,
) -> Result<LevelOutcome> {
    let w = &cfg.weights;
    let mut cf = fwd.coefficients().to_vec();
    let mut cb = bwd.coefficients().to_vec();
    let mut current = objective.evaluate(&cf, &cb, w, true).map_err(|e| numerical(level, 0, e))?;
    let mut trace = vec![current.value];
    let mut step = initial_step;
    let mut converged = false;

    for iteration in 1..=cfg.max_iter_per_level {
        let gmax = current
            .grad_fwd
            .iter()
            .chain(&current.grad_bwd)
            .map(|g| (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt())
            .fold(0.0, f64::max);
        if !gmax.is_finite() {
            return Err(Error::NumericalFailure {
                level,
                iteration,
                detail: "non-finite gradient".into(),
            });
        }
        if gmax == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = None;
        while step >= cfg.step_tolerance {
            let k = step / gmax;
            let tf: Vec<[f64; 3]> = cf.iter().zip(&current.grad_fwd).map(|(c, g)| std::array::from_fn(|i| c[i] + k * g[i])).collect();
            let tb: Vec<[f64; 3]> = cb.iter().zip(&current.grad_bwd).map(|(c, g)| std::array::from_fn(|i| c[i] + k * g[i])).collect();
            let trial = objective.evaluate(&tf, &tb, w, false).map_err(|e| numerical(level, iteration, e))?;
            if trial.value > current.value {
                accepted = Some((tf, tb, trial.value));
                break;
            }
            step /= 2.0;
        }
        let Some((tf, tb, value)) = accepted else {
            converged = true;
            break;
        };
        let gain = (value - current.value) / current.value.abs().max(1e-12);
        cf = tf;
        cb = tb;
        trace.push(value);
        if gain < cfg.objective_tolerance {
            converged = true;
            break;
        }
        current = objective.evaluate(&cf, &cb, w, true).map_err(|e| numerical(level, iteration, e))?;
        step = (step * 2.0).min(initial_step);
    }
    *fwd = fwd.with_same_lattice(cf)?;
    *bwd = bwd.with_same_lattice(cb)?;
    Ok(LevelOutcome { trace, converged })
}
