//! Label fusion: majority voting of propagated atlas labels, agreement-based
//! refinement with same-patient sequences, median fusion of model
//! probability maps, and largest-component clean-up.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::{default_config, register, RegistrationConfig, RegistrationKind, RegistrationResult};
use crate::transform::warp_labels;
use crate::volume::nifti::read_volume;
use crate::volume::{class, LabelVolume, ProbabilityVolume, Volume, MAX_CLASS};

const CLASS_COUNT: usize = MAX_CLASS as usize + 1;

fn ensure_same_geometry(labels: &[&LabelVolume]) -> Result<()> {
    let first = labels[0].geometry();
    for l in &labels[1..] {
        first.ensure_matches(l.geometry())?;
    }
    Ok(())
}

/// Per-voxel most frequent class; ties go to the smallest class id.
pub fn majority_vote(warped_labels: &[LabelVolume]) -> Result<LabelVolume> {
    if warped_labels.is_empty() {
        return Err(Error::InvalidInput("majority vote needs at least one label map".into()));
    }
    let refs: Vec<&LabelVolume> = warped_labels.iter().collect();
    ensure_same_geometry(&refs)?;
    let n = warped_labels[0].data().len();
    let data = (0..n)
        .into_par_iter()
        .map(|idx| {
            let mut votes = [0usize; CLASS_COUNT];
            for l in warped_labels {
                votes[l.data()[idx] as usize] += 1;
            }
            let mut best = 0;
            for c in 1..CLASS_COUNT {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new(warped_labels[0].geometry().clone(), data)
}

/// Where the two same-patient propagations agree, their class; elsewhere
/// the type-1 label.
pub fn consistency_refine(type1: &LabelVolume, from_bssfp: &LabelVolume, from_t2: &LabelVolume) -> Result<LabelVolume> {
    ensure_same_geometry(&[type1, from_bssfp, from_t2])?;
    let data = type1
        .data()
        .iter()
        .zip(from_bssfp.data().iter().zip(from_t2.data()))
        .map(|(&t, (&b, &c))| if b == c { b } else { t })
        .collect();
    LabelVolume::new(type1.geometry().clone(), data)
}

/// Median of `values` (sorted in place); the mean of the two middle values
/// for an even count.
fn median(values: &mut [f32]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] as f64 + values[n / 2] as f64) / 2.0
    }
}

/// Channel-wise median across models followed by argmax (ties to the
/// smallest class id).
pub fn ensemble_fuse(probs: &[ProbabilityVolume]) -> Result<LabelVolume> {
    let Some(first) = probs.first() else {
        return Err(Error::InvalidInput("ensemble fusion needs at least one model".into()));
    };
    let channels = first.channel_count();
    if channels > CLASS_COUNT {
        return Err(Error::InvalidInput(format!(
            "{channels} channels exceed the {CLASS_COUNT} supported classes"
        )));
    }
    for (m, p) in probs.iter().enumerate().skip(1) {
        if p.channel_count() != channels {
            return Err(Error::InvalidInput(format!(
                "model {m} has {} channels, model 0 has {channels}",
                p.channel_count()
            )));
        }
        first.geometry().ensure_matches(p.geometry())?;
    }
    let n = first.geometry().voxel_count();
    let data = (0..n)
        .into_par_iter()
        .map(|idx| {
            let mut values = vec![0f32; probs.len()];
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..channels {
                for (v, p) in values.iter_mut().zip(probs) {
                    *v = p.channel(c)[idx];
                }
                let m = median(&mut values);
                if m > best.1 {
                    best = (c, m);
                }
            }
            best.0 as u8
        })
        .collect();
    LabelVolume::new(first.geometry().clone(), data)
}

/// Keeps the largest 26-connected foreground component; ties go to the
/// component containing the lowest voxel index.
pub fn largest_component(labels: &LabelVolume) -> LabelVolume {
    let dims = labels.dims();
    let data = labels.data();
    let n = data.len();
    let mut component = vec![u32::MAX; n];
    let mut best: Option<(u32, usize)> = None;
    let mut queue = VecDeque::new();
    let mut next_id = 0u32;
    for seed in 0..n {
        if data[seed] == class::BACKGROUND || component[seed] != u32::MAX {
            continue;
        }
        let id = next_id;
        next_id += 1;
        component[seed] = id;
        queue.push_back(seed);
        let mut size = 0usize;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let [i, j, k] = [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])];
            for dk in -1isize..=1 {
                for dj in -1isize..=1 {
                    for di in -1isize..=1 {
                        let (ni, nj, nk) = (i as isize + di, j as isize + dj, k as isize + dk);
                        if ni < 0 || nj < 0 || nk < 0 {
                            continue;
                        }
                        let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
                        if ni >= dims[0] || nj >= dims[1] || nk >= dims[2] {
                            continue;
                        }
                        let nidx = ni + dims[0] * (nj + dims[1] * nk);
                        if data[nidx] != class::BACKGROUND && component[nidx] == u32::MAX {
                            component[nidx] = id;
                            queue.push_back(nidx);
                        }
                    }
                }
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((id, size));
        }
    }
    let Some((keep, _)) = best else {
        return labels.clone();
    };
    let out = data
        .iter()
        .zip(&component)
        .map(|(&c, &id)| if id == keep { c } else { class::BACKGROUND })
        .collect();
    LabelVolume::new(labels.geometry().clone(), out).expect("class ids unchanged")
}

/// An annotated image to propagate onto a target.
#[derive(Clone, Debug)]
pub struct Atlas {
    pub image: Volume,
    pub labels: LabelVolume,
}

impl Atlas {
    pub fn new(image: Volume, labels: LabelVolume) -> Result<Self> {
        image.geometry().ensure_matches(labels.geometry())?;
        Ok(Self { image, labels })
    }
}

/// Same-patient sequences with annotations, registered to the target with
/// the type-2 set-up.
#[derive(Clone, Debug)]
pub struct SamePatient {
    pub bssfp: Atlas,
    pub t2: Atlas,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelOptions {
    pub type1: RegistrationConfig,
    pub type2: RegistrationConfig,
}

impl Default for PseudoLabelOptions {
    fn default() -> Self {
        Self {
            type1: default_config(RegistrationKind::Type1),
            type2: default_config(RegistrationKind::Type2),
        }
    }
}

/// One atlas registration and the labels it propagated.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub registration: RegistrationResult,
    pub labels: LabelVolume,
}

#[derive(Clone, Debug)]
pub struct PseudoLabels {
    /// Final pseudo label.
    pub labels: LabelVolume,
    /// Majority vote of the type-1 propagations.
    pub majority: LabelVolume,
    pub atlases: Vec<Propagation>,
    /// bSSFP then T2 propagations, when same-patient data was supplied.
    pub same_patient: Option<(Propagation, Propagation)>,
}

fn propagate(target: &Volume, atlas: &Atlas, cfg: &RegistrationConfig, index: usize) -> Result<Propagation> {
    let wrap = |e: Error| Error::Atlas {
        index,
        source: Box::new(e),
    };
    let registration = register(target, &atlas.image, cfg).map_err(wrap)?;
    let labels = warp_labels(
        &atlas.labels,
        target.geometry(),
        &registration.affine,
        Some(&registration.fwd),
    )
    .map_err(wrap)?;
    Ok(Propagation { registration, labels })
}

/// Registers every atlas to `target`, majority-votes the propagated labels
/// and, given same-patient sequences, refines the vote where they agree.
///
/// Errors carry the atlas index; the same-patient bSSFP and T2 images are
/// numbered after the LGE atlases.
pub fn build_pseudo_labels(
    target: &Volume,
    atlases: &[Atlas],
    same_patient: Option<&SamePatient>,
    options: &PseudoLabelOptions,
) -> Result<PseudoLabels> {
    if atlases.is_empty() {
        return Err(Error::InvalidInput("at least one LGE atlas is required".into()));
    }
    options.type1.validate()?;
    let propagations: Vec<Propagation> = atlases
        .par_iter()
        .enumerate()
        .map(|(i, a)| propagate(target, a, &options.type1, i))
        .collect::<Result<_>>()?;
    let warped: Vec<LabelVolume> = propagations.iter().map(|p| p.labels.clone()).collect();
    let majority = majority_vote(&warped)?;
    let (labels, same) = match same_patient {
        None => (majority.clone(), None),
        Some(sp) => {
            options.type2.validate()?;
            let base = atlases.len();
            let (b, t) = rayon::join(
                || propagate(target, &sp.bssfp, &options.type2, base),
                || propagate(target, &sp.t2, &options.type2, base + 1),
            );
            let (b, t) = (b?, t?);
            (consistency_refine(&majority, &b.labels, &t.labels)?, Some((b, t)))
        }
    };
    Ok(PseudoLabels {
        labels,
        majority,
        atlases: propagations,
        same_patient: same,
    })
}

/// Reads model probability maps listed in a manifest: one line per model,
/// comma-separated per-class NIfTI paths (relative paths resolve against
/// the manifest's directory). Blank lines and `#` comments are ignored.
pub fn read_probability_manifest(path: impl AsRef<Path>) -> Result<Vec<ProbabilityVolume>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut models = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let paths: Vec<PathBuf> = line
            .split(',')
            .map(|p| {
                let p = PathBuf::from(p.trim());
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            })
            .collect();
        let vols = paths.iter().map(read_volume).collect::<Result<Vec<_>>>()?;
        let geometry = vols[0].geometry().clone();
        for v in &vols[1..] {
            geometry.ensure_matches(v.geometry())?;
        }
        let channels = vols.into_iter().map(Volume::into_data).collect();
        let model = ProbabilityVolume::new(geometry, channels).map_err(|e| match e {
            Error::InvalidInput(msg) => Error::InvalidInput(format!("{}:{}: {msg}", path.display(), lineno + 1)),
            other => other,
        })?;
        models.push(model);
    }
    if models.is_empty() {
        return Err(Error::InvalidInput(format!("{} lists no models", path.display())));
    }
    Ok(models)
}
