//! Volumetric data types: scalar images, label maps and per-class
//! probability maps sharing one voxel geometry.
//!
//! Voxel data is stored x-fastest: `index = i + nx * (j + ny * k)`.

mod geometry;
pub mod nifti;
pub(crate) mod sampling;

pub use geometry::Geometry;
pub use sampling::{gaussian_smooth, resample, resample_labels, sample_trilinear, sample_trilinear_with};

use crate::error::{Error, Result};

/// Highest class id a [`LabelVolume`] may hold.
pub const MAX_CLASS: u8 = 3;

/// Class ids used throughout the crate.
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const LV_CAVITY: u8 = 1;
    pub const LV_MYOCARDIUM: u8 = 2;
    pub const RV_CAVITY: u8 = 3;

    /// Foreground classes in report order.
    pub const FOREGROUND: [u8; 3] = [LV_CAVITY, LV_MYOCARDIUM, RV_CAVITY];

    pub fn name(id: u8) -> &'static str {
        match id {
            BACKGROUND => "Background",
            LV_CAVITY => "LV Cavity",
            LV_MYOCARDIUM => "LV Myocardium",
            RV_CAVITY => "RV Cavity",
            _ => "Unknown",
        }
    }
}

/// A scalar image on a voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidInput(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at voxel {pos}"
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [nx, ny, nz] = geometry.dims();
        let mut data = Vec::with_capacity(geometry.voxel_count());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(geometry, data)
    }

    pub fn filled(geometry: Geometry, value: f32) -> Result<Self> {
        let n = geometry.voxel_count();
        Self::new(geometry, vec![value; n])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.geometry.index(i, j, k)]
    }

    /// Returns a copy with every value passed through `f`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.geometry.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Per-voxel class ids in `0..=MAX_CLASS`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, data: Vec<u8>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidInput(format!(
                "label length {} does not match dims {:?}",
                data.len(),
                geometry.dims()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&c| c > MAX_CLASS) {
            return Err(Error::InvalidInput(format!("class id {bad} out of range 0..={MAX_CLASS}")));
        }
        Ok(Self { geometry, data })
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> u8) -> Result<Self> {
        let [nx, ny, nz] = geometry.dims();
        let mut data = Vec::with_capacity(geometry.voxel_count());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(geometry, data)
    }

    pub fn background(geometry: Geometry) -> Self {
        let n = geometry.voxel_count();
        Self {
            geometry,
            data: vec![class::BACKGROUND; n],
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.geometry.index(i, j, k)]
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.data.iter().filter(|&&c| c == class_id).count()
    }

    /// Class ids present, ascending.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; MAX_CLASS as usize + 1];
        for &c in &self.data {
            seen[c as usize] = true;
        }
        (0..=MAX_CLASS).filter(|&c| seen[c as usize]).collect()
    }

    /// Intensity image with each class id as its value.
    pub fn to_volume(&self) -> Volume {
        Volume {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|&c| c as f32).collect(),
        }
    }
}

/// Per-class probability channels; each voxel's channels sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume {
    geometry: Geometry,
    channels: Vec<Vec<f32>>,
}

impl ProbabilityVolume {
    pub const SUM_TOLERANCE: f32 = 1e-4;

    pub fn new(geometry: Geometry, channels: Vec<Vec<f32>>) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "probability volume needs at least 2 channels, got {}",
                channels.len()
            )));
        }
        let n = geometry.voxel_count();
        for (c, ch) in channels.iter().enumerate() {
            if ch.len() != n {
                return Err(Error::InvalidInput(format!(
                    "channel {c} has {} values, expected {n}",
                    ch.len()
                )));
            }
            if let Some(v) = ch.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidInput(format!("channel {c} value {v} outside [0, 1]")));
            }
        }
        for idx in 0..n {
            let sum: f32 = channels.iter().map(|ch| ch[idx]).sum();
            if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "channels at voxel {idx} sum to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { geometry, channels })
    }

    /// One-hot encoding of a label map over `channels` classes.
    pub fn one_hot(labels: &LabelVolume, channels: usize) -> Result<Self> {
        if let Some(&c) = labels.data().iter().find(|&&c| c as usize >= channels) {
            return Err(Error::InvalidInput(format!(
                "class {c} does not fit in {channels} channels"
            )));
        }
        let chans = (0..channels)
            .map(|c| {
                labels
                    .data()
                    .iter()
                    .map(|&l| if l as usize == c { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        Self::new(labels.geometry().clone(), chans)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c]
    }
}
