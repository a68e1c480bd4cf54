//! Multi-atlas pseudo-label generation for cardiac MR: B-spline registration
//! driven by normalised mutual information, label fusion, and segmentation
//! metrics.

pub mod error;
pub mod fusion;
pub mod metrics;
pub mod objective;
pub mod phantom;
pub mod registration;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{class, Geometry, LabelVolume, ProbabilityVolume, Volume};
