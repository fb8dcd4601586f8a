//! Multi-atlas segmentation of a single structure from pre-registered atlases.
//!
//! The pipeline selects the atlases most similar to the target, fuses their
//! labels by majority vote, re-estimates the uncertain voxels with a local
//! random-forest regression per voxel, and refines the resulting
//! probabilistic map by semi-supervised label propagation over the target's
//! own intensity graph.

pub mod error;
pub mod features;
pub mod forest;
pub mod fusion;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod propagation;
pub mod volume;

pub use error::{Error, Result};
pub use fusion::ProbMap;
pub use pipeline::{segment, Mode, RunConfig, Segmentation};
pub use volume::{Atlas, AtlasSet, BoundingBox, Image, LabelVolume, Volume, VoxelIndex};
