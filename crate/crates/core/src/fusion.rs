//! Label fusion: majority voting and local random-forest regression.
//!
//! Both engines produce a [`ProbMap`] over a region of interest where the
//! sign of each value is the class decision and its magnitude the
//! confidence. Atlas labels {0, 1} become {-1, +1} here.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    compute_features, extract_patch_into, select_by_distance, ssd, PatchConfig, TrainingSample,
};
use crate::forest::{train_forest, ForestConfig};
use crate::volume::{AtlasSet, BoundingBox, Image, LabelVolume, Volume, VoxelIndex};

/// Per-voxel scores over a bounding box, box-local scan order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub bbox: BoundingBox,
    pub spacing: [f64; 3],
    pub values: Vec<f64>,
    /// Voxels settled by unanimous majority vote.
    pub decided: Vec<bool>,
}

impl ProbMap {
    pub fn new(
        bbox: BoundingBox,
        spacing: [f64; 3],
        values: Vec<f64>,
        decided: Vec<bool>,
    ) -> Result<Self> {
        if values.len() != bbox.len() || decided.len() != bbox.len() {
            return Err(Error::DimensionMismatch(format!(
                "box holds {} voxels, got {} values and {} flags",
                bbox.len(),
                values.len(),
                decided.len()
            )));
        }
        Ok(ProbMap {
            bbox,
            spacing,
            values,
            decided,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, v: VoxelIndex) -> f64 {
        self.values[self.bbox.local_index(v)]
    }

    /// Same map with every value multiplied by `c`.
    pub fn scaled(&self, c: f64) -> ProbMap {
        ProbMap {
            values: self.values.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    /// Full-grid f32 volume with this map pasted in and `fill` elsewhere.
    pub fn to_volume(&self, dims: [usize; 3], fill: f32) -> Result<Image> {
        self.bbox.check_fits(dims)?;
        let mut data = vec![fill; dims.iter().product()];
        for (local, &value) in self.values.iter().enumerate() {
            data[self.bbox.voxel_at(local).linear(dims)] = value as f32;
        }
        Volume::new(dims, self.spacing, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Nearest samples kept per class.
    pub k: usize,
    pub patch: PatchConfig,
    pub forest: ForestConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            k: 100,
            patch: PatchConfig::default(),
            forest: ForestConfig::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        self.patch.validate()?;
        self.forest.validate(self.patch.feature_len())
    }
}

/// Vote fraction `(n_fg - n_bg) / N` per voxel of `bbox`.
pub fn majority_vote(atlas_labels: &[&LabelVolume], bbox: &BoundingBox) -> Result<ProbMap> {
    let first = atlas_labels
        .first()
        .ok_or_else(|| Error::Config("majority vote needs at least one atlas".into()))?;
    let dims = first.dims();
    if atlas_labels.iter().any(|l| l.dims() != dims) {
        return Err(Error::DimensionMismatch(
            "atlas label volumes differ in dims".into(),
        ));
    }
    bbox.check_fits(dims)?;
    let n = atlas_labels.len();
    let mut values = Vec::with_capacity(bbox.len());
    let mut decided = Vec::with_capacity(bbox.len());
    for v in bbox.iter() {
        let idx = v.linear(dims);
        let fg = atlas_labels.iter().filter(|l| l.data()[idx] != 0).count();
        values.push((2.0 * fg as f64 - n as f64) / n as f64);
        decided.push(fg == 0 || fg == n);
    }
    ProbMap::new(*bbox, first.spacing(), values, decided)
}

/// Voxels without a unanimous vote, in scan order.
pub fn candidate_voxels(mv: &ProbMap) -> Vec<VoxelIndex> {
    mv.values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() < 1.0)
        .map(|(i, _)| mv.bbox.voxel_at(i))
        .collect()
}

/// Label 1 where the value is strictly above `threshold`.
pub fn binarize(p: &ProbMap, threshold: f64) -> LabelVolume {
    let data = p.values.iter().map(|&v| (v > threshold) as u8).collect();
    Volume::new(p.bbox.dims(), p.spacing, data).expect("box-sized binary volume")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FusionStats {
    pub candidates: usize,
    /// Voxels whose neighborhood held a single class, so no forest was trained.
    pub one_class: usize,
    /// Trained voxels where a class had fewer than `k` samples.
    pub shortfall: usize,
}

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the local forest at `voxel`; independent of visiting order.
pub fn voxel_seed(seed: u64, voxel: VoxelIndex, dims: [usize; 3]) -> u64 {
    mix64(seed ^ mix64(voxel.linear(dims) as u64))
}

enum VoxelOutcome {
    OneClass(f64),
    Trained { value: f64, shortfall: bool },
}

struct Gather {
    patches: Vec<f32>,
    keys: Vec<(usize, VoxelIndex, bool)>,
}

fn gather(atlases: &AtlasSet, x: VoxelIndex, cfg: &PatchConfig) -> Gather {
    let r = cfg.neighborhood_radius as isize;
    let plen = cfg.patch_len();
    let count = atlases.len() * (2 * cfg.neighborhood_radius + 1).pow(3);
    let mut g = Gather {
        patches: Vec::with_capacity(count * plen),
        keys: Vec::with_capacity(count),
    };
    let mut buf = Vec::with_capacity(plen);
    for (i, atlas) in atlases.atlases.iter().enumerate() {
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (jx, jy, jz) = (x.x as isize + dx, x.y as isize + dy, x.z as isize + dz);
                    let Some(label) = atlas.labels.get_signed(jx, jy, jz) else {
                        continue;
                    };
                    let j = VoxelIndex::new(jx as usize, jy as usize, jz as usize);
                    extract_patch_into(&atlas.image, j, cfg.patch_radius, &mut buf);
                    g.patches.extend_from_slice(&buf);
                    g.keys.push((i, j, label != 0));
                }
            }
        }
    }
    g
}

fn fuse_voxel(
    target: &Image,
    atlases: &AtlasSet,
    x: VoxelIndex,
    cfg: &FusionConfig,
) -> Result<VoxelOutcome> {
    let g = gather(atlases, x, &cfg.patch);
    let fg = g.keys.iter().filter(|k| k.2).count();
    if g.keys.is_empty() {
        return Err(Error::EmptyClass("training"));
    }
    if fg == 0 {
        return Ok(VoxelOutcome::OneClass(-1.0));
    }
    if fg == g.keys.len() {
        return Ok(VoxelOutcome::OneClass(1.0));
    }

    let plen = cfg.patch.patch_len();
    let mut target_patch = Vec::with_capacity(plen);
    extract_patch_into(target, x, cfg.patch.patch_radius, &mut target_patch);
    let distances: Vec<f64> = g
        .patches
        .chunks_exact(plen)
        .map(|p| ssd(p, &target_patch))
        .collect();
    let selection = select_by_distance(&distances, &g.keys, cfg.k)?;

    let samples: Vec<TrainingSample> = selection
        .positives
        .iter()
        .chain(&selection.negatives)
        .map(|&c| TrainingSample {
            features: compute_features(&g.patches[c * plen..(c + 1) * plen], &cfg.patch),
            label: if g.keys[c].2 { 1.0 } else { -1.0 },
            atlas: g.keys[c].0,
            voxel: g.keys[c].1,
        })
        .collect();
    let forest_cfg = ForestConfig {
        seed: voxel_seed(cfg.forest.seed, x, target.dims()),
        ..cfg.forest
    };
    let model = train_forest(&samples, &forest_cfg);
    let value = model.predict(&compute_features(&target_patch, &cfg.patch))?;
    Ok(VoxelOutcome::Trained {
        value: value.clamp(-1.0, 1.0),
        shortfall: selection.has_shortfall(),
    })
}

/// Local random-forest regression fusion over `candidates`, starting from
/// the majority-vote map. Every other voxel keeps its vote value.
pub fn fuse_rf(
    target: &Image,
    atlases: &AtlasSet,
    candidates: &[VoxelIndex],
    mv: &ProbMap,
    cfg: &FusionConfig,
) -> Result<(ProbMap, FusionStats)> {
    cfg.validate()?;
    if atlases.is_empty() {
        return Err(Error::Config("fusion needs at least one atlas".into()));
    }
    atlases.check_grid(target)?;
    mv.bbox.check_fits(target.dims())?;
    if let Some(v) = candidates.iter().find(|v| !mv.bbox.contains(**v)) {
        return Err(Error::InvalidBox(format!(
            "candidate {v:?} lies outside the fusion box"
        )));
    }

    let outcomes = candidates
        .par_iter()
        .map(|&x| fuse_voxel(target, atlases, x, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut out = mv.clone();
    let mut stats = FusionStats {
        candidates: candidates.len(),
        ..Default::default()
    };
    for (x, outcome) in candidates.iter().zip(outcomes) {
        let local = out.bbox.local_index(*x);
        if out.decided[local] {
            continue;
        }
        out.values[local] = match outcome {
            VoxelOutcome::OneClass(v) => {
                stats.one_class += 1;
                v
            }
            VoxelOutcome::Trained { value, shortfall } => {
                stats.shortfall += shortfall as usize;
                value
            }
        };
    }
    Ok((out, stats))
}
