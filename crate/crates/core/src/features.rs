//! Patch extraction, per-patch feature vectors and patch similarity.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Image, VoxelIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Z-normalized patch intensities.
    IntensityOnly,
    /// Z-normalized intensities, per-voxel gradient magnitudes and
    /// (mean, std, min, max) of the raw patch.
    IntensityPlusTexture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    /// Patch edge is `2 * patch_radius + 1`.
    pub patch_radius: usize,
    /// Search neighborhood edge is `2 * neighborhood_radius + 1`.
    pub neighborhood_radius: usize,
    pub feature_mode: FeatureMode,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_radius: 3,
            neighborhood_radius: 1,
            feature_mode: FeatureMode::IntensityPlusTexture,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_radius < 1 {
            return Err(Error::Config("patch_radius must be at least 1".into()));
        }
        Ok(())
    }

    pub fn patch_edge(&self) -> usize {
        2 * self.patch_radius + 1
    }

    pub fn patch_len(&self) -> usize {
        self.patch_edge().pow(3)
    }

    pub fn feature_len(&self) -> usize {
        match self.feature_mode {
            FeatureMode::IntensityOnly => self.patch_len(),
            FeatureMode::IntensityPlusTexture => 2 * self.patch_len() + 4,
        }
    }
}

/// One labelled training example for a local regression forest.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub features: Vec<f64>,
    /// +1 foreground, -1 background.
    pub label: f64,
    pub atlas: usize,
    pub voxel: VoxelIndex,
}

/// A raw atlas patch considered for training, before feature computation.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub patch: Vec<f32>,
    pub foreground: bool,
    pub atlas: usize,
    pub voxel: VoxelIndex,
}

/// Intensities of the cube around `center` in x-fastest order; positions
/// outside the volume read as 0.
pub fn extract_patch(v: &Image, center: VoxelIndex, cfg: &PatchConfig) -> Vec<f32> {
    let mut out = Vec::with_capacity(cfg.patch_len());
    extract_patch_into(v, center, cfg.patch_radius, &mut out);
    out
}

pub(crate) fn extract_patch_into(v: &Image, center: VoxelIndex, radius: usize, out: &mut Vec<f32>) {
    out.clear();
    let r = radius as isize;
    let [nx, ny, nz] = v.dims().map(|d| d as isize);
    let (cx, cy, cz) = (center.x as isize, center.y as isize, center.z as isize);
    let data = v.data();
    for z in cz - r..=cz + r {
        for y in cy - r..=cy + r {
            if z < 0 || z >= nz || y < 0 || y >= ny {
                out.extend(std::iter::repeat(0.0).take(2 * radius + 1));
                continue;
            }
            let row = ((z * ny + y) * nx) as usize;
            for x in cx - r..=cx + r {
                out.push(if x < 0 || x >= nx {
                    0.0
                } else {
                    data[row + x as usize]
                });
            }
        }
    }
}

/// Feature vector of a raw patch, laid out according to `cfg.feature_mode`.
pub fn compute_features(patch: &[f32], cfg: &PatchConfig) -> Vec<f64> {
    assert_eq!(
        patch.len(),
        cfg.patch_len(),
        "patch length does not match config"
    );
    let mut out = Vec::with_capacity(cfg.feature_len());
    let n = patch.len() as f64;
    let mean = patch.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = patch
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std > 0.0 {
        out.extend(patch.iter().map(|&v| (v as f64 - mean) / std));
    } else {
        out.resize(patch.len(), 0.0);
    }
    if cfg.feature_mode == FeatureMode::IntensityPlusTexture {
        push_gradient_magnitudes(patch, cfg.patch_edge(), &mut out);
        let (min, max) = patch
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v as f64), hi.max(v as f64))
            });
        out.extend([mean, std, min, max]);
    }
    out
}

fn push_gradient_magnitudes(patch: &[f32], edge: usize, out: &mut Vec<f64>) {
    let at = |x: usize, y: usize, z: usize| patch[x + edge * (y + edge * z)] as f64;
    // central difference inside, one-sided at the faces
    let diff = |c: usize, f: &dyn Fn(usize) -> f64| -> f64 {
        if edge == 1 {
            0.0
        } else if c == 0 {
            f(1) - f(0)
        } else if c == edge - 1 {
            f(c) - f(c - 1)
        } else {
            0.5 * (f(c + 1) - f(c - 1))
        }
    };
    for z in 0..edge {
        for y in 0..edge {
            for x in 0..edge {
                let gx = diff(x, &|i| at(i, y, z));
                let gy = diff(y, &|i| at(x, i, z));
                let gz = diff(z, &|i| at(x, y, i));
                out.push((gx * gx + gy * gy + gz * gz).sqrt());
            }
        }
    }
}

/// Sum of squared differences of raw intensities.
pub fn patch_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "patch lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(ssd(a, b))
}

#[inline]
pub(crate) fn ssd(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Outcome of balanced selection: indices into the candidate list, nearest
/// first, plus how many samples each class was short of `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedSelection {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub positive_shortfall: usize,
    pub negative_shortfall: usize,
}

impl BalancedSelection {
    pub fn has_shortfall(&self) -> bool {
        self.positive_shortfall > 0 || self.negative_shortfall > 0
    }
}

/// Picks the `k` foreground and `k` background candidates whose patches are
/// closest to `target_patch`. Ties go to the lower atlas index, then to the
/// earlier voxel in scan order.
pub fn select_balanced_samples(
    candidates: &[PatchSample],
    target_patch: &[f32],
    k: usize,
) -> Result<BalancedSelection> {
    let distances = candidates
        .iter()
        .map(|c| patch_distance(&c.patch, target_patch))
        .collect::<Result<Vec<_>>>()?;
    let keys: Vec<(usize, VoxelIndex, bool)> = candidates
        .iter()
        .map(|c| (c.atlas, c.voxel, c.foreground))
        .collect();
    select_by_distance(&distances, &keys, k)
}

pub(crate) fn select_by_distance(
    distances: &[f64],
    keys: &[(usize, VoxelIndex, bool)],
    k: usize,
) -> Result<BalancedSelection> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let order = |a: &usize, b: &usize| -> Ordering {
        distances[*a]
            .total_cmp(&distances[*b])
            .then(keys[*a].0.cmp(&keys[*b].0))
            .then(keys[*a].1.scan_key().cmp(&keys[*b].1.scan_key()))
    };
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..keys.len()).partition(|&i| keys[i].2);
    if pos.is_empty() {
        return Err(Error::EmptyClass("foreground"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyClass("background"));
    }
    let take = |v: &mut Vec<usize>| -> usize {
        if v.len() > k {
            v.select_nth_unstable_by(k - 1, order);
            v.truncate(k);
        }
        v.sort_unstable_by(order);
        k - v.len()
    };
    let positive_shortfall = take(&mut pos);
    let negative_shortfall = take(&mut neg);
    Ok(BalancedSelection {
        positives: pos,
        negatives: neg,
        positive_shortfall,
        negative_shortfall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Volume;
    use proptest::prelude::*;

    fn sample(patch: Vec<f32>, foreground: bool, atlas: usize, x: usize) -> PatchSample {
        PatchSample {
            patch,
            foreground,
            atlas,
            voxel: VoxelIndex::new(x, 0, 0),
        }
    }

    #[test]
    fn constant_volume_patch() {
        let v = Image::filled([9, 9, 9], [1.0; 3], 5.0).unwrap();
        let p = extract_patch(&v, VoxelIndex::new(4, 4, 4), &PatchConfig::default());
        assert_eq!(p.len(), 343);
        assert!(p.iter().all(|&x| x == 5.0));
    }

    #[test]
    fn corner_patch_is_zero_padded() {
        let v = Image::filled([9, 9, 9], [1.0; 3], 5.0).unwrap();
        let p = extract_patch(&v, VoxelIndex::new(0, 0, 0), &PatchConfig::default());
        // index oracle: offset (dx,dy,dz) in [-3,3]^3 is inside iff all >= 0
        for (i, &value) in p.iter().enumerate() {
            let (dx, dy, dz) = (i % 7, (i / 7) % 7, i / 49);
            let inside = dx >= 3 && dy >= 3 && dz >= 3;
            assert_eq!(value, if inside { 5.0 } else { 0.0 }, "entry {i}");
        }
    }

    #[test]
    fn centered_patch_of_ramp_is_whole_volume() {
        let dims = [7, 7, 7];
        let v = Volume::from_fn(dims, [1.0; 3], |v| v.linear(dims) as f32).unwrap();
        let p = extract_patch(&v, VoxelIndex::new(3, 3, 3), &PatchConfig::default());
        assert_eq!(p.as_slice(), v.data());
    }

    #[test]
    fn constant_patch_features() {
        let patch = vec![7.5f32; 343];
        let mut cfg = PatchConfig {
            feature_mode: FeatureMode::IntensityOnly,
            ..Default::default()
        };
        assert!(compute_features(&patch, &cfg).iter().all(|&v| v == 0.0));

        cfg.feature_mode = FeatureMode::IntensityPlusTexture;
        let f = compute_features(&patch, &cfg);
        assert_eq!(f.len(), cfg.feature_len());
        assert!(f[..686].iter().all(|&v| v == 0.0));
        assert_eq!(&f[686..], &[7.5, 0.0, 7.5, 7.5]);
    }

    #[test]
    fn ramp_gradient_block() {
        let cfg = PatchConfig::default();
        let slope = 2.5f32;
        let patch: Vec<f32> = (0..343).map(|i| slope * (i % 7) as f32 + 1.0).collect();
        let f = compute_features(&patch, &cfg);
        let grads = &f[343..686];
        // finite-difference oracle: |(p(x+1) - p(x-1)) / 2| along x, one-sided on x faces
        for (i, &g) in grads.iter().enumerate() {
            let x = i % 7;
            let at = |xx: usize| patch[i - x + xx] as f64;
            let expected = match x {
                0 => at(1) - at(0),
                6 => at(6) - at(5),
                _ => (at(x + 1) - at(x - 1)) / 2.0,
            };
            assert!((g - expected.abs()).abs() < 1e-12);
            assert!((g - slope as f64).abs() < 1e-12);
        }
        let stats = &f[686..];
        assert!((stats[0] - (1.0 + 3.0 * 2.5)).abs() < 1e-9);
        assert_eq!(stats[2], 1.0);
        assert_eq!(stats[3], 16.0);
    }

    #[test]
    fn distance_basics() {
        assert_eq!(patch_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(patch_distance(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 5.0);
        assert!(patch_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn selection_takes_nearest() {
        let target = vec![0.0f32];
        let c = vec![
            sample(vec![3.0], true, 0, 0),
            sample(vec![1.0], true, 0, 1),
            sample(vec![2.0f32.sqrt()], true, 0, 2),
            sample(vec![5.0], false, 0, 3),
        ];
        let s = select_balanced_samples(&c, &target, 2).unwrap();
        assert_eq!(s.positives, vec![1, 2]);
        assert_eq!(s.negatives, vec![3]);
        assert_eq!(s.positive_shortfall, 0);
        assert_eq!(s.negative_shortfall, 1);
    }

    #[test]
    fn selection_tie_breaks() {
        let target = vec![0.0f32];
        let c = vec![
            sample(vec![1.0], true, 2, 0),
            sample(vec![1.0], true, 1, 5),
            sample(vec![1.0], true, 1, 4),
            sample(vec![1.0], false, 0, 0),
        ];
        let s = select_balanced_samples(&c, &target, 1).unwrap();
        assert_eq!(s.positives, vec![2]);
        let s = select_balanced_samples(&c, &target, 2).unwrap();
        assert_eq!(s.positives, vec![2, 1]);
    }

    #[test]
    fn selection_shortfall_and_empty_class() {
        let target = vec![0.0f32];
        let mut c: Vec<PatchSample> = (0..150)
            .map(|i| sample(vec![i as f32], false, 0, i))
            .collect();
        c.push(sample(vec![9.0], true, 1, 0));
        let s = select_balanced_samples(&c, &target, 100).unwrap();
        assert_eq!(s.positives.len(), 1);
        assert_eq!(s.negatives.len(), 100);
        assert_eq!(s.positive_shortfall, 99);
        assert!(s.has_shortfall());

        c.pop();
        assert!(matches!(
            select_balanced_samples(&c, &target, 3),
            Err(Error::EmptyClass("foreground"))
        ));
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(a in proptest::collection::vec(-1e3f32..1e3, 8), b in proptest::collection::vec(-1e3f32..1e3, 8)) {
            prop_assert_eq!(patch_distance(&a, &b).unwrap(), patch_distance(&b, &a).unwrap());
        }

        #[test]
        fn intensity_only_ignores_offset(patch in proptest::collection::vec(-50f32..50.0, 27), shift in -100f32..100.0) {
            let cfg = PatchConfig { patch_radius: 1, feature_mode: FeatureMode::IntensityOnly, ..Default::default() };
            let shifted: Vec<f32> = patch.iter().map(|v| v + shift).collect();
            let a = compute_features(&patch, &cfg);
            let b = compute_features(&shifted, &cfg);
            prop_assert_eq!(a.len(), cfg.feature_len());
            // f32 rounding of the shifted inputs is the only source of drift
            let spread = patch.iter().cloned().fold(f32::MIN, f32::max) - patch.iter().cloned().fold(f32::MAX, f32::min);
            prop_assume!(spread > 1.0);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-3, "{} vs {}", x, y);
            }
        }

        #[test]
        fn selection_is_balanced(
            dists in proptest::collection::vec((0f32..10.0, any::<bool>(), 0usize..4), 2..60),
            k in 1usize..10,
        ) {
            let c: Vec<PatchSample> = dists.iter().enumerate()
                .map(|(i, &(d, fg, atlas))| sample(vec![d], fg, atlas, i)).collect();
            let s = match select_balanced_samples(&c, &[0.0], k) {
                Ok(s) => s,
                Err(_) => return Ok(()),
            };
            prop_assert!(s.positives.len() + s.negatives.len() <= 2 * k);
            prop_assert!(s.positives.iter().all(|&i| c[i].foreground));
            prop_assert!(s.negatives.iter().all(|&i| !c[i].foreground));
            // nothing unselected of the same class is strictly nearer
            let worst = s.positives.iter().map(|&i| c[i].patch[0]).fold(0f32, f32::max);
            for (i, s_) in c.iter().enumerate() {
                if s_.foreground && !s.positives.contains(&i) {
                    prop_assert!(s_.patch[0] >= worst);
                }
            }
        }
    }
}
