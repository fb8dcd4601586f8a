//! Synthetic ellipsoid phantoms with smoothly warped atlases.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{write_volume, Atlas, AtlasSet, Dims, Image, LabelVolume, Volume, VoxelIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    /// Ellipsoid center in voxel coordinates.
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub fg_intensity: f32,
    pub bg_intensity: f32,
    pub noise_sigma: f64,
    pub n_atlases: usize,
    /// Largest displacement of an atlas warp, in voxels.
    pub warp_amp: f64,
    /// Box-filter radius used to smooth the random displacement field.
    pub warp_smooth: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [40, 40, 40],
            spacing_mm: [1.0; 3],
            center: [19.5, 19.5, 19.5],
            semi_axes: [11.0, 6.0, 5.0],
            fg_intensity: 100.0,
            bg_intensity: 40.0,
            noise_sigma: 8.0,
            n_atlases: 20,
            warp_amp: 2.0,
            warp_smooth: 4,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) || self.n_atlases == 0 {
            return Err(Error::Config(
                "phantom needs positive dims and at least one atlas".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.warp_amp >= 0.0) {
            return Err(Error::Config(
                "noise_sigma and warp_amp must be non-negative".into(),
            ));
        }
        if self.semi_axes.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Config("semi_axes must be positive".into()));
        }
        let margin = self.warp_amp + 2.0;
        for axis in 0..3 {
            let lo = self.center[axis] - self.semi_axes[axis];
            let hi = self.center[axis] + self.semi_axes[axis];
            if lo < margin || hi > (self.dims[axis] - 1) as f64 - margin {
                return Err(Error::Config(format!(
                    "ellipsoid spans [{lo}, {hi}] on axis {axis}, needs margin {margin} inside 0..{}",
                    self.dims[axis]
                )));
            }
        }
        Ok(())
    }

    fn inside(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub target: Image,
    pub truth: LabelVolume,
    pub atlases: AtlasSet,
}

fn box_smooth(field: &mut [[f64; 3]], dims: Dims, radius: usize) {
    if radius == 0 {
        return;
    }
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        for start in 0..field.len() {
            if (start / strides[axis]) % len != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|q| field[start + q * strides[axis]]));
            for q in 0..len {
                let mut acc = [0.0; 3];
                let r = radius as isize;
                for o in -r..=r {
                    // periodic boundary
                    let s = (q as isize + o).rem_euclid(len as isize) as usize;
                    for c in 0..3 {
                        acc[c] += line[s][c];
                    }
                }
                field[start + q * strides[axis]] = acc.map(|v| v / (2 * radius + 1) as f64);
            }
        }
    }
}

fn atlas_rng(seed: u64, atlas: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(atlas as u64 + 1);
    rng
}

fn draw_field(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n: usize = spec.dims.iter().product();
    let mut field: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let mut d = [0.0; 3];
            for c in &mut d {
                *c = StandardNormal.sample(rng);
            }
            d
        })
        .collect();
    for _ in 0..3 {
        box_smooth(&mut field, spec.dims, spec.warp_smooth);
    }
    let max_norm = field
        .iter()
        .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
        .fold(0.0f64, f64::max);
    let scale = if max_norm > 0.0 {
        spec.warp_amp / max_norm
    } else {
        0.0
    };
    for d in &mut field {
        *d = d.map(|c| c * scale);
    }
    field
}

/// Displacement field (in voxels) of atlas `atlas`.
pub fn displacement_field(spec: &PhantomSpec, atlas: usize) -> Vec<[f64; 3]> {
    draw_field(spec, &mut atlas_rng(spec.seed, atlas))
}

fn trilinear(img: &Image, p: [f64; 3]) -> f32 {
    let dims = img.dims();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let c = p[a].clamp(0.0, (dims[a] - 1) as f64);
        let f = c.floor().min((dims[a].max(2) - 2) as f64).max(0.0);
        base[a] = f as usize;
        frac[a] = if dims[a] > 1 { c - f } else { 0.0 };
    }
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
            idx[a] = (base[a] + hi as usize).min(dims[a] - 1);
        }
        if w != 0.0 {
            acc += w * img.get(VoxelIndex::new(idx[0], idx[1], idx[2])) as f64;
        }
    }
    acc as f32
}

fn nearest(labels: &LabelVolume, p: [f64; 3]) -> u8 {
    let dims = labels.dims();
    let idx: Vec<usize> = (0..3)
        .map(|a| p[a].round().clamp(0.0, (dims[a] - 1) as f64) as usize)
        .collect();
    labels.get(VoxelIndex::new(idx[0], idx[1], idx[2]))
}

fn add_noise(values: &mut [f32], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in values {
            *v += normal.sample(rng) as f32;
        }
    }
}

/// Ground truth, noisy target and warped atlases, all determined by `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let truth = LabelVolume::from_fn(dims, spec.spacing_mm, |v| {
        spec.inside([v.x as f64, v.y as f64, v.z as f64]) as u8
    })?;
    let clean = Image::new(
        dims,
        spec.spacing_mm,
        truth
            .data()
            .iter()
            .map(|&l| {
                if l == 1 {
                    spec.fg_intensity
                } else {
                    spec.bg_intensity
                }
            })
            .collect(),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut target_data = clean.data().to_vec();
    add_noise(&mut target_data, spec.noise_sigma, &mut rng);
    let target = Volume::new(dims, spec.spacing_mm, target_data)?;

    let atlases = (0..spec.n_atlases)
        .into_par_iter()
        .map(|i| {
            let mut rng = atlas_rng(spec.seed, i);
            let field = draw_field(spec, &mut rng);
            let warped = |v: VoxelIndex| {
                let d = field[v.linear(dims)];
                [v.x as f64 + d[0], v.y as f64 + d[1], v.z as f64 + d[2]]
            };
            let labels =
                LabelVolume::from_fn(dims, spec.spacing_mm, |v| nearest(&truth, warped(v)))?;
            let mut img: Vec<f32> = (0..truth.len())
                .map(|i| trilinear(&clean, warped(VoxelIndex::from_linear(i, dims))))
                .collect();
            add_noise(&mut img, spec.noise_sigma, &mut rng);
            Ok(Atlas {
                image: Volume::new(dims, spec.spacing_mm, img)?,
                labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Phantom {
        target,
        truth,
        atlases: AtlasSet::new(atlases),
    })
}

/// Writes `target`, `truth`, `atlasNN_img`, `atlasNN_lbl` and `spec.json` into `dir`.
pub fn write_phantom(dir: &Path, phantom: &Phantom, spec: &PhantomSpec) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_volume(&phantom.target, &dir.join("target"))?;
    write_volume(&phantom.truth, &dir.join("truth"))?;
    for (i, a) in phantom.atlases.atlases.iter().enumerate() {
        write_volume(&a.image, &dir.join(format!("atlas{i:02}_img")))?;
        write_volume(&a.labels, &dir.join(format!("atlas{i:02}_lbl")))?;
    }
    let spec_path = dir.join("spec.json");
    let text = serde_json::to_string_pretty(spec).expect("spec serializes");
    fs::write(&spec_path, text + "\n").map_err(|e| Error::io(spec_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;

    #[test]
    fn identity_warp_reproduces_truth() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            warp_amp: 0.0,
            n_atlases: 3,
            ..Default::default()
        };
        let p = generate_phantom(&spec).unwrap();
        for a in &p.atlases.atlases {
            assert_eq!(a.labels, p.truth);
            assert_eq!(a.image, p.target);
        }
        assert!(p.truth.count_foreground() > 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec {
            n_atlases: 2,
            dims: [24, 20, 20],
            center: [11.5, 9.5, 9.5],
            semi_axes: [6.0, 4.0, 3.0],
            ..Default::default()
        };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert!(a.target.bit_identical(&b.target));
        assert_eq!(a.atlases, b.atlases);
        let c = generate_phantom(&PhantomSpec { seed: 1, ..spec }).unwrap();
        assert!(!a.target.bit_identical(&c.target));
    }

    #[test]
    fn warp_respects_amplitude() {
        let spec = PhantomSpec::default();
        for i in 0..3 {
            let field = displacement_field(&spec, i);
            let max = field
                .iter()
                .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
                .fold(0.0, f64::max);
            assert!(max <= spec.warp_amp + 1e-12);
            assert!(max > 0.5 * spec.warp_amp);
        }
    }

    #[test]
    fn warped_atlases_overlap_truth() {
        let spec = PhantomSpec {
            n_atlases: 6,
            ..Default::default()
        };
        let p = generate_phantom(&spec).unwrap();
        for a in &p.atlases.atlases {
            let d = dice(&a.labels, &p.truth).unwrap();
            assert!(d < 1.0 && d > 0.7, "dice {d}");
        }
    }

    #[test]
    fn margin_violation_is_rejected() {
        let spec = PhantomSpec {
            center: [5.0, 19.5, 19.5],
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn trilinear_hits_grid_values() {
        let img =
            Image::from_fn([3, 3, 3], [1.0; 3], |v| (v.x + 3 * v.y + 9 * v.z) as f32).unwrap();
        assert_eq!(trilinear(&img, [2.0, 1.0, 0.0]), 5.0);
        assert_eq!(trilinear(&img, [0.5, 0.0, 0.0]), 0.5);
        assert_eq!(trilinear(&img, [9.0, -3.0, 0.0]), 2.0);
    }
}
