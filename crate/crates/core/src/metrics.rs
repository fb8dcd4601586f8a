//! Overlap, surface distance and histogram similarity measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{AtlasSet, BoundingBox, Dims, Image, LabelVolume, VoxelIndex};

/// Default histogram resolution for [`nmi`].
pub const NMI_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice: f64,
    pub mean_distance_mm: f64,
    pub n_pred: usize,
    pub n_truth: usize,
}

fn check_same_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// `2|A ∩ B| / (|A| + |B|)`, 1 when both masks are empty.
pub fn dice(pred: &LabelVolume, truth: &LabelVolume) -> Result<f64> {
    check_same_dims(pred.dims(), truth.dims())?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        a += (p != 0) as usize;
        b += (t != 0) as usize;
        both += (p != 0 && t != 0) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Foreground voxels with a background 6-neighbor; the outside of the grid
/// counts as background.
pub fn boundary_voxels(mask: &LabelVolume) -> Vec<VoxelIndex> {
    let [nx, ny, nz] = mask.dims();
    let data = mask.data();
    let mut out = Vec::new();
    for (i, &v) in data.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let p = VoxelIndex::from_linear(i, mask.dims());
        let on_face =
            p.x == 0 || p.y == 0 || p.z == 0 || p.x == nx - 1 || p.y == ny - 1 || p.z == nz - 1;
        if on_face
            || data[i - 1] == 0
            || data[i + 1] == 0
            || data[i - nx] == 0
            || data[i + nx] == 0
            || data[i - nx * ny] == 0
            || data[i + nx * ny] == 0
        {
            out.push(p);
        }
    }
    out
}

/// Squared distance along one line to the nearest finite entry of `f`,
/// sample `q` sitting at `q * step` (lower-envelope-of-parabolas method).
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * step;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p)))
                        / (2.0 * (pos(q) - pos(p)));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * step;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the nearest site.
pub fn squared_distance_transform(sites: &[VoxelIndex], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut grid = vec![f64::INFINITY; n];
    for s in sites {
        grid[s.linear(dims)] = 0.0;
    }
    let strides = [1, dims[0], dims[0] * dims[1]];
    let (mut line, mut out, mut v, mut z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for axis in 0..3 {
        let len = dims[axis];
        line.resize(len, 0.0);
        out.resize(len, 0.0);
        for start in 0..n {
            // visit each line once, from its first sample
            if (start / strides[axis]) % len != 0 {
                continue;
            }
            for (q, l) in line.iter_mut().enumerate() {
                *l = grid[start + q * strides[axis]];
            }
            edt_1d(&line, spacing[axis], &mut out, &mut v, &mut z);
            for (q, &o) in out.iter().enumerate() {
                grid[start + q * strides[axis]] = o;
            }
        }
    }
    grid
}

/// Symmetric mean surface distance in mm.
pub fn mean_distance(pred: &LabelVolume, truth: &LabelVolume) -> Result<f64> {
    check_same_dims(pred.dims(), truth.dims())?;
    if pred.spacing() != truth.spacing() {
        return Err(Error::DimensionMismatch(
            "masks differ in voxel spacing".into(),
        ));
    }
    let bp = boundary_voxels(pred);
    let bt = boundary_voxels(truth);
    if bp.is_empty() || bt.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let one_way = |from: &[VoxelIndex], to: &[VoxelIndex]| {
        let dt = squared_distance_transform(to, pred.dims(), pred.spacing());
        from.iter()
            .map(|v| dt[v.linear(pred.dims())].sqrt())
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (one_way(&bp, &bt) + one_way(&bt, &bp)))
}

fn bin_indices(data: &[f32], bins: usize) -> Vec<usize> {
    let (lo, hi) = data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let (lo, hi) = (lo as f64, hi as f64);
    if !(hi > lo) {
        return vec![0; data.len()];
    }
    let scale = bins as f64 / (hi - lo);
    data.iter()
        .map(|&v| (((v as f64 - lo) * scale) as usize).min(bins - 1))
        .collect()
}

fn entropy(counts: impl Iterator<Item = usize>, total: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `(H(A) + H(B)) / H(A, B)` from a joint
/// histogram with `bins` equal-width bins spanning each image's own range.
/// Two constant images score 2.
pub fn nmi(a: &Image, b: &Image, bins: usize) -> Result<f64> {
    check_same_dims(a.dims(), b.dims())?;
    if bins < 2 {
        return Err(Error::Config("nmi needs at least 2 bins".into()));
    }
    let ia = bin_indices(a.data(), bins);
    let ib = bin_indices(b.data(), bins);
    let mut joint = vec![0usize; bins * bins];
    let mut ha = vec![0usize; bins];
    let mut hb = vec![0usize; bins];
    for (&x, &y) in ia.iter().zip(&ib) {
        joint[x * bins + y] += 1;
        ha[x] += 1;
        hb[y] += 1;
    }
    let total = ia.len() as f64;
    let h_joint = entropy(joint.into_iter(), total);
    if h_joint == 0.0 {
        return Ok(2.0);
    }
    Ok((entropy(ha.into_iter(), total) + entropy(hb.into_iter(), total)) / h_joint)
}

/// Indices of the `n` atlases most similar to the target inside `bbox`,
/// best first; ties go to the lower index.
pub fn rank_atlases(
    target: &Image,
    atlases: &AtlasSet,
    bbox: &BoundingBox,
    n: usize,
) -> Result<Vec<usize>> {
    if n > atlases.len() {
        return Err(Error::Config(format!(
            "cannot select {n} atlases from {}",
            atlases.len()
        )));
    }
    let t = target.crop(bbox)?;
    let mut scored = atlases
        .atlases
        .iter()
        .enumerate()
        .map(|(i, a)| Ok((i, nmi(&t, &a.image.crop(bbox)?, NMI_BINS)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    Ok(scored.into_iter().take(n).map(|(i, _)| i).collect())
}

pub fn evaluate(pred: &LabelVolume, truth: &LabelVolume) -> Result<EvalReport> {
    Ok(EvalReport {
        dice: dice(pred, truth)?,
        mean_distance_mm: mean_distance(pred, truth)?,
        n_pred: pred.count_foreground(),
        n_truth: truth.count_foreground(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Atlas, Volume};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(dims: Dims, f: impl Fn(VoxelIndex) -> bool) -> LabelVolume {
        LabelVolume::from_fn(dims, [1.0; 3], |v| f(v) as u8).unwrap()
    }

    #[test]
    fn dice_cases() {
        let dims = [10, 10, 2];
        let a = mask(dims, |v| v.z == 0);
        let b = mask(dims, |v| v.z == 1);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        // |A| = |B| = 100, overlap 80
        let c = mask(dims, |v| (v.z == 0 && v.x < 8) || (v.z == 1 && v.x >= 8));
        assert!((dice(&a, &c).unwrap() - 0.8).abs() < 1e-15);
        let empty = mask(dims, |_| false);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert!(dice(&a, &mask([10, 10, 3], |_| true)).is_err());
    }

    #[test]
    fn distance_cases() {
        let dims = [8, 3, 3];
        let a = mask(dims, |v| v == VoxelIndex::new(1, 1, 1));
        let b = mask(dims, |v| v == VoxelIndex::new(4, 1, 1));
        assert_eq!(mean_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(mean_distance(&a, &b).unwrap(), 3.0);
        let empty = mask(dims, |_| false);
        assert!(matches!(
            mean_distance(&a, &empty),
            Err(Error::EmptyForeground)
        ));
    }

    #[test]
    fn anisotropic_single_pair() {
        let dims = [4, 4, 4];
        let sp = [0.5, 2.0, 1.5];
        let a = LabelVolume::from_fn(dims, sp, |v| (v == VoxelIndex::new(0, 0, 0)) as u8).unwrap();
        let b = LabelVolume::from_fn(dims, sp, |v| (v == VoxelIndex::new(2, 1, 3)) as u8).unwrap();
        let expected = (1.0f64 + 4.0 + 20.25).sqrt();
        assert!((mean_distance(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn boundary_of_solid_cube() {
        let dims = [5, 5, 5];
        let cube = mask(dims, |v| {
            (1..=3).contains(&v.x) && (1..=3).contains(&v.y) && (1..=3).contains(&v.z)
        });
        let b = boundary_voxels(&cube);
        assert_eq!(b.len(), 26);
        assert!(!b.contains(&VoxelIndex::new(2, 2, 2)));
        let full = mask(dims, |_| true);
        assert_eq!(boundary_voxels(&full).len(), 125 - 27);
    }

    #[test]
    fn edt_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = [7, 5, 6];
        let sites: Vec<VoxelIndex> = (0..6)
            .map(|_| {
                VoxelIndex::new(
                    rng.gen_range(0..7),
                    rng.gen_range(0..5),
                    rng.gen_range(0..6),
                )
            })
            .collect();
        let dt = squared_distance_transform(&sites, dims, [1.0; 3]);
        for (i, &d) in dt.iter().enumerate() {
            let p = VoxelIndex::from_linear(i, dims);
            let brute = sites
                .iter()
                .map(|s| {
                    let dx = p.x as f64 - s.x as f64;
                    let dy = p.y as f64 - s.y as f64;
                    let dz = p.z as f64 - s.z as f64;
                    dx * dx + dy * dy + dz * dz
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(d, brute);
        }
    }

    #[test]
    fn nmi_identity_symmetry_and_constants() {
        let dims = [6, 5, 4];
        let a = Volume::from_fn(dims, [1.0; 3], |v| (v.x * 3 + v.y * 7 + v.z) as f32).unwrap();
        let b = Volume::from_fn(dims, [1.0; 3], |v| ((v.x * 5 + v.z * 11) % 9) as f32).unwrap();
        assert!((nmi(&a, &a, 64).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(nmi(&a, &b, 64).unwrap(), nmi(&b, &a, 64).unwrap());
        let c = Image::filled(dims, [1.0; 3], 3.0).unwrap();
        assert_eq!(nmi(&c, &c, 64).unwrap(), 2.0);
        assert!((nmi(&a, &c, 64).unwrap() - 1.0).abs() < 1e-12);
        assert!(nmi(&a, &a, 1).is_err());
        // monotone remap keeping bin edges: affine map of the same range
        let remapped = Volume::new(
            dims,
            [1.0; 3],
            a.data().iter().map(|v| 2.0 * v + 10.0).collect(),
        )
        .unwrap();
        assert!((nmi(&a, &remapped, 64).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_of_independent_noise_is_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = [64, 64, 64];
        let a = Image::from_fn(dims, [1.0; 3], |_| rng.gen::<f32>()).unwrap();
        let b = Image::from_fn(dims, [1.0; 3], |_| rng.gen::<f32>()).unwrap();
        let v = nmi(&a, &b, 64).unwrap();
        assert!((v - 1.0).abs() < 0.05, "nmi {v}");
    }

    #[test]
    fn ranking_prefers_identical_atlas() {
        let dims = [8, 8, 8];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = Image::from_fn(dims, [1.0; 3], |v| {
            (v.x * 10) as f32 + rng.gen_range(0.0..3.0)
        })
        .unwrap();
        let lbl = mask(dims, |v| v.x > 3);
        let noisy = |amp: f32, rng: &mut ChaCha8Rng| {
            Image::new(
                dims,
                [1.0; 3],
                target
                    .data()
                    .iter()
                    .map(|v| v + rng.gen_range(-amp..amp))
                    .collect(),
            )
            .unwrap()
        };
        let atlases = AtlasSet::new(vec![
            Atlas {
                image: noisy(30.0, &mut rng),
                labels: lbl.clone(),
            },
            Atlas {
                image: noisy(5.0, &mut rng),
                labels: lbl.clone(),
            },
            Atlas {
                image: target.clone(),
                labels: lbl.clone(),
            },
            Atlas {
                image: noisy(60.0, &mut rng),
                labels: lbl.clone(),
            },
        ]);
        let bbox = BoundingBox::full(dims);
        let order = rank_atlases(&target, &atlases, &bbox, 4).unwrap();
        assert_eq!(order, vec![2, 1, 0, 3]);
        let top2 = rank_atlases(&target, &atlases, &bbox, 2).unwrap();
        assert_eq!(top2, vec![2, 1]);

        let permuted = atlases.select(&[3, 0, 2, 1]);
        let mut picked: Vec<usize> = rank_atlases(&target, &permuted, &bbox, 2)
            .unwrap()
            .into_iter()
            .map(|i| [3, 0, 2, 1][i])
            .collect();
        picked.sort();
        assert_eq!(picked, vec![1, 2]);
        assert!(rank_atlases(&target, &atlases, &bbox, 5).is_err());
    }

    #[test]
    fn evaluate_identity() {
        let dims = [6, 6, 6];
        let m = mask(dims, |v| v.x > 2 && v.y > 1);
        let r = evaluate(&m, &m).unwrap();
        assert_eq!(r.dice, 1.0);
        assert_eq!(r.mean_distance_mm, 0.0);
        assert_eq!(r.n_pred, r.n_truth);
        let json = serde_json::to_value(r).unwrap();
        assert_eq!(json.as_object().unwrap().len(), 4);
    }
}
