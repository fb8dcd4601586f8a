//! Dense 3D volumes, voxel addressing and the MVOL on-disk format.
//!
//! An MVOL volume is a pair of files sharing a stem: `<name>.json` holds the
//! header (`dims`, `spacing_mm`, `dtype`, `order`) and `<name>.raw` holds
//! exactly `nx*ny*nz` little-endian values, x varying fastest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent `(nx, ny, nz)`.
pub type Dims = [usize; 3];

/// Intensity image.
pub type Image = Volume<f32>;
/// Binary label image, values in {0, 1}.
pub type LabelVolume = Volume<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelIndex {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl VoxelIndex {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        VoxelIndex { x, y, z }
    }

    /// Linear offset in x-fastest order.
    #[inline]
    pub fn linear(&self, dims: Dims) -> usize {
        self.x + dims[0] * (self.y + dims[1] * self.z)
    }

    #[inline]
    pub fn from_linear(index: usize, dims: Dims) -> Self {
        let x = index % dims[0];
        let rest = index / dims[0];
        VoxelIndex {
            x,
            y: rest % dims[1],
            z: rest / dims[1],
        }
    }

    /// Key that sorts voxels in scan (x-fastest) order.
    #[inline]
    pub fn scan_key(&self) -> (usize, usize, usize) {
        (self.z, self.y, self.x)
    }

    pub fn within(&self, dims: Dims) -> bool {
        self.x < dims[0] && self.y < dims[1] && self.z < dims[2]
    }
}

/// Axis-aligned box with inclusive corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: VoxelIndex,
    pub max: VoxelIndex,
}

impl BoundingBox {
    pub fn new(min: VoxelIndex, max: VoxelIndex) -> Result<Self> {
        if min.x > max.x || min.y > max.y || min.z > max.z {
            return Err(Error::InvalidBox(format!(
                "min corner {min:?} exceeds max corner {max:?}"
            )));
        }
        Ok(BoundingBox { min, max })
    }

    /// The box covering a whole grid.
    pub fn full(dims: Dims) -> Self {
        BoundingBox {
            min: VoxelIndex::new(0, 0, 0),
            max: VoxelIndex::new(dims[0] - 1, dims[1] - 1, dims[2] - 1),
        }
    }

    pub fn dims(&self) -> Dims {
        [
            self.max.x - self.min.x + 1,
            self.max.y - self.min.y + 1,
            self.max.z - self.min.z + 1,
        ]
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn fits(&self, dims: Dims) -> bool {
        self.max.within(dims)
    }

    pub(crate) fn check_fits(&self, dims: Dims) -> Result<()> {
        if self.fits(dims) {
            Ok(())
        } else {
            Err(Error::InvalidBox(format!(
                "max corner {:?} outside volume dims {dims:?}",
                self.max
            )))
        }
    }

    pub fn contains(&self, v: VoxelIndex) -> bool {
        (self.min.x..=self.max.x).contains(&v.x)
            && (self.min.y..=self.max.y).contains(&v.y)
            && (self.min.z..=self.max.z).contains(&v.z)
    }

    /// Box-local linear offset of a voxel given in volume coordinates.
    #[inline]
    pub fn local_index(&self, v: VoxelIndex) -> usize {
        let d = self.dims();
        (v.x - self.min.x) + d[0] * ((v.y - self.min.y) + d[1] * (v.z - self.min.z))
    }

    /// Volume coordinates of the voxel at a box-local linear offset.
    #[inline]
    pub fn voxel_at(&self, local: usize) -> VoxelIndex {
        let v = VoxelIndex::from_linear(local, self.dims());
        VoxelIndex::new(v.x + self.min.x, v.y + self.min.y, v.z + self.min.z)
    }

    /// Voxels of the box in scan order, in volume coordinates.
    pub fn iter(&self) -> impl Iterator<Item = VoxelIndex> + '_ {
        (self.min.z..=self.max.z).flat_map(move |z| {
            (self.min.y..=self.max.y)
                .flat_map(move |y| (self.min.x..=self.max.x).map(move |x| VoxelIndex::new(x, y, z)))
        })
    }
}

/// Element types that can live in a [`Volume`] and on disk.
pub trait VoxelType: Copy + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn validate(_data: &[Self]) -> Result<()> {
        Ok(())
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    fn bits_eq(self, other: Self) -> bool;
}

impl VoxelType for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }

    fn bits_eq(self, other: Self) -> bool {
        self.to_bits() == other.to_bits()
    }
}

impl VoxelType for u8 {
    const DTYPE: &'static str = "u8";
    const BYTES: usize = 1;

    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }

    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }

    fn validate(data: &[Self]) -> Result<()> {
        match data.iter().position(|&v| v > 1) {
            Some(index) => Err(Error::InvalidLabel {
                index,
                value: data[index],
            }),
            None => Ok(()),
        }
    }

    fn bits_eq(self, other: Self) -> bool {
        self == other
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T: VoxelType> {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<T>,
}

impl<T: VoxelType> Volume<T> {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {dims:?} ({expected})",
                data.len()
            )));
        }
        T::validate(&data)?;
        Ok(Volume {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: [f64; 3], value: T) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn from_fn(
        dims: Dims,
        spacing: [f64; 3],
        mut f: impl FnMut(VoxelIndex) -> T,
    ) -> Result<Self> {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|i| f(VoxelIndex::from_linear(i, dims)))
            .collect();
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, v: VoxelIndex) -> T {
        self.data[v.linear(self.dims)]
    }

    /// Value at signed coordinates, or `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize, z: isize) -> Option<T> {
        if x < 0 || y < 0 || z < 0 {
            return None;
        }
        let v = VoxelIndex::new(x as usize, y as usize, z as usize);
        v.within(self.dims).then(|| self.get(v))
    }

    pub fn same_grid<U: VoxelType>(&self, other: &Volume<U>) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    /// Bit-for-bit equality of grid and contents.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits_eq(*b))
    }

    /// Copy of the voxels inside `bbox`, spacing preserved.
    pub fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
        bbox.check_fits(self.dims)?;
        let data = bbox.iter().map(|v| self.get(v)).collect();
        Self::new(bbox.dims(), self.spacing, data)
    }
}

impl LabelVolume {
    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// One registered atlas: an intensity image and its binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub image: Image,
    pub labels: LabelVolume,
}

/// Atlases resampled onto the target grid, in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AtlasSet {
    pub atlases: Vec<Atlas>,
}

impl AtlasSet {
    pub fn new(atlases: Vec<Atlas>) -> Self {
        AtlasSet { atlases }
    }

    pub fn len(&self) -> usize {
        self.atlases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atlases.is_empty()
    }

    pub fn labels(&self) -> Vec<&LabelVolume> {
        self.atlases.iter().map(|a| &a.labels).collect()
    }

    /// Subset in the given order.
    pub fn select(&self, indices: &[usize]) -> AtlasSet {
        AtlasSet::new(indices.iter().map(|&i| self.atlases[i].clone()).collect())
    }

    /// Checks that every image and label volume lives on the target grid.
    pub fn check_grid(&self, target: &Image) -> Result<()> {
        for (i, a) in self.atlases.iter().enumerate() {
            if !target.same_grid(&a.image) || !target.same_grid(&a.labels) {
                return Err(Error::DimensionMismatch(format!(
                    "atlas {i} is not on the target grid (dims {:?}, spacing {:?}); register it first",
                    a.image.dims(),
                    a.image.spacing()
                )));
            }
        }
        Ok(())
    }
}

/// Header of an MVOL file pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    pub order: String,
}

const ORDER: &str = "x-fastest";

/// A volume of whichever dtype the header declares.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Intensity(Image),
    Label(LabelVolume),
}

/// Accepts `name`, `name.json` or `name.raw` and returns both file paths.
pub fn mvol_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut header = stem.clone().into_os_string();
    header.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (header.into(), raw.into())
}

pub fn read_header(path: &Path) -> Result<Header> {
    let (header_path, _) = mvol_paths(path);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: header_path.clone(),
        message: e.to_string(),
    })?;
    if header.order != ORDER {
        return Err(Error::Header {
            path: header_path,
            message: format!("unsupported order {:?}", header.order),
        });
    }
    Ok(header)
}

fn read_typed<T: VoxelType>(header: &Header, raw_path: &Path) -> Result<Volume<T>> {
    let bytes = fs::read(raw_path).map_err(|e| Error::io(raw_path, e))?;
    let expected = header.dims.iter().product::<usize>();
    if bytes.len() != expected * T::BYTES {
        return Err(Error::LengthMismatch {
            path: raw_path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<T> = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    T::validate(&data)?;
    Volume::new(header.dims, header.spacing_mm, data).map_err(|e| match e {
        Error::InvalidVolume(message) => Error::Header {
            path: raw_path.with_extension("json"),
            message,
        },
        other => other,
    })
}

/// Reads an MVOL volume of either dtype.
pub fn read_volume(path: &Path) -> Result<AnyVolume> {
    let header = read_header(path)?;
    let (_, raw_path) = mvol_paths(path);
    match header.dtype.as_str() {
        "f32" => read_typed(&header, &raw_path).map(AnyVolume::Intensity),
        "u8" => read_typed(&header, &raw_path).map(AnyVolume::Label),
        other => Err(Error::UnknownDtype(other.to_string())),
    }
}

fn read_expecting<T: VoxelType>(path: &Path) -> Result<Volume<T>> {
    let header = read_header(path)?;
    if header.dtype != T::DTYPE {
        if header.dtype != "f32" && header.dtype != "u8" {
            return Err(Error::UnknownDtype(header.dtype));
        }
        return Err(Error::DtypeMismatch {
            expected: T::DTYPE,
            found: header.dtype,
        });
    }
    let (_, raw_path) = mvol_paths(path);
    read_typed(&header, &raw_path)
}

pub fn read_image(path: &Path) -> Result<Image> {
    read_expecting(path)
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    read_expecting(path)
}

/// Writes `<stem>.json` and `<stem>.raw`.
pub fn write_volume<T: VoxelType>(v: &Volume<T>, path: &Path) -> Result<()> {
    let (header_path, raw_path) = mvol_paths(path);
    let header = Header {
        dims: v.dims,
        spacing_mm: v.spacing,
        dtype: T::DTYPE.to_string(),
        order: ORDER.to_string(),
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&header_path, text + "\n").map_err(|e| Error::io(&header_path, e))?;
    let mut bytes = Vec::with_capacity(v.data.len() * T::BYTES);
    for &value in &v.data {
        value.write_le(&mut bytes);
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

/// Smallest box holding every foreground voxel of every input, dilated by
/// `margin` and clamped to the grid.
pub fn bounding_box_from_labels(labels: &[&LabelVolume], margin: usize) -> Result<BoundingBox> {
    let first = labels
        .first()
        .ok_or_else(|| Error::InvalidVolume("no label volumes given".into()))?;
    let dims = first.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for vol in labels {
        if vol.dims() != dims {
            return Err(Error::DimensionMismatch(format!(
                "label volumes have dims {dims:?} and {:?}",
                vol.dims()
            )));
        }
        for (i, &value) in vol.data().iter().enumerate() {
            if value == 0 {
                continue;
            }
            any = true;
            let v = VoxelIndex::from_linear(i, dims);
            for (axis, c) in [v.x, v.y, v.z].into_iter().enumerate() {
                lo[axis] = lo[axis].min(c);
                hi[axis] = hi[axis].max(c);
            }
        }
    }
    if !any {
        return Err(Error::EmptyForeground);
    }
    let min: Vec<usize> = lo.iter().map(|&c| c.saturating_sub(margin)).collect();
    let max: Vec<usize> = hi
        .iter()
        .zip(dims)
        .map(|(&c, d)| (c + margin).min(d - 1))
        .collect();
    BoundingBox::new(
        VoxelIndex::new(min[0], min[1], min[2]),
        VoxelIndex::new(max[0], max[1], max[2]),
    )
}
