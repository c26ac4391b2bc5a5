//! Voxel density grids, the mean-pooled density pyramid and ray marching.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::Vec3;

pub const VGRID_MAGIC: &[u8; 4] = b"VGRD";
pub const VGRID_VERSION: u32 = 1;
/// magic + version + dims + voxel_size + origin.
pub const VGRID_HEADER_BYTES: usize = 4 + 4 + 3 * 4 + 4 + 3 * 4;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimensions {0:?} are not all powers of two")]
    NonPowerOfTwo([usize; 3]),
    #[error("dimensions {0:?} are not cubic")]
    NotCubic([usize; 3]),
    #[error("negative density {value} at voxel {index}")]
    NegativeDensity { index: usize, value: f32 },
    #[error("non-finite density at voxel {index}")]
    NonFiniteDensity { index: usize },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error("ray-march step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("value count {actual} does not match dimensions ({expected})")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("pyramid level {0} is not the mean pool of level 0")]
    PyramidMismatch(usize),
}

impl GridError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u32 {
        match self {
            GridError::Io(_) => 1,
            GridError::MalformedHeader(_) => 10,
            GridError::NonPowerOfTwo(_) => 11,
            GridError::NotCubic(_) => 12,
            GridError::NegativeDensity { .. } => 13,
            GridError::NonFiniteDensity { .. } => 14,
            GridError::Truncated { .. } => 15,
            GridError::TrailingBytes(_) => 16,
            GridError::InvalidStep(_) => 17,
            GridError::ShapeMismatch { .. } => 18,
            GridError::PyramidMismatch(_) => 19,
        }
    }
}

/// Placement of a regular voxel lattice in world space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelLayout {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: Vec3,
}

impl VoxelLayout {
    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let i = index % self.dims[0];
        let j = (index / self.dims[0]) % self.dims[1];
        let k = index / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    pub fn bbox_min(&self) -> Vec3 {
        self.origin
    }

    pub fn bbox_max(&self) -> Vec3 {
        self.origin
            + Vec3::new(
                self.dims[0] as f64,
                self.dims[1] as f64,
                self.dims[2] as f64,
            ) * self.voxel_size
    }

    pub fn extent(&self) -> Vec3 {
        self.bbox_max() - self.bbox_min()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let lo = self.bbox_min();
        let hi = self.bbox_max();
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }

    /// Parametric interval `[t0, t1]` (t ≥ 0) where `o + t·d` is inside the box.
    pub fn ray_interval(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        let lo = self.bbox_min();
        let hi = self.bbox_max();
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a].abs() < 1e-300 {
                if o[a] < lo[a] || o[a] > hi[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }

    /// The eight `(voxel index, weight)` pairs [`Self::trilinear`] blends at `p`,
    /// or `None` outside the box.
    pub fn trilinear_taps(&self, p: &Vec3) -> Option<[(usize, f64); 8]> {
        let inv = 1.0 / self.voxel_size;
        let mut base = [0usize; 3];
        let mut next = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let local = (p[a] - self.origin[a]) * inv;
            let n = self.dims[a];
            if !(local >= 0.0 && local <= n as f64) {
                return None;
            }
            let u = (local - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n - 1);
            base[a] = i0;
            next[a] = (i0 + 1).min(n - 1);
            frac[a] = u - i0 as f64;
        }
        let mut taps = [(0usize, 0f64); 8];
        for (c, tap) in taps.iter_mut().enumerate() {
            let pick = |a: usize| {
                if c >> a & 1 == 1 {
                    (next[a], frac[a])
                } else {
                    (base[a], 1.0 - frac[a])
                }
            };
            let ((i, wx), (j, wy), (k, wz)) = (pick(0), pick(1), pick(2));
            *tap = (self.index(i, j, k), wx * wy * wz);
        }
        Some(taps)
    }

    /// Trilinear interpolation between voxel centres, clamped to the edge
    /// voxels inside the box; `outside` is returned beyond the bounding box.
    pub fn trilinear(&self, values: &[f32], p: &Vec3, outside: f64) -> f64 {
        let inv = 1.0 / self.voxel_size;
        let mut base = [0usize; 3];
        let mut next = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let local = (p[a] - self.origin[a]) * inv;
            let n = self.dims[a];
            if !(local >= 0.0 && local <= n as f64) {
                return outside;
            }
            let u = (local - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n - 1);
            base[a] = i0;
            next[a] = (i0 + 1).min(n - 1);
            frac[a] = u - i0 as f64;
        }
        let v = |i: usize, j: usize, k: usize| values[self.index(i, j, k)] as f64;
        let [fx, fy, fz] = frac;
        let c00 = v(base[0], base[1], base[2]) * (1.0 - fx) + v(next[0], base[1], base[2]) * fx;
        let c10 = v(base[0], next[1], base[2]) * (1.0 - fx) + v(next[0], next[1], base[2]) * fx;
        let c01 = v(base[0], base[1], next[2]) * (1.0 - fx) + v(next[0], base[1], next[2]) * fx;
        let c11 = v(base[0], next[1], next[2]) * (1.0 - fx) + v(next[0], next[1], next[2]) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }
}

/// Scalar extinction-density field on a regular grid (x-fastest storage).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    layout: VoxelLayout,
    values: Vec<f32>,
}

fn is_pow2(n: usize) -> bool {
    n > 0 && n & (n - 1) == 0
}

fn validate_values(values: &[f32]) -> Result<(), GridError> {
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() {
            return Err(GridError::NonFiniteDensity { index });
        }
        if value < 0.0 {
            return Err(GridError::NegativeDensity { index, value });
        }
    }
    Ok(())
}

impl DensityGrid {
    pub fn new(
        dims: [usize; 3],
        voxel_size: f64,
        origin: Vec3,
        values: Vec<f32>,
    ) -> Result<Self, GridError> {
        if !dims.iter().all(|&d| is_pow2(d)) {
            return Err(GridError::NonPowerOfTwo(dims));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(GridError::MalformedHeader(format!(
                "voxel size {voxel_size}"
            )));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if values.len() != expected {
            return Err(GridError::ShapeMismatch {
                expected,
                actual: values.len(),
            });
        }
        validate_values(&values)?;
        Ok(Self {
            layout: VoxelLayout {
                dims,
                voxel_size,
                origin,
            },
            values,
        })
    }

    pub fn constant(
        dims: [usize; 3],
        voxel_size: f64,
        origin: Vec3,
        value: f32,
    ) -> Result<Self, GridError> {
        Self::new(
            dims,
            voxel_size,
            origin,
            vec![value; dims[0] * dims[1] * dims[2]],
        )
    }

    /// Grid filled by evaluating `f` at every voxel centre.
    pub fn from_fn(
        dims: [usize; 3],
        voxel_size: f64,
        origin: Vec3,
        f: impl Fn(Vec3) -> f32,
    ) -> Result<Self, GridError> {
        let layout = VoxelLayout {
            dims,
            voxel_size,
            origin,
        };
        let values = (0..layout.voxel_count())
            .map(|idx| {
                let [i, j, k] = layout.coords(idx);
                f(layout.voxel_center(i, j, k))
            })
            .collect();
        Self::new(dims, voxel_size, origin, values)
    }

    pub fn layout(&self) -> &VoxelLayout {
        &self.layout
    }

    pub fn dims(&self) -> [usize; 3] {
        self.layout.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.layout.voxel_size
    }

    pub fn origin(&self) -> Vec3 {
        self.layout.origin
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.layout.index(i, j, k)]
    }

    pub fn max_density(&self) -> f64 {
        self.values.iter().fold(0.0f32, |m, &v| m.max(v)) as f64
    }

    /// `Some(c)` when every voxel holds the same density `c`.
    pub fn homogeneous_value(&self) -> Option<f64> {
        let first = *self.values.first()?;
        self.values
            .iter()
            .all(|&v| v == first)
            .then_some(first as f64)
    }

    pub fn nonzero_voxels(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Density at a world position; 0 outside the bounding box.
    pub fn sample_trilinear(&self, p: &Vec3) -> f64 {
        self.layout.trilinear(&self.values, p, 0.0)
    }

    /// ∫ρ ds along `p → q` by the midpoint rule with `ceil(len/step)` equal
    /// sub-intervals (a length within 1e-9 steps of a multiple is not rounded up).
    pub fn optical_depth(&self, p: &Vec3, q: &Vec3, step: f64) -> Result<f64, GridError> {
        if !(step > 0.0) {
            return Err(GridError::InvalidStep(step));
        }
        Ok(self.march(p, q, step))
    }

    pub(crate) fn march(&self, p: &Vec3, q: &Vec3, step: f64) -> f64 {
        let delta = q - p;
        let len = delta.norm();
        if len == 0.0 {
            return 0.0;
        }
        let n = (len / step - 1e-9).ceil().max(1.0) as usize;
        let h = len / n as f64;
        let dir = delta / len;
        let mut sum = 0.0;
        for s in 0..n {
            let x = p + dir * ((s as f64 + 0.5) * h);
            sum += self.sample_trilinear(&x);
        }
        sum * h
    }

    pub fn default_step(&self) -> f64 {
        self.layout.voxel_size * 0.5
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        let l = &self.layout;
        w.write_all(VGRID_MAGIC)?;
        w.write_u32::<LittleEndian>(VGRID_VERSION)?;
        for &d in &l.dims {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        w.write_f32::<LittleEndian>(l.voxel_size as f32)?;
        for a in 0..3 {
            w.write_f32::<LittleEndian>(l.origin[a] as f32)?;
        }
        for &v in &self.values {
            w.write_f32::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(VGRID_HEADER_BYTES + 4 * self.values.len());
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GridError> {
        if bytes.len() < VGRID_HEADER_BYTES {
            return Err(GridError::MalformedHeader(format!(
                "{} bytes is shorter than the {VGRID_HEADER_BYTES}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != VGRID_MAGIC {
            return Err(GridError::MalformedHeader("bad magic".into()));
        }
        let mut r = &bytes[4..VGRID_HEADER_BYTES];
        let version = r.read_u32::<LittleEndian>()?;
        if version != VGRID_VERSION {
            return Err(GridError::MalformedHeader(format!(
                "unsupported version {version}"
            )));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let voxel_size = r.read_f32::<LittleEndian>()? as f64;
        let mut origin = Vec3::zeros();
        for a in 0..3 {
            origin[a] = r.read_f32::<LittleEndian>()? as f64;
        }
        if dims.contains(&0) {
            return Err(GridError::MalformedHeader(format!(
                "zero dimension in {dims:?}"
            )));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) || !origin.iter().all(|c| c.is_finite()) {
            return Err(GridError::MalformedHeader(
                "invalid voxel size or origin".into(),
            ));
        }
        if !dims.iter().all(|&d| is_pow2(d)) {
            return Err(GridError::NonPowerOfTwo(dims));
        }
        let count = dims[0] * dims[1] * dims[2];
        let expected = count * 4;
        let payload = &bytes[VGRID_HEADER_BYTES..];
        if payload.len() < expected {
            return Err(GridError::Truncated {
                expected,
                actual: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(GridError::TrailingBytes(payload.len() - expected));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dims, voxel_size, origin, values)
    }

    pub fn load(path: &Path) -> Result<Self, GridError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), GridError> {
        let mut file = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }
}

/// Mean-pooled multiresolution densities; level 0 is the input grid.
#[derive(Debug, Clone)]
pub struct DensityPyramid {
    levels: Vec<DensityGrid>,
}

impl DensityPyramid {
    /// Reassembles stored levels, checking them against a fresh pooling of level 0.
    pub fn from_levels(levels: Vec<DensityGrid>) -> Result<Self, GridError> {
        let first = levels
            .first()
            .ok_or_else(|| GridError::MalformedHeader("empty pyramid".into()))?;
        let rebuilt = build_pyramid(first)?;
        if rebuilt.len() != levels.len() {
            return Err(GridError::PyramidMismatch(levels.len().min(rebuilt.len())));
        }
        for (i, (a, b)) in levels.iter().zip(rebuilt.levels()).enumerate() {
            if a != b {
                return Err(GridError::PyramidMismatch(i));
            }
        }
        Ok(rebuilt)
    }

    pub fn levels(&self) -> &[DensityGrid] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> Option<&DensityGrid> {
        self.levels.get(i)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Halve every axis down to 1³, each coarse voxel the mean of its 8 children.
pub fn build_pyramid(grid: &DensityGrid) -> Result<DensityPyramid, GridError> {
    let dims = grid.dims();
    if !dims.iter().all(|&d| is_pow2(d)) {
        return Err(GridError::NonPowerOfTwo(dims));
    }
    if dims[0] != dims[1] || dims[1] != dims[2] {
        return Err(GridError::NotCubic(dims));
    }
    let mut levels = vec![grid.clone()];
    while levels.last().unwrap().dims()[0] > 1 {
        let fine = levels.last().unwrap();
        let n = fine.dims()[0] / 2;
        let mut values = vec![0f32; n * n * n];
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let mut sum = 0.0f64;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                sum += fine.get(2 * i + dx, 2 * j + dy, 2 * k + dz) as f64;
                            }
                        }
                    }
                    values[i + n * (j + n * k)] = (sum / 8.0) as f32;
                }
            }
        }
        levels.push(DensityGrid::new(
            [n; 3],
            fine.voxel_size() * 2.0,
            fine.origin(),
            values,
        )?);
    }
    Ok(DensityPyramid { levels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaterialClass {
    Air,
    Gas,
    SolidLiquid,
    Skin,
}

impl MaterialClass {
    /// Admissible albedo range per channel.
    pub fn albedo_range(self) -> (f64, f64) {
        match self {
            MaterialClass::Air | MaterialClass::Gas => (0.0, 0.5),
            MaterialClass::SolidLiquid | MaterialClass::Skin => (0.5, 1.0),
        }
    }

    /// Number of phase lobes conditioning the network.
    pub fn lobe_count(self) -> usize {
        match self {
            MaterialClass::Air | MaterialClass::Gas => 1,
            MaterialClass::SolidLiquid => 2,
            MaterialClass::Skin => 3,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MediumError {
    #[error("albedo component {0} outside (0, 1)")]
    AlbedoOutOfRange(f64),
    #[error("albedo {value} outside the {class:?} range [{lo}, {hi}]")]
    AlbedoOutsideClass {
        class: MaterialClass,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("extinction scale {0} must be positive and finite")]
    InvalidExtinction(f64),
}

/// Homogeneous optical properties applied on top of a density grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MediumProperties {
    pub sigma_t_scale: [f64; 3],
    pub albedo: [f64; 3],
    pub material_class: MaterialClass,
}

impl MediumProperties {
    pub fn new(
        sigma_t_scale: [f64; 3],
        albedo: [f64; 3],
        material_class: MaterialClass,
    ) -> Result<Self, MediumError> {
        let props = Self {
            sigma_t_scale,
            albedo,
            material_class,
        };
        props.validate()?;
        Ok(props)
    }

    pub fn validate(&self) -> Result<(), MediumError> {
        let (lo, hi) = self.material_class.albedo_range();
        for &s in &self.sigma_t_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(MediumError::InvalidExtinction(s));
            }
        }
        for &a in &self.albedo {
            if !(a > 0.0 && a < 1.0) {
                return Err(MediumError::AlbedoOutOfRange(a));
            }
            if a < lo || a > hi {
                return Err(MediumError::AlbedoOutsideClass {
                    class: self.material_class,
                    value: a,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }

    pub fn sigma_s(&self) -> [f64; 3] {
        std::array::from_fn(|c| self.albedo[c] * self.sigma_t_scale[c])
    }

    pub fn sigma_a(&self) -> [f64; 3] {
        std::array::from_fn(|c| (1.0 - self.albedo[c]) * self.sigma_t_scale[c])
    }

    /// Mean free path 1/μ_t per channel at unit density.
    pub fn mean_free_path(&self) -> [f64; 3] {
        std::array::from_fn(|c| 1.0 / self.sigma_t_scale[c])
    }
}
