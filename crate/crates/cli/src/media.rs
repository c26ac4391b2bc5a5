//! Procedural test media on the unit cube.

use clap::ValueEnum;
use noise::{Fbm, MultiFractal, NoiseFn, Perlin};
use scatterfield_core::volume::{DensityGrid, GridError};
use scatterfield_core::Vec3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MediumKind {
    /// Density 1 in the central half of every axis.
    Cube,
    /// Density 1 in the central half of the y axis.
    Slab,
    /// Fractal-noise cloud inside a soft sphere, clamped to [0, 1].
    ProceduralCloud,
}

/// Unit-cube grid of `dims³` voxels; `dims` must be a power of two.
pub fn generate(kind: MediumKind, dims: usize, seed: u64) -> Result<DensityGrid, GridError> {
    if !dims.is_power_of_two() {
        return Err(GridError::NonPowerOfTwo([dims; 3]));
    }
    let voxel = 1.0 / dims as f64;
    let inside = |v: f64| (0.25..0.75).contains(&v);
    match kind {
        MediumKind::Cube => DensityGrid::from_fn([dims; 3], voxel, Vec3::zeros(), |c| {
            if inside(c.x) && inside(c.y) && inside(c.z) {
                1.0
            } else {
                0.0
            }
        }),
        MediumKind::Slab => DensityGrid::from_fn([dims; 3], voxel, Vec3::zeros(), |c| {
            if inside(c.y) {
                1.0
            } else {
                0.0
            }
        }),
        MediumKind::ProceduralCloud => {
            let fbm = Fbm::<Perlin>::new((seed ^ (seed >> 32)) as u32)
                .set_octaves(4)
                .set_frequency(3.0);
            DensityGrid::from_fn([dims; 3], voxel, Vec3::zeros(), |c| {
                let r = (c - Vec3::repeat(0.5)).norm() / 0.5;
                let n = fbm.get([c.x, c.y, c.z]);
                (1.6 * (0.75 - r) + 1.2 * n).clamp(0.0, 1.0) as f32
            })
        }
    }
}
