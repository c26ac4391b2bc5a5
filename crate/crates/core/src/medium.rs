//! Optical media (density grid + extinction, albedo and phase) and the
//! distant light that illuminates them.

use thiserror::Error;

use crate::phase::PhaseModel;
use crate::volume::{DensityGrid, MediumProperties, VoxelLayout};
use crate::{Rgb, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum OpticsError {
    #[error("extinction scale {0} must be positive and finite")]
    Extinction(f64),
    #[error("albedo {0} outside [0, 1)")]
    Albedo(f64),
    #[error("light direction must be a non-zero finite vector")]
    LightDirection,
    #[error("light intensity {0} must be finite and non-negative")]
    Intensity(f64),
}

/// Extinction at a point is `density · sigma_t_scale[c]`, scattering is
/// `albedo[c]` of that.
#[derive(Debug, Clone)]
pub struct Medium {
    grid: DensityGrid,
    sigma_t_scale: Rgb,
    albedo: Rgb,
    phase: PhaseModel,
    max_density: f64,
    homogeneous: bool,
}

impl Medium {
    /// Oracle-level constructor; accepts any albedo in [0, 1) and any phase model.
    pub fn new(
        grid: DensityGrid,
        sigma_t_scale: Rgb,
        albedo: Rgb,
        phase: PhaseModel,
    ) -> Result<Self, OpticsError> {
        for s in sigma_t_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(OpticsError::Extinction(s));
            }
        }
        for a in albedo {
            if !(0.0..1.0).contains(&a) {
                return Err(OpticsError::Albedo(a));
            }
        }
        let max_density = grid.max_density();
        let homogeneous = grid.homogeneous_value().is_some();
        Ok(Self {
            grid,
            sigma_t_scale,
            albedo,
            phase,
            max_density,
            homogeneous,
        })
    }

    pub fn from_properties(
        grid: DensityGrid,
        props: &MediumProperties,
        phase: PhaseModel,
    ) -> Result<Self, OpticsError> {
        Self::new(grid, props.sigma_t_scale, props.albedo, phase)
    }

    pub fn grid(&self) -> &DensityGrid {
        &self.grid
    }

    pub fn layout(&self) -> &VoxelLayout {
        self.grid.layout()
    }

    pub fn sigma_t_scale(&self) -> Rgb {
        self.sigma_t_scale
    }

    pub fn albedo(&self) -> Rgb {
        self.albedo
    }

    pub fn max_albedo(&self) -> f64 {
        self.albedo.iter().cloned().fold(0.0, f64::max)
    }

    pub fn phase(&self) -> &PhaseModel {
        &self.phase
    }

    /// True when every voxel holds the same density.
    pub fn is_homogeneous(&self) -> bool {
        self.homogeneous
    }

    #[inline]
    pub fn density(&self, p: &Vec3) -> f64 {
        self.grid.sample_trilinear(p)
    }

    #[inline]
    pub fn sigma_t(&self, p: &Vec3) -> Rgb {
        let rho = self.density(p);
        std::array::from_fn(|c| rho * self.sigma_t_scale[c])
    }

    /// Upper bound of the extinction over all channels and positions.
    pub fn majorant(&self) -> f64 {
        self.max_density * self.sigma_t_scale.iter().cloned().fold(0.0, f64::max)
    }

    /// Same optics on a different density grid.
    pub fn with_grid(&self, grid: DensityGrid) -> Self {
        Self::new(grid, self.sigma_t_scale, self.albedo, self.phase.clone())
            .expect("optics already validated")
    }
}

/// Light arriving from infinity, travelling along `direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistantLight {
    direction: Vec3,
    intensity: Rgb,
}

impl DistantLight {
    pub fn new(direction: Vec3, intensity: Rgb) -> Result<Self, OpticsError> {
        let n = direction.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(OpticsError::LightDirection);
        }
        for i in intensity {
            if !(i >= 0.0 && i.is_finite()) {
                return Err(OpticsError::Intensity(i));
            }
        }
        Ok(Self {
            direction: direction / n,
            intensity,
        })
    }

    /// Unit travel direction of the light.
    pub fn direction(&self) -> Vec3 {
        self.direction
    }

    /// Unit direction from a shading point towards the source.
    pub fn to_light(&self) -> Vec3 {
        -self.direction
    }

    pub fn intensity(&self) -> Rgb {
        self.intensity
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            direction: self.direction,
            intensity: self.intensity.map(|i| i * k),
        }
    }
}
