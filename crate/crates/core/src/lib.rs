//! Neural in-scattering prediction for heterogeneous participating media.
//!
//! The crate is organised the way data flows through the pipeline:
//!
//! - [`volume`]: voxel density grids, the mean-pooled pyramid and ray marching.
//! - [`phase`]: isotropic / Henyey-Greenstein / multi-lobe phase functions and
//!   their solid-angle cap integrals.
//! - [`template`]: diffuse (spherical shell) and highlight (light ray) sampling
//!   templates.
//! - [`features`]: graded transmittance fields, the convolutional combiner and
//!   the per-centre feature tables.
//! - [`rte`]: the Monte Carlo radiative transfer oracle (transmittance, single
//!   scattering, Neumann series, path tracer, reference renders).
//! - [`nn`]: a small reverse-mode neural toolkit.
//! - [`predictor`]: the layerwise-fused backbone network, its loss and training.

pub mod camera;
pub mod digest;
pub mod features;
pub mod image;
pub mod medium;
pub mod nn;
pub mod phase;
pub mod predictor;
pub mod rng;
pub mod rte;
pub mod template;
pub mod volume;

pub use nalgebra::Vector3;

/// World-space vector type used throughout the crate.
pub type Vec3 = Vector3<f64>;

/// Per-channel (RGB) quantity.
pub type Rgb = [f64; 3];
