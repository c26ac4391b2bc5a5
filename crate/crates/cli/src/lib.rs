//! Command-line orchestration of the scattering pipeline: scene config,
//! artifact manifests, procedural media and one function per stage.

pub mod config;
pub mod error;
pub mod manifest;
pub mod media;
pub mod pyramid_file;
pub mod stages;
