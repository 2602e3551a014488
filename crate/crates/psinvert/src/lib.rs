//! Uncalibrated photometric stereo by neural inverse rendering.
//!
//! Given images of a static object under unknown distant lights, this crate
//! jointly optimizes surface normals, spatially-varying diffuse and specular
//! albedos, light directions, and light intensities by minimizing the
//! re-rendering error of a diffuse + spherical-Gaussian reflectance model.
//! Specular lobes are activated progressively from shiny to rough, which is
//! what pins down the bas-relief family of shape/light ambiguities.
//!
//! The crate also ships the ambiguity theory in executable form (transform
//! group, Lambertian invariance, grid-search disambiguation), a synthetic
//! scene generator with ground truth, PFM image I/O, and evaluation metrics.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod field;
pub mod gbr;
pub mod gradcheck;
pub mod metrics;
pub mod optimize;
pub mod params;
pub mod raster;
pub mod shading;
pub mod vec3;

pub mod cli;

pub use error::{Error, Result};
