//! Visibility-aware multipath channel simulation and analysis for physically
//! large antenna arrays.
//!
//! The processing chain mirrors a measurement campaign with a synthetic
//! planar array:
//!
//! 1. [`geometry`]: polygonal environment, image sources, specular paths and
//!    per-element visibility.
//! 2. [`array`]: URA construction, subarray tiling, steering vectors and
//!    antenna patterns.
//! 3. [`synth`]: frequency-domain channel synthesis with visibility gating.
//! 4. [`beamformer`]: spherical-wave power spectra over the full array.
//! 5. [`sbl`]: per-subarray sparse Bayesian learning of multipath components.
//! 6. [`analysis`]: prediction, data association, visibility and energy
//!    reports.
//! 7. [`io`], [`config`] and [`pipeline`]: file formats and the batch
//!    workflow behind the `pla` CLI.

pub mod analysis;
pub mod array;
pub mod beamformer;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod sbl;
pub mod scenes;
pub mod synth;
pub mod vec3;

pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use vec3::Vec3;

/// Speed of light in vacuum [m/s].
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
