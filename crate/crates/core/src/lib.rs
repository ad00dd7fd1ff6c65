//! Waterdrop-robust radiance field pipeline at desk scale.
//!
//! The crate covers the full loop: synthetic multi-view datasets degraded by
//! adhesive waterdrops (`synth`), occlusion masks derived from detector
//! attention maps (`masks`), a small differentiable radiance field (`grad`,
//! `field`, `render`), masked-photometric-loss training (`trainer`), and
//! evaluation metrics (`metrics`). `pipeline` wires the stages into the
//! commands exposed by the CLI and the Python bindings.

pub mod camera;
pub mod field;
pub mod error;
pub mod grad;
pub mod vec3;

pub use error::{Error, Result};
