//! Physically based path tracer with an online-learned directional
//! sampler: a multi-resolution feature grid plus small decoder network
//! produce per-position von Mises-Fisher mixtures that are trained during
//! rendering and importance-sampled alongside the BSDF.

pub mod checkpoint;
pub mod cli;
pub mod encoding;
pub mod guiding;
pub mod image;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod renderer;
pub mod scene;
pub mod vmf;
