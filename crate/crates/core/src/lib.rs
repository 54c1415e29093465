//! Reconstruction of solid transparent objects as neural signed-distance
//! fields, supervised by refractive ray-location correspondences.

pub mod capture;
pub mod config;
pub mod field;
pub mod geometry;
pub mod mesh;
pub mod tracer;
pub mod train;
