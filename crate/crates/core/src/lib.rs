//! Occupancy uncertainty for grasp ranking.
//!
//! Uncertain depth pixels are backprojected into world-frame Gaussians
//! ([`camera`]), aggregated into a Gaussian-mixture occupancy field
//! ([`occupancy`]), regressed with a sparse variational Gaussian process
//! ([`svgp`]), and the two uncertainty sources are fused per query point with
//! sigma-point cubature ([`cubature`]). Grasp candidates are then reweighted by
//! the fused occupancy variance ([`grasp`]). [`scenes`] renders synthetic
//! multi-view datasets and [`pipeline`] chains the stages with checkpoints.

pub mod camera;
pub mod cubature;
pub mod format;
pub mod geometry;
pub mod grasp;
pub mod occupancy;
pub mod pipeline;
pub mod scenes;
pub mod svgp;
