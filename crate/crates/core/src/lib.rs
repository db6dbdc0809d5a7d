//! Multi-view indoor 3D box detection: synthetic scenes, a shared 2D backbone
//! lifted into a voxel volume by weighted multi-view fusion, a radiance-field
//! branch for self-supervision, and a multi-level detector with learned
//! sampling offsets.

pub mod boxes;
pub mod check;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod eval;
mod error;
pub mod geometry;
pub mod losses;
pub mod msan;
pub mod nerf;
pub mod scene;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
