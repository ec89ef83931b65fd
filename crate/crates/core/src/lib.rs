//! Coarse-to-fine triangle-mesh deformation from a single image.
//!
//! A 156-vertex ellipsoid is deformed by a global attention block, then
//! subdivided and refined twice by local vector-attention blocks, and
//! finally subdivided once more by a small head, giving meshes of 156,
//! 618, 2466 and 9858 vertices. Everything is differentiable through a
//! small reverse-mode tape in [`autodiff`].

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod fixtures;
pub mod imageio;
pub mod knn;
pub mod loss;
pub mod lss;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod obj;
pub mod perception;
pub mod pointcloud;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
