//! Unsupervised segmentation of colored point clouds through a Gaussian-splat
//! intermediate representation.
//!
//! The pipeline reconstructs a point cloud into a splat scene, renders
//! multi-view observations, distills externally supplied 2D segmentation
//! masks into per-Gaussian affinity features with scale-gated contrastive
//! learning, clusters those features into pseudo-labels, and transfers the
//! labels back to the original points through a denoise - rescale - register -
//! nearest-neighbor chain.

pub mod align;
pub mod distill;
pub mod error;
pub mod eval;
pub mod geom;
pub mod masks;
pub mod spatial;
pub mod splat;
pub mod viewgen;

pub use error::{Error, Result};
pub use geom::{apply_rigid, diameter, DiameterMode, PointCloud, RigidTransform};
pub use spatial::{nearest_neighbor, SpatialIndex};
