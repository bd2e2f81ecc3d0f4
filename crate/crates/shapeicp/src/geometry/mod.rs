//! Core geometric types and solvers: meshes, point clouds, SIM(3) poses,
//! exact nearest-neighbor search, Umeyama alignment, and the SO(3) grid.

mod cloud;
mod grid;
mod kdtree;
mod mesh;
mod pose;
mod umeyama;

pub use cloud::PointCloud;
pub use grid::{geodesic_angle, so3_grid, RotationGrid};
pub use kdtree::{nearest_neighbors, KdTree, Neighbor};
pub use mesh::{closest_point_on_triangle, Mesh};
pub use pose::Sim3Pose;
pub use umeyama::umeyama;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("reference cloud is empty or smaller than q")]
    EmptyReference,
    #[error("point cloud contains non-finite coordinates")]
    NonFinitePoint,
    #[error("mesh is invalid: {0}")]
    InvalidMesh(String),
}
