//! Voxel grids, isosurface extraction, surface sampling, segmentation and
//! the evaluation metrics.

mod grid;
mod marching_cubes;
mod mesh;
mod metrics;
mod segment;
mod tables;

pub use grid::{rasterize_field, VoxelGrid};
pub use marching_cubes::marching_cubes;
pub use mesh::{sample_mesh_surface, Mesh};
pub use metrics::{
    chamfer_distance, chamfer_distance_brute_force, majority_mapping, miou, voxel_iou,
};
pub use segment::{segment_points, LabeledPoints};
