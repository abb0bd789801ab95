//! The three reported metrics of a fitted model against a labeled target.

use crate::geometry::{
    chamfer_distance, majority_mapping, marching_cubes, miou, rasterize_field, sample_mesh_surface, segment_points,
    voxel_iou, LabeledPoints, Mesh, VoxelGrid,
};
use crate::model::ShapeModel;
use crate::synth::LabeledGrid;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Points sampled from each mesh for the Chamfer distance.
    pub chamfer_samples: usize,
    pub iso_level: f64,
    pub mesh_resolution: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            chamfer_samples: 4096,
            iso_level: 0.6,
            mesh_resolution: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// Chamfer distance times 1000; infinite when the model's isosurface is
    /// empty.
    pub chamfer_x1000: f64,
    /// Voxel IoU at 32^3 with the prediction thresholded at 0.5.
    pub iou: f64,
    pub miou: f64,
}

impl EvalReport {
    pub fn rows(&self) -> [(&'static str, f64); 3] {
        [("chamfer_x1000", self.chamfer_x1000), ("iou_32", self.iou), ("miou", self.miou)]
    }
}

/// Isosurface of the model field.
pub fn model_mesh(model: &ShapeModel, resolution: usize, level: f64) -> Result<Mesh, Error> {
    marching_cubes(&rasterize_field(model, resolution)?, level)
}

/// Target surface: the 0.5 level set of the binary occupancy grid.
pub fn target_mesh(grid: &VoxelGrid) -> Result<Mesh, Error> {
    marching_cubes(grid, 0.5)
}

pub fn target_at_32(grid: &VoxelGrid) -> Result<VoxelGrid, Error> {
    match grid.resolution() {
        32 => Ok(grid.clone()),
        64 => grid.downsample_majority(),
        r => Err(Error::Invalid(format!("target resolution must be 32 or 64, got {r}"))),
    }
}

pub fn chamfer_x1000(model: &ShapeModel, target: &VoxelGrid, cfg: &EvalConfig) -> Result<f64, Error> {
    let pred = model_mesh(model, cfg.mesh_resolution, cfg.iso_level)?;
    if pred.is_empty() {
        return Ok(f64::INFINITY);
    }
    let gt = target_mesh(target)?;
    let a = sample_mesh_surface(&pred, cfg.chamfer_samples, cfg.seed)?;
    let b = sample_mesh_surface(&gt, cfg.chamfer_samples, cfg.seed.wrapping_add(1))?;
    Ok(chamfer_distance(&a, &b)? * 1000.0)
}

/// Voxel IoU at 32^3. A 64^3 target is pooled to 32^3, and so is the
/// prediction rasterized at 64^3, so both sides see the same pooling bias.
pub fn iou_32(model: &ShapeModel, target: &VoxelGrid) -> Result<f64, Error> {
    let pred = match target.resolution() {
        64 => rasterize_field(model, 64)?.downsample_majority()?,
        _ => rasterize_field(model, 32)?,
    };
    voxel_iou(&pred, &target_at_32(target)?, 0.5)
}

/// m-IoU over the occupied target voxels, with the part-to-label mapping
/// voted on the even-indexed voxels.
pub fn segmentation_miou(model: &ShapeModel, target: &LabeledGrid) -> Result<f64, Error> {
    let (points, labels) = target.occupied_points();
    let gt = LabeledPoints::new(points, labels)?;
    let pred = segment_points(model, &gt.points);
    let mapping = majority_mapping(&pred, &gt, (0..gt.len()).step_by(2))?;
    miou(&pred, &gt, &mapping)
}

pub fn evaluate(model: &ShapeModel, target: &LabeledGrid, cfg: &EvalConfig) -> Result<EvalReport, Error> {
    Ok(EvalReport {
        chamfer_x1000: chamfer_x1000(model, &target.grid, cfg)?,
        iou: iou_32(model, &target.grid)?,
        miou: segmentation_miou(model, target)?,
    })
}
