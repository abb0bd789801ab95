//! The evaluation metrics on hand-made inputs: Chamfer distance between two
//! point sets, voxel IoU of overlapping slabs and m-IoU with a voted mapping.
//!
//!     cargo run --example metrics

use dpf::geometry::{chamfer_distance, majority_mapping, miou, voxel_iou, LabeledPoints, VoxelGrid};

fn main() -> Result<(), dpf::Error> {
    let a = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
    let b = vec![[0.0, 0.1, 0.0], [1.0, 0.0, 0.2]];
    println!("chamfer {:.4}", chamfer_distance(&a, &b)?);

    let slab = |x0: f64, x1: f64| {
        VoxelGrid::from_fn(32, move |p| {
            let inside = (x0..x1).contains(&p[0]) && p[1].abs() < 0.5 && p[2].abs() < 0.5;
            if inside { 1.0 } else { 0.0 }
        })
    };
    println!("IoU of half-overlapping slabs {:.4}", voxel_iou(&slab(-0.5, 0.5)?, &slab(0.0, 1.0)?, 0.5)?);

    // parts 7 and 9 should map to labels 1 and 2
    let at = vec![[0.0; 3]; 6];
    let pred = LabeledPoints::new(at.clone(), vec![7, 7, 7, 9, 9, 9])?;
    let gt = LabeledPoints::new(at, vec![1, 1, 2, 2, 2, 2])?;
    let mapping = majority_mapping(&pred, &gt, 0..gt.len())?;
    println!("mapping {mapping:?}, m-IoU {:.4}", miou(&pred, &gt, &mapping)?);
    Ok(())
}
