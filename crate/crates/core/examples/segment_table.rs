//! Fit eight cylinders to the `table4` shape and report how the parts line
//! up with the ground-truth labels (top plus four legs).
//!
//!     cargo run --release --example segment_table [iterations_per_stage]

use std::collections::BTreeMap;

use dpf::evaluate::segmentation_miou;
use dpf::fields::PrimitiveKind;
use dpf::fitter::{fit, FitConfig, FitMode};
use dpf::geometry::segment_points;
use dpf::synth::{corpus_shape, voxelize};

fn main() -> Result<(), dpf::Error> {
    let iterations: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let spec = corpus_shape("table4")?;
    let (t32, t64) = (voxelize(&spec, 32)?, voxelize(&spec, 64)?);
    let config = FitConfig {
        parts: 8,
        primitive: PrimitiveKind::Cylinder,
        mode: FitMode::Full,
        iterations: [iterations, iterations],
        ..FitConfig::desk()
    };
    let model = fit(&t32.grid, &t64.grid, &config)?.model;

    let (points, labels) = t64.occupied_points();
    let pred = segment_points(&model, &points);
    // part -> (label -> voxel count)
    let mut table: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for (part, label) in pred.labels.iter().zip(&labels) {
        *table.entry(*part).or_default().entry(*label).or_default() += 1;
    }
    for (part, counts) in &table {
        println!("part {part}: {counts:?}");
    }
    println!("m-IoU {:.3}", segmentation_miou(&model, &t64)?);
    Ok(())
}
