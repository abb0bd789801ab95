//! Voxelize every corpus shape and print occupancy and label counts.
//!
//!     cargo run --example synth_corpus

use dpf::synth::{corpus_shape, voxelize, CORPUS_NAMES};

fn main() -> Result<(), dpf::Error> {
    for name in CORPUS_NAMES {
        let spec = corpus_shape(name)?;
        for res in [32, 64] {
            let g = voxelize(&spec, res)?;
            let occupied = g.grid.occupied_count();
            println!(
                "{name:>7} @{res}: {occupied:6} occupied ({:.1}%), {} labels, {} boundary voxels",
                100.0 * occupied as f64 / g.grid.len() as f64,
                spec.label_count(),
                g.grid.boundary_voxels().len()
            );
        }
    }
    Ok(())
}
